//! Minimal static SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
    .unwrap();
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn axes(out: &mut String, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    write!(out, "<path d=\"M{l} {t} L{l} {b} L{r} {b}\" stroke=\"black\" fill=\"none\"/>\n").unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = l + f * (r - l);
        let y = b - f * (b - t);
        write!(
            out,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
            b + 16.0,
            x0 + f * (x1 - x0),
            l - 4.0,
            y + 4.0,
            y0 + f * (y1 - y0)
        )
        .unwrap();
    }
    write!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| MARGIN + (x - xr.0) / (xr.1 - xr.0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - yr.0) / (yr.1 - yr.0) * (H - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, x_label, y_label, xr, yr);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        write!(out, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n", pts.join(" "))
            .unwrap();
        let ly = MARGIN + 16.0 * i as f64;
        write!(
            out,
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\" text-anchor=\"end\">{}</text>\n",
            W - MARGIN,
            escape(&s.name)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let hi = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, "channel", "share", (0.0, values.len() as f64), (0.0, hi));
    let slot = (W - 2.0 * MARGIN) / values.len().max(1) as f64;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let h = if v.is_finite() { v / hi * (H - 2.0 * MARGIN) } else { 0.0 };
        let x = MARGIN + slot * i as f64 + slot * 0.1;
        write!(
            out,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            H - MARGIN - h,
            slot * 0.8,
            COLORS[0],
            x + slot * 0.4,
            H - MARGIN - h - 4.0,
            escape(label)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
