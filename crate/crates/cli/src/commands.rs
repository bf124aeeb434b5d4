use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::ValueEnum;
use dcrmta_core::attribution::{
    aggregate_channel, attribute_dataset, read_report, write_report, AttributionReport, Method,
};
use dcrmta_core::datahub::{
    generate_synthetic, import_criteo, load_journeys, save_journeys, split, Dataset, DatasetStats,
};
use dcrmta_core::fusion_model::{load_model, save_model, train, train_baseline_lr, EpochRecord, EvalReport};
use dcrmta_core::replay::{
    allocate_budget, format_table, replay, spend_shares, sweep_fractions, uniform_shares, yield_comparison,
    CreditedTouches, ReplayResult,
};
use serde::Serialize;

use crate::config::{default_journey_file, ConfigError, RunConfig};
use crate::plot::{bar_chart, line_chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    None,
    /// No user module.
    #[value(name = "nU")]
    NoUser,
    /// No reverse channel head.
    #[value(name = "nC")]
    NoChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub plot: bool,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        let dir = &self.cfg.out_dir;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let path = self.cfg.dataset_path();
        log::info!("loading {}", path.display());
        Ok(load_journeys(&path, self.cfg.format, None)?)
    }

    fn select(&self, ds: Dataset, which: SplitArg) -> Result<Dataset> {
        if which == SplitArg::All {
            return Ok(ds);
        }
        let (tr, va, te) = split(&ds, self.cfg.split, self.cfg.split_seed)?;
        Ok(match which {
            SplitArg::Train => tr,
            SplitArg::Val => va,
            _ => te,
        })
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    write(path, out)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

pub fn stats_table(s: &DatasetStats) -> String {
    format!(
        "users\tjourneys\tconversions\ttouchpoints\tchannels\tpositive_rate\n{}\t{}\t{}\t{}\t{}\t{:.6}\n",
        s.users, s.journeys, s.conversions, s.touchpoints, s.channels, s.positive_rate
    )
}

fn emit_stats(dir: &Path, ds: &Dataset) -> Result<()> {
    let stats = ds.stats();
    let table = stats_table(&stats);
    print!("{table}");
    write(&dir.join("stats.tsv"), table)?;
    write_json(&dir.join("stats.json"), &stats)
}

pub fn gen(ctx: &Ctx) -> Result<()> {
    let dir = ctx.out_dir()?;
    let (ds, truth) = generate_synthetic(&ctx.cfg.generator, ctx.cfg.data_seed)?;
    save_journeys(&ds, &dir.join(default_journey_file(ctx.cfg.format)), ctx.cfg.format)?;
    write_json(&dir.join("ground_truth.json"), &truth)?;
    emit_stats(dir, &ds)?;
    ctx.cfg.echo(dir, "gen")
}

pub fn import(ctx: &Ctx, input: Option<PathBuf>) -> Result<()> {
    let input = input
        .or_else(|| ctx.cfg.import.input.clone())
        .ok_or_else(|| ConfigError("import needs --input or import.input".into()))?;
    let map = ctx.cfg.import.column_map.as_ref().ok_or_else(|| ConfigError("import needs import.column_map".into()))?;
    let dir = ctx.out_dir()?;
    let (ds, report) = import_criteo(&input, map, &ctx.cfg.import.filter)?;
    save_journeys(&ds, &dir.join(default_journey_file(ctx.cfg.format)), ctx.cfg.format)?;
    write_json(&dir.join("import_report.json"), &report)?;
    emit_stats(dir, &ds)?;
    let mut echoed = ctx.cfg.clone();
    echoed.import.input = Some(input);
    echoed.echo(dir, "import")
}

pub struct TrainArgs {
    pub ablation: Ablation,
    pub gamma: Option<f64>,
    pub baseline_lr: bool,
    pub tag: Option<String>,
    pub seed: Option<u64>,
}

/// Default file prefix for a training run, e.g. `dcrmta-nU`, `dcrmta-cf0.25`, `lr-s3`.
pub fn run_tag(args: &TrainArgs) -> String {
    let mut tag = if args.baseline_lr { "lr".to_string() } else { "dcrmta".to_string() };
    match args.ablation {
        Ablation::None => {}
        Ablation::NoUser => tag.push_str("-nU"),
        Ablation::NoChannel => tag.push_str("-nC"),
    }
    if let Some(g) = args.gamma {
        write!(tag, "-cf{g}").unwrap();
    }
    if let Some(s) = args.seed {
        write!(tag, "-s{s}").unwrap();
    }
    tag
}

pub fn history_table(history: &[EpochRecord], with_rev: bool) -> String {
    let mut out = String::from("epoch\ttrain_loss\ttrain_cpred");
    if with_rev {
        out.push_str("\ttrain_rev");
    }
    out.push_str("\tval_ce\tval_auc\n");
    for r in history {
        write!(out, "{}\t{:.6}\t{:.6}", r.epoch, r.train_loss, r.train_cpred).unwrap();
        if with_rev {
            write!(out, "\t{}", fmt_opt(r.train_rev)).unwrap();
        }
        writeln!(out, "\t{:.6}\t{}", r.val_ce, fmt_opt(r.val_auc)).unwrap();
    }
    out
}

fn eval_table(r: &EvalReport) -> String {
    format!("auc\tce\trmse\tn\tpositives\n{}\t{:.6}\t{:.6}\t{}\t{}\n", fmt_opt(r.auc), r.ce, r.rmse, r.n, r.positives)
}

pub fn train_cmd(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    if args.baseline_lr && args.ablation != Ablation::None {
        return Err(ConfigError("--ablation applies to the full model, not the LR baseline".into()).into());
    }
    let mut cfg = ctx.cfg.clone();
    match args.ablation {
        Ablation::None => {}
        Ablation::NoUser => cfg.model.disable_user_cam = true,
        Ablation::NoChannel => cfg.model.disable_grl = true,
    }
    if let Some(g) = args.gamma {
        cfg.model.gamma = g;
    }
    cfg.validate()?;
    let tag = args.tag.clone().unwrap_or_else(|| run_tag(args));
    let dir = ctx.out_dir()?;
    let ds = ctx.load_dataset()?;
    let (tr, va, te) = split(&ds, cfg.split, cfg.split_seed)?;
    log::info!("training {tag} on {} journeys ({} validation)", tr.len(), va.len());
    let model = if args.baseline_lr { train_baseline_lr(&tr, &va, &cfg.model)? } else { train(&tr, &va, &cfg.model)? };

    save_model(&model, &dir.join(format!("{tag}.ckpt")))?;
    let with_rev = !args.baseline_lr && !cfg.model.disable_grl;
    write(&dir.join(format!("{tag}.history.tsv")), history_table(model.history(), with_rev))?;
    write_jsonl(&dir.join(format!("{tag}.history.jsonl")), model.history())?;
    let report = model.evaluate(&te)?;
    write_json(&dir.join(format!("{tag}.test_report.json")), &report)?;
    println!("{tag}: best epoch {} val auc {} test auc {}", model.best_epoch(), fmt_opt(model.best_val_auc()), fmt_opt(report.auc));
    if ctx.plot {
        let h = model.history();
        let pts = |f: fn(&EpochRecord) -> Option<f64>| h.iter().map(|r| (r.epoch as f64, f(r).unwrap_or(f64::NAN))).collect();
        let losses = [
            Series { name: "train loss".into(), points: pts(|r| Some(r.train_loss)) },
            Series { name: "val CE".into(), points: pts(|r| Some(r.val_ce)) },
        ];
        write(&dir.join(format!("{tag}.loss.svg")), line_chart(&format!("{tag} loss"), "epoch", "loss", &losses))?;
        let auc = [Series { name: "val AUC".into(), points: pts(|r| r.val_auc) }];
        write(&dir.join(format!("{tag}.auc.svg")), line_chart(&format!("{tag} validation AUC"), "epoch", "AUC", &auc))?;
    }
    cfg.echo(dir, &tag)
}

fn checkpoint_tag(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn eval_cmd(ctx: &Ctx, checkpoint: &Path, which: SplitArg) -> Result<()> {
    ctx.cfg.validate()?;
    let model = load_model(checkpoint)?;
    let ds = ctx.select(ctx.load_dataset()?, which)?;
    let report = model.evaluate(&ds)?;
    let dir = ctx.out_dir()?;
    let stem = format!("{}.eval.{}", checkpoint_tag(checkpoint), which.name());
    let table = eval_table(&report);
    print!("{table}");
    write(&dir.join(format!("{stem}.tsv")), table)?;
    write_json(&dir.join(format!("{stem}.json")), &report)?;
    ctx.cfg.echo(dir, &stem)
}

pub fn attribute_cmd(ctx: &Ctx, checkpoint: &Path, which: SplitArg) -> Result<()> {
    ctx.cfg.validate()?;
    let model = load_model(checkpoint)?;
    let ds = ctx.select(ctx.load_dataset()?, which)?;
    let records = attribute_dataset(&model, &ds, &ctx.cfg.attribution)?;
    let shares = aggregate_channel(&records, &ds)?;
    let dir = ctx.out_dir()?;
    let tag = checkpoint_tag(checkpoint);
    let report = AttributionReport { config: ctx.cfg.attribution.clone(), journeys: records, channel_shares: Some(shares) };
    write_report(&report, &dir.join(format!("{tag}.attribution.jsonl")))?;

    let shares = report.channel_shares.as_deref().unwrap_or_default();
    let mut table = String::from("channel\tshare\n");
    for (c, s) in shares.iter().enumerate() {
        writeln!(table, "{c}\t{s:.6}").unwrap();
    }
    write(&dir.join(format!("{tag}.channels.tsv")), &table)?;
    let exact = report.journeys.iter().filter(|j| j.method == Method::Exact).count();
    let degenerate = report.journeys.iter().filter(|j| j.degenerate).count();
    println!(
        "attributed {} journeys ({exact} exact, {} sampled, {degenerate} degenerate)",
        report.journeys.len(),
        report.journeys.len() - exact
    );
    print!("{table}");
    if ctx.plot {
        let labels: Vec<String> = (0..shares.len()).map(|c| c.to_string()).collect();
        write(&dir.join(format!("{tag}.channels.svg")), bar_chart(&format!("{tag} channel credit"), &labels, shares))?;
    }
    ctx.cfg.echo(dir, &format!("{tag}.attribute"))
}

#[derive(Serialize)]
struct ReplayRow<'a> {
    method: &'a str,
    #[serde(flatten)]
    result: &'a ReplayResult,
}

#[derive(Serialize)]
struct YieldRow<'a> {
    method: &'a str,
    budget_fraction: f64,
    cost_ratio: f64,
    conversion_ratio: f64,
}

fn method_name(path: &Path) -> String {
    let stem = checkpoint_tag(path);
    stem.strip_suffix(".attribution").map(str::to_string).unwrap_or(stem)
}

/// Compares attributed allocations against uniform and spend-proportional ones. The
/// first attribution file decides which touches a conversion depends on, for every
/// method alike.
pub fn replay_cmd(ctx: &Ctx, attributions: &[PathBuf], which: SplitArg) -> Result<()> {
    ctx.cfg.validate()?;
    if attributions.is_empty() {
        return Err(ConfigError("replay needs at least one --attribution".into()).into());
    }
    let ds = ctx.select(ctx.load_dataset()?, which)?;
    let k = ds.schema().n_channels;
    let rule = ctx.cfg.replay.rule;

    let mut methods: Vec<(String, Vec<f64>)> = Vec::new();
    let mut credited = None;
    for path in attributions {
        let report = read_report(path)?;
        let shares = match report.channel_shares {
            Some(s) => s,
            None => aggregate_channel(&report.journeys, &ds)?,
        };
        if shares.len() != k {
            return Err(anyhow!("{}: {} channel shares for a {k}-channel dataset", path.display(), shares.len()));
        }
        if credited.is_none() {
            credited = Some(CreditedTouches::from_records(&report.journeys));
        }
        methods.push((method_name(path), shares));
    }
    let credited = credited.expect("at least one report");
    let spend = spend_shares(&ds)?;
    methods.push(("uniform".into(), uniform_shares(k)));
    methods.push(("spend".into(), spend.clone()));

    let baseline = replay(&ds, &allocate_budget(&spend, &ds, 1.0)?, &credited, rule, 1.0)?;
    let mut rows = Vec::new();
    for (name, shares) in &methods {
        rows.push((name.clone(), sweep_fractions(&ds, shares, &ctx.cfg.replay.fractions, &credited, rule)?));
    }

    let dir = ctx.out_dir()?;
    let table = format_table(&rows);
    print!("{table}");
    write(&dir.join("replay.tsv"), &table)?;
    let mut records = vec![ReplayRow { method: "log", result: &baseline }];
    records.extend(rows.iter().flat_map(|(m, rs)| rs.iter().map(move |r| ReplayRow { method: m, result: r })));
    write_jsonl(&dir.join("replay.jsonl"), &records)?;

    let mut yields = Vec::new();
    let mut ytable = String::from("method\tbudget_fraction\tcost_ratio\tconversion_ratio\n");
    for (m, rs) in &rows {
        for r in rs {
            let y = yield_comparison(&baseline, r)?;
            writeln!(ytable, "{m}\t{}\t{:.6}\t{:.6}", r.budget_fraction, y.cost_ratio, y.conversion_ratio).unwrap();
            yields.push(YieldRow {
                method: m,
                budget_fraction: r.budget_fraction,
                cost_ratio: y.cost_ratio,
                conversion_ratio: y.conversion_ratio,
            });
        }
    }
    write(&dir.join("yield.tsv"), &ytable)?;
    write_jsonl(&dir.join("yield.jsonl"), &yields)?;
    println!("baseline: {} conversions, spend {:.4}", baseline.conversions, baseline.total_spend);
    if ctx.plot {
        let series: Vec<Series> = rows
            .iter()
            .map(|(m, _)| Series {
                name: m.clone(),
                points: std::iter::once((1.0, 1.0))
                    .chain(yields.iter().filter(|y| y.method == m).map(|y| (y.cost_ratio, y.conversion_ratio)))
                    .collect(),
            })
            .collect();
        write(&dir.join("yield.svg"), line_chart("conversion yield", "cost ratio", "conversion ratio", &series))?;
    }
    ctx.cfg.echo(dir, "replay")
}
