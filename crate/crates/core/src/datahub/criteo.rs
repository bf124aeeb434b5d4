//! Event-log import: group rows by user, sort by time, score and filter journeys.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetSchema, Journey, Touchpoint};

fn tab() -> char {
    '\t'
}

/// Names of the columns to read from the log header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub uid: String,
    pub timestamp: String,
    pub campaign: String,
    pub conversion: String,
    /// Unmapped or empty cells cost 1.0.
    #[serde(default)]
    pub cost: Option<String>,
    #[serde(default)]
    pub touch_features: Vec<String>,
    /// Taken from each user's first event.
    #[serde(default)]
    pub user_cat: Vec<String>,
    #[serde(default)]
    pub user_num: Vec<String>,
    #[serde(default = "tab")]
    pub delimiter: char,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Keep at most this many of the highest-scoring journeys.
    #[serde(default)]
    pub max_journeys: Option<usize>,
    /// Long journeys keep only their last `max_len` events.
    #[serde(default)]
    pub max_len: Option<usize>,
    /// Downsample the majority class (lowest scores first) to reach this positive rate.
    #[serde(default)]
    pub rebalance_positive_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    pub events: usize,
    pub journeys_grouped: usize,
    pub dropped_by_score: usize,
    pub dropped_by_rebalance: usize,
    pub kept: usize,
    pub channels: usize,
    pub positive_rate: f64,
}

struct Event {
    ts: u64,
    campaign: String,
    converted: bool,
    cost: f64,
    features: Vec<Option<f64>>,
    user_cat: Vec<String>,
    user_num: Vec<Option<f64>>,
}

struct Group {
    uid: String,
    events: Vec<Event>,
    score: f64,
}

/// Filter score: distinct channels + half the (capped) length + share of non-missing feature cells.
pub fn journey_score(distinct_channels: usize, len: usize, present: usize, cells: usize) -> f64 {
    let filled = if cells == 0 { 1.0 } else { present as f64 / cells as f64 };
    distinct_channels as f64 + 0.5 * len.min(10) as f64 + filled
}

fn parse_opt(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_ts(s: &str) -> Option<u64> {
    let s = s.trim();
    s.parse::<u64>().ok().or_else(|| s.parse::<f64>().ok().filter(|v| *v >= 0.0 && v.is_finite()).map(|v| v as u64))
}

pub fn import_criteo(path: &Path, map: &ColumnMap, filter: &FilterConfig) -> Result<(Dataset, ImportReport), DataError> {
    if !map.delimiter.is_ascii() {
        return Err(DataError::Invalid(format!("delimiter {:?} must be a single ASCII character", map.delimiter)));
    }
    if let Some(r) = filter.rebalance_positive_rate {
        if !(r > 0.0 && r < 1.0) {
            return Err(DataError::Invalid(format!("rebalance_positive_rate must lie in (0, 1), got {r}")));
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(map.delimiter as u8)
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::io(path, io),
            other => DataError::Invalid(format!("{other:?}")),
        })?;
    let header = rdr.headers().map_err(|e| DataError::Invalid(e.to_string()))?.clone();
    let col = |name: &String| header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.clone()));
    let cols = |names: &[String]| names.iter().map(col).collect::<Result<Vec<_>, _>>();
    let (c_uid, c_ts, c_camp, c_conv) = (col(&map.uid)?, col(&map.timestamp)?, col(&map.campaign)?, col(&map.conversion)?);
    let c_cost = map.cost.as_ref().map(col).transpose()?;
    let (c_feat, c_ucat, c_unum) = (cols(&map.touch_features)?, cols(&map.user_cat)?, cols(&map.user_num)?);

    let mut groups: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    let mut events = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            DataError::Record { line, field: "<row>".into(), msg: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let bad = |field: &str, msg: String| DataError::Record { line, field: field.into(), msg };
        let ts = parse_ts(cell(c_ts)).ok_or_else(|| bad(&map.timestamp, format!("bad timestamp `{}`", cell(c_ts))))?;
        let converted = match parse_opt(cell(c_conv)) {
            Some(v) => v > 0.0,
            None => return Err(bad(&map.conversion, format!("bad conversion flag `{}`", cell(c_conv)))),
        };
        let cost = match c_cost.map(|c| cell(c).trim()) {
            None | Some("") => 1.0,
            Some(s) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => v,
                _ => return Err(bad(map.cost.as_deref().unwrap_or("cost"), format!("bad cost `{s}`"))),
            },
        };
        events += 1;
        groups.entry(cell(c_uid).to_string()).or_default().push(Event {
            ts,
            campaign: cell(c_camp).trim().to_string(),
            converted,
            cost,
            features: c_feat.iter().map(|&c| parse_opt(cell(c))).collect(),
            user_cat: c_ucat.iter().map(|&c| cell(c).trim().to_string()).collect(),
            user_num: c_unum.iter().map(|&c| parse_opt(cell(c))).collect(),
        });
    }
    if events == 0 {
        return Err(DataError::Empty(path.display().to_string()));
    }

    let journeys_grouped = groups.len();
    let mut scored: Vec<Group> = groups
        .into_iter()
        .map(|(uid, mut evs)| {
            evs.sort_by_key(|e| e.ts);
            if let Some(m) = filter.max_len {
                let drop = evs.len().saturating_sub(m.max(1));
                evs.drain(..drop);
            }
            let distinct = evs.iter().map(|e| e.campaign.as_str()).collect::<BTreeSet<_>>().len();
            let cells = evs.len() * c_feat.len() + c_unum.len();
            let present = evs.iter().map(|e| e.features.iter().flatten().count()).sum::<usize>()
                + evs[0].user_num.iter().flatten().count();
            let score = journey_score(distinct, evs.len(), present, cells);
            Group { uid, events: evs, score }
        })
        .collect();
    // Highest score first; ties by uid so the order is total.
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.uid.cmp(&b.uid)));

    let mut report = ImportReport { events, journeys_grouped, ..Default::default() };
    if let Some(m) = filter.max_journeys {
        report.dropped_by_score = scored.len().saturating_sub(m);
        scored.truncate(m);
    }
    if let Some(rate) = filter.rebalance_positive_rate {
        let label = |g: &Group| g.events.iter().any(|e| e.converted);
        let n_pos = scored.iter().filter(|g| label(g)).count() as f64;
        let n_neg = scored.len() as f64 - n_pos;
        // Keep every journey of the minority side and the best-scoring part of the majority.
        let (cap_pos, cap_neg) = if n_pos / (n_pos + n_neg).max(1.0) > rate {
            ((n_neg * rate / (1.0 - rate)).round() as usize, usize::MAX)
        } else {
            (usize::MAX, (n_pos * (1.0 - rate) / rate).round() as usize)
        };
        let (mut kp, mut kn) = (0, 0);
        let before = scored.len();
        scored.retain(|g| {
            let (k, cap) = if label(g) { (&mut kp, cap_pos) } else { (&mut kn, cap_neg) };
            *k += 1;
            *k <= cap
        });
        report.dropped_by_rebalance = before - scored.len();
    }
    if scored.is_empty() {
        return Err(DataError::NothingSurvived(journeys_grouped));
    }
    // Output order is by uid, independent of scores.
    scored.sort_by(|a, b| a.uid.cmp(&b.uid));

    let campaigns: BTreeMap<&str, usize> = scored
        .iter()
        .flat_map(|g| g.events.iter().map(|e| e.campaign.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    let cat_vocab: Vec<BTreeMap<&str, usize>> = (0..c_ucat.len())
        .map(|k| {
            scored
                .iter()
                .map(|g| g.events[0].user_cat[k].as_str())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, c)| (c, i))
                .collect()
        })
        .collect();

    let journeys: Vec<Journey> = scored
        .iter()
        .map(|g| {
            let first = &g.events[0];
            Journey {
                id: g.uid.clone(),
                user_cat: first.user_cat.iter().zip(&cat_vocab).map(|(v, voc)| voc[v.as_str()]).collect(),
                user_num: first.user_num.iter().map(|v| v.unwrap_or(0.0)).collect(),
                touchpoints: g
                    .events
                    .iter()
                    .map(|e| Touchpoint {
                        channel: campaigns[e.campaign.as_str()],
                        features: e.features.iter().map(|v| v.unwrap_or(0.0)).collect(),
                        timestamp: e.ts,
                        cost: e.cost,
                    })
                    .collect(),
                converted: g.events.iter().any(|e| e.converted),
            }
        })
        .collect();
    let schema = DatasetSchema {
        n_channels: campaigns.len(),
        n_touch_features: c_feat.len(),
        cat_cardinalities: cat_vocab.iter().map(BTreeMap::len).collect(),
        n_user_numeric: c_unum.len(),
    };
    let ds = Dataset::new(schema, journeys)?;
    report.kept = ds.len();
    report.channels = ds.schema().n_channels;
    report.positive_rate = ds.positive_rate();
    Ok((ds, report))
}
