//! Budget replay over a logged dataset.
//!
//! Touchpoints are replayed in global time order (ties broken by journey id, then touch
//! index). A channel spends from its budget until the first touch it cannot afford;
//! from then on the channel is exhausted and all its later touches are dropped. Each
//! channel therefore keeps a time prefix of its touches, and shrinking a budget can only
//! shorten that prefix.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::JourneyAttribution;
use crate::datahub::Dataset;

/// Relative slack when comparing a cost with a remaining budget, so that budgets
/// rebuilt from spend shares still cover the spend they came from.
pub const BUDGET_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("invalid replay input: {0}")]
    Invalid(String),
    #[error("no credits for converting journey {0}")]
    MissingCredits(String),
    #[error("baseline replay has no conversions")]
    NoBaselineConversions,
}

/// When a converting journey still counts after replay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionRule {
    /// Every positively credited touch must be retained.
    #[default]
    AllCredited,
    /// Any retained touch suffices.
    AnyRetained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub fractions: Vec<f64>,
    pub rule: RetentionRule,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { fractions: vec![0.5, 0.25, 0.125, 0.0625], rule: RetentionRule::AllCredited }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub budget_fraction: f64,
    pub total_spend: f64,
    pub conversions: usize,
    pub touched_journeys: usize,
    /// `None` when nothing converted.
    pub cpa: Option<f64>,
    pub cvr: f64,
    pub channel_spend: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldSummary {
    pub cost_ratio: f64,
    pub conversion_ratio: f64,
}

/// Per converting journey, which touches carry positive credit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CreditedTouches(HashMap<String, Vec<bool>>);

impl CreditedTouches {
    pub fn from_records(records: &[JourneyAttribution]) -> Self {
        Self(records.iter().map(|r| (r.journey_id.clone(), r.attr.iter().map(|&a| a > 0.0).collect())).collect())
    }

    /// Every touch of every journey counts as credited.
    pub fn all(dataset: &Dataset) -> Self {
        Self(dataset.journeys().iter().map(|j| (j.id.clone(), vec![true; j.len()])).collect())
    }

    pub fn get(&self, id: &str) -> Option<&[bool]> {
        self.0.get(id).map(Vec::as_slice)
    }
}

fn check_shares(shares: &[f64], k: usize) -> Result<(), ReplayError> {
    if shares.len() != k {
        return Err(ReplayError::Invalid(format!("{} shares for {k} channels", shares.len())));
    }
    if shares.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(ReplayError::Invalid("shares must be finite and non-negative".into()));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ReplayError::Invalid(format!("shares sum to {total}, not 1")));
    }
    Ok(())
}

/// `fraction * total logged cost * share` per channel.
pub fn allocate_budget(shares: &[f64], dataset: &Dataset, fraction: f64) -> Result<Vec<f64>, ReplayError> {
    check_shares(shares, dataset.schema().n_channels)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ReplayError::Invalid(format!("budget fraction must lie in (0, 1], got {fraction}")));
    }
    let total: f64 = dataset.journeys().iter().flat_map(|j| &j.touchpoints).map(|t| t.cost).sum();
    Ok(shares.iter().map(|s| fraction * total * s).collect())
}

/// Logged spend per channel, normalised.
pub fn spend_shares(dataset: &Dataset) -> Result<Vec<f64>, ReplayError> {
    let mut spend = vec![0.0; dataset.schema().n_channels];
    for tp in dataset.journeys().iter().flat_map(|j| &j.touchpoints) {
        spend[tp.channel] += tp.cost;
    }
    let total: f64 = spend.iter().sum();
    if !(total > 0.0) {
        return Err(ReplayError::Invalid("dataset has no spend".into()));
    }
    Ok(spend.iter().map(|s| s / total).collect())
}

pub fn uniform_shares(n_channels: usize) -> Vec<f64> {
    vec![1.0 / n_channels as f64; n_channels]
}

/// Replays the log under `budgets`; `fraction` is only recorded in the result.
pub fn replay(
    dataset: &Dataset,
    budgets: &[f64],
    credited: &CreditedTouches,
    rule: RetentionRule,
    fraction: f64,
) -> Result<ReplayResult, ReplayError> {
    let k = dataset.schema().n_channels;
    if budgets.len() != k || budgets.iter().any(|b| !(*b >= 0.0)) {
        return Err(ReplayError::Invalid(format!("need {k} non-negative budgets")));
    }
    let js = dataset.journeys();
    let mut events: Vec<(u64, &str, usize, usize)> = js
        .iter()
        .enumerate()
        .flat_map(|(ji, j)| j.touchpoints.iter().enumerate().map(move |(t, tp)| (tp.timestamp, j.id.as_str(), t, ji)))
        .collect();
    events.sort_unstable();

    let mut remaining = budgets.to_vec();
    let mut exhausted = vec![false; k];
    let mut channel_spend = vec![0.0; k];
    let mut kept: Vec<Vec<bool>> = js.iter().map(|j| vec![false; j.len()]).collect();
    for &(_, _, t, ji) in &events {
        let tp = &js[ji].touchpoints[t];
        let c = tp.channel;
        if exhausted[c] {
            continue;
        }
        if tp.cost <= remaining[c] + BUDGET_SLACK * budgets[c] {
            remaining[c] -= tp.cost;
            channel_spend[c] += tp.cost;
            kept[ji][t] = true;
        } else {
            exhausted[c] = true;
        }
    }

    let (mut conversions, mut touched) = (0, 0);
    for (j, kept) in js.iter().zip(&kept) {
        if !kept.iter().any(|&k| k) {
            continue;
        }
        touched += 1;
        if !j.converted {
            continue;
        }
        let survives = match rule {
            RetentionRule::AnyRetained => true,
            RetentionRule::AllCredited => {
                let cred = credited.get(&j.id).ok_or_else(|| ReplayError::MissingCredits(j.id.clone()))?;
                if cred.len() != j.len() {
                    return Err(ReplayError::Invalid(format!("credit mask length mismatch for {}", j.id)));
                }
                cred.iter().zip(kept).all(|(&c, &k)| !c || k)
            }
        };
        conversions += survives as usize;
    }
    let total_spend: f64 = channel_spend.iter().sum();
    Ok(ReplayResult {
        budget_fraction: fraction,
        total_spend,
        conversions,
        touched_journeys: touched,
        cpa: (conversions > 0).then(|| total_spend / conversions as f64),
        cvr: if touched > 0 { conversions as f64 / touched as f64 } else { 0.0 },
        channel_spend,
    })
}

/// One replay per fraction with fresh budgets. Fractions must be strictly descending.
pub fn sweep_fractions(
    dataset: &Dataset,
    shares: &[f64],
    fractions: &[f64],
    credited: &CreditedTouches,
    rule: RetentionRule,
) -> Result<Vec<ReplayResult>, ReplayError> {
    if fractions.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(ReplayError::Invalid(format!("fractions must be strictly descending: {fractions:?}")));
    }
    fractions
        .par_iter()
        .map(|&f| {
            let budgets = allocate_budget(shares, dataset, f)?;
            replay(dataset, &budgets, credited, rule, f)
        })
        .collect()
}

pub fn yield_comparison(baseline: &ReplayResult, candidate: &ReplayResult) -> Result<YieldSummary, ReplayError> {
    if baseline.budget_fraction != 1.0 {
        return Err(ReplayError::Invalid(format!("baseline fraction is {}, expected 1", baseline.budget_fraction)));
    }
    if baseline.conversions == 0 {
        return Err(ReplayError::NoBaselineConversions);
    }
    if !(baseline.total_spend > 0.0) {
        return Err(ReplayError::Invalid("baseline spent nothing".into()));
    }
    Ok(YieldSummary {
        cost_ratio: candidate.total_spend / baseline.total_spend,
        conversion_ratio: candidate.conversions as f64 / baseline.conversions as f64,
    })
}

/// Tab-separated table: one row per method, `CPA`, `CVR`, `Conversions` per fraction.
pub fn format_table(rows: &[(String, Vec<ReplayResult>)]) -> String {
    let mut out = String::from("method");
    if let Some((_, first)) = rows.first() {
        for r in first {
            let f = r.budget_fraction;
            write!(out, "\tCPA@{f}\tCVR@{f}\tConversions@{f}").expect("write to string");
        }
    }
    out.push('\n');
    for (name, results) in rows {
        out.push_str(name);
        for r in results {
            let cpa = r.cpa.map_or_else(|| "NA".to_string(), |c| format!("{c:.4}"));
            write!(out, "\t{cpa}\t{:.4}\t{}", r.cvr, r.conversions).expect("write to string");
        }
        out.push('\n');
    }
    out
}
