//! Shapley credit for touchpoints against a frozen conversion model.
//!
//! The game's players are a journey's touchpoints and the value of a coalition is the
//! model's probability for the sub-journey that keeps only those touchpoints, in their
//! original order, with the user's features untouched.

mod report;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::{Dataset, Journey};
use crate::fusion_model::{ModelError, TrainedModel};

pub use report::{read_report, write_report, AttributionReport, ReportRecord};

/// Largest exact limit accepted; `2^24` coalitions is already far past practical.
pub const MAX_EXACT_LIMIT: usize = 24;
/// Allowed gap between the summed values and `f(J) - f(empty)`.
pub const EFFICIENCY_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("journey has {len} touchpoints, above the exact limit {limit}; use the sampling estimator")]
    TooLong { len: usize, limit: usize },
    #[error("efficiency violated for journey {journey}: residual {residual:e}")]
    Efficiency { journey: String, residual: f64 },
    #[error("invalid attribution input: {0}")]
    Invalid(String),
    #[error("no converting journey carries credit")]
    NoConversions,
    #[error("no attribution record for converting journey {0}")]
    MissingRecord(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
}

/// Scores coalitions of one journey. Masks are aligned with the journey's touchpoints.
pub trait CoalitionScorer: Sync {
    fn score_coalitions(&self, journey: &Journey, masks: &[Vec<bool>]) -> Result<Vec<f64>, AttributionError>;
}

impl CoalitionScorer for TrainedModel {
    fn score_coalitions(&self, journey: &Journey, masks: &[Vec<bool>]) -> Result<Vec<f64>, AttributionError> {
        Ok(self.score_subsets(journey, masks)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    /// Journeys up to this length are attributed exactly.
    pub exact_limit: usize,
    /// Permutations drawn for longer journeys.
    pub n_perms: usize,
    pub seed: u64,
    /// Attribute only converting journeys.
    pub converting_only: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { exact_limit: 12, n_perms: 2048, seed: 0, converting_only: true }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<(), AttributionError> {
        if self.exact_limit > MAX_EXACT_LIMIT {
            return Err(AttributionError::Invalid(format!("exact_limit {} exceeds {MAX_EXACT_LIMIT}", self.exact_limit)));
        }
        if self.n_perms == 0 {
            return Err(AttributionError::Invalid("n_perms must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Exact,
    MonteCarlo { n_perms: usize, seed: u64 },
}

/// Sampling estimate with per-coordinate standard errors (`NaN` from a single permutation).
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub sv: Vec<f64>,
    pub std_err: Vec<f64>,
    pub n_perms: usize,
}

/// Positive-part normalised credits.
#[derive(Clone, Debug, PartialEq)]
pub struct Credits {
    pub attr: Vec<f64>,
    /// Set when no value is positive; credits are then all zero.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JourneyAttribution {
    pub journey_id: String,
    pub sv: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_err: Option<Vec<f64>>,
    pub attr: Vec<f64>,
    pub degenerate: bool,
    pub method: Method,
}

fn mask_of(bits: u64, len: usize) -> Vec<bool> {
    (0..len).map(|i| bits >> i & 1 == 1).collect()
}

/// `|S|! (T - |S| - 1)! / T!` for every `|S|` in `0..T`.
fn coalition_weights(t: usize) -> Vec<f64> {
    // 1 / (T * C(T-1, s)), with the binomials built up exactly in floating point
    let mut out = Vec::with_capacity(t);
    let mut binom = 1.0f64;
    for s in 0..t {
        out.push(1.0 / (t as f64 * binom));
        binom = binom * (t - 1 - s) as f64 / (s + 1) as f64;
    }
    out
}

/// Exact values from all `2^T` coalition scores.
pub fn shapley_exact<S: CoalitionScorer + ?Sized>(
    scorer: &S,
    journey: &Journey,
    exact_limit: usize,
) -> Result<Vec<f64>, AttributionError> {
    let t = journey.len();
    if t > exact_limit.min(MAX_EXACT_LIMIT) {
        return Err(AttributionError::TooLong { len: t, limit: exact_limit.min(MAX_EXACT_LIMIT) });
    }
    if t == 0 {
        return Ok(Vec::new());
    }
    let n = 1u64 << t;
    let masks: Vec<Vec<bool>> = (0..n).map(|b| mask_of(b, t)).collect();
    let f = scorer.score_coalitions(journey, &masks)?;
    let weights = coalition_weights(t);
    let mut sv = vec![0.0; t];
    let mut terms = Vec::with_capacity((n / 2) as usize);
    for (j, v) in sv.iter_mut().enumerate() {
        let bit = 1u64 << j;
        terms.clear();
        terms.extend(
            (0..n)
                .filter(|s| s & bit == 0)
                .map(|s| weights[s.count_ones() as usize] * (f[(s | bit) as usize] - f[s as usize])),
        );
        // summing in value order makes interchangeable players come out bit-identical
        terms.sort_by(f64::total_cmp);
        *v = terms.iter().sum();
    }
    let residual = sv.iter().sum::<f64>() - (f[(n - 1) as usize] - f[0]);
    if !(residual.abs() < EFFICIENCY_TOL) {
        return Err(AttributionError::Efficiency { journey: journey.id.clone(), residual });
    }
    Ok(sv)
}

/// Averages marginal contributions along the given orderings of the touchpoints.
/// Each distinct coalition is scored once.
pub fn shapley_from_permutations<S: CoalitionScorer + ?Sized>(
    scorer: &S,
    journey: &Journey,
    perms: &[Vec<usize>],
) -> Result<McEstimate, AttributionError> {
    let t = journey.len();
    if perms.is_empty() {
        return Err(AttributionError::Invalid("at least one permutation is required".into()));
    }
    for p in perms {
        let mut seen = vec![false; t];
        if p.len() != t || !p.iter().all(|&i| i < t && !std::mem::replace(&mut seen[i], true)) {
            return Err(AttributionError::Invalid(format!("{p:?} is not a permutation of 0..{t}")));
        }
    }
    let mut index: HashMap<Vec<bool>, usize> = HashMap::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    let mut chains: Vec<Vec<usize>> = Vec::with_capacity(perms.len());
    for p in perms {
        let mut mask = vec![false; t];
        let mut chain = Vec::with_capacity(t + 1);
        for step in 0..=t {
            if step > 0 {
                mask[p[step - 1]] = true;
            }
            let next = masks.len();
            let id = *index.entry(mask.clone()).or_insert(next);
            if id == next {
                masks.push(mask.clone());
            }
            chain.push(id);
        }
        chains.push(chain);
    }
    let f = scorer.score_coalitions(journey, &masks)?;
    let (mut sum, mut sum_sq) = (vec![0.0; t], vec![0.0; t]);
    for (p, chain) in perms.iter().zip(&chains) {
        for (step, &j) in p.iter().enumerate() {
            let d = f[chain[step + 1]] - f[chain[step]];
            sum[j] += d;
            sum_sq[j] += d * d;
        }
    }
    let n = perms.len() as f64;
    let sv: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err = sum_sq
        .iter()
        .zip(&sv)
        .map(|(sq, mean)| {
            if perms.len() < 2 {
                return f64::NAN;
            }
            let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(McEstimate { sv, std_err, n_perms: perms.len() })
}

/// Uniform random permutations, fully determined by `seed`.
pub fn sample_permutations(t: usize, n_perms: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_perms)
        .map(|_| {
            let mut p: Vec<usize> = (0..t).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect()
}

pub fn shapley_mc<S: CoalitionScorer + ?Sized>(
    scorer: &S,
    journey: &Journey,
    n_perms: usize,
    seed: u64,
) -> Result<McEstimate, AttributionError> {
    if n_perms == 0 {
        return Err(AttributionError::Invalid("n_perms must be at least 1".into()));
    }
    shapley_from_permutations(scorer, journey, &sample_permutations(journey.len(), n_perms, seed))
}

pub fn normalize_credits(sv: &[f64]) -> Credits {
    let total: f64 = sv.iter().map(|v| v.max(0.0)).sum();
    if total > 0.0 {
        Credits { attr: sv.iter().map(|v| v.max(0.0) / total).collect(), degenerate: false }
    } else {
        Credits { attr: vec![0.0; sv.len()], degenerate: true }
    }
}

/// Seed of the sampler for the journey at `index`; independent of scheduling.
fn journey_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Exact values up to the limit, sampled values above it.
pub fn attribute_journey<S: CoalitionScorer + ?Sized>(
    scorer: &S,
    journey: &Journey,
    cfg: &AttributionConfig,
    index: usize,
) -> Result<JourneyAttribution, AttributionError> {
    let (sv, std_err, method) = if journey.len() <= cfg.exact_limit {
        (shapley_exact(scorer, journey, cfg.exact_limit)?, None, Method::Exact)
    } else {
        let seed = journey_seed(cfg.seed, index);
        let est = shapley_mc(scorer, journey, cfg.n_perms, seed)?;
        (est.sv, Some(est.std_err), Method::MonteCarlo { n_perms: cfg.n_perms, seed })
    };
    let credits = normalize_credits(&sv);
    Ok(JourneyAttribution {
        journey_id: journey.id.clone(),
        sv,
        std_err,
        attr: credits.attr,
        degenerate: credits.degenerate,
        method,
    })
}

/// Attributes the dataset's journeys in parallel; output follows dataset order.
pub fn attribute_dataset<S: CoalitionScorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    cfg: &AttributionConfig,
) -> Result<Vec<JourneyAttribution>, AttributionError> {
    cfg.validate()?;
    dataset
        .journeys()
        .par_iter()
        .enumerate()
        .filter(|(_, j)| j.converted || !cfg.converting_only)
        .map(|(i, j)| attribute_journey(scorer, j, cfg, i))
        .collect()
}

/// Credit share per channel over converting, non-degenerate journeys.
pub fn aggregate_channel(records: &[JourneyAttribution], dataset: &Dataset) -> Result<Vec<f64>, AttributionError> {
    let by_id: HashMap<&str, &JourneyAttribution> = records.iter().map(|r| (r.journey_id.as_str(), r)).collect();
    let mut shares = vec![0.0; dataset.schema().n_channels];
    for j in dataset.journeys().iter().filter(|j| j.converted) {
        let rec = by_id.get(j.id.as_str()).ok_or_else(|| AttributionError::MissingRecord(j.id.clone()))?;
        if rec.attr.len() != j.len() {
            return Err(AttributionError::Invalid(format!(
                "record for {} has {} credits for {} touchpoints",
                j.id,
                rec.attr.len(),
                j.len()
            )));
        }
        if rec.degenerate {
            continue;
        }
        for (tp, a) in j.touchpoints.iter().zip(&rec.attr) {
            shares[tp.channel] += a;
        }
    }
    let total: f64 = shares.iter().sum();
    if !(total > 0.0) {
        return Err(AttributionError::NoConversions);
    }
    shares.iter_mut().for_each(|s| *s /= total);
    Ok(shares)
}
