//! Confounded journey generator.
//!
//! Users carry a content block (drives conversion) and a style block (drives only which
//! channels they see). Channel choice also depends on a decaying exposure state, so the
//! exposure sequence is confounded with the user. Conversion is logistic in recency-weighted
//! channel effects, a content-by-touch interaction, and the content features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetSchema, Journey, Touchpoint};
use crate::diffcore::sigmoid;

const PILOT_SIZE: usize = 10_000;
/// Relative tolerance on the calibrated pilot rate.
const CALIBRATION_TOL: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_journeys: usize,
    pub n_channels: usize,
    pub n_touch_features: usize,
    pub n_content: usize,
    pub n_style: usize,
    pub content_cardinality: usize,
    pub style_cardinality: usize,
    pub target_positive_rate: f64,
    /// Journey length is `1 + Poisson(mean_len - 1)`, capped at `max_len`.
    pub mean_len: f64,
    pub max_len: usize,
    /// Scales every channel-choice logit; 0 gives uniform choice.
    pub selection_bias_strength: f64,
    pub state_weight: f64,
    pub state_decay: f64,
    /// Channel effects are a shuffled even grid over this interval.
    pub channel_effect_range: [f64; 2],
    /// Per-step discount applied to earlier touches.
    pub recency: f64,
    /// Weight of the content-by-touch interaction.
    pub interaction_strength: f64,
    pub content_weight: f64,
    pub cost_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_journeys: 20_000,
            n_channels: 10,
            n_touch_features: 4,
            n_content: 4,
            n_style: 4,
            content_cardinality: 4,
            style_cardinality: 4,
            target_positive_rate: 0.1,
            mean_len: 4.0,
            max_len: 10,
            selection_bias_strength: 2.5,
            state_weight: 1.0,
            state_decay: 0.7,
            channel_effect_range: [-0.3, 0.3],
            recency: 0.85,
            interaction_strength: 3.0,
            content_weight: 0.1,
            cost_sigma: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.n_journeys == 0 || self.n_channels == 0 || self.max_len == 0 {
            return bad("n_journeys, n_channels and max_len must be at least 1".into());
        }
        if self.content_cardinality == 0 || self.style_cardinality == 0 {
            return bad("categorical cardinalities must be at least 1".into());
        }
        if !(self.target_positive_rate > 0.0 && self.target_positive_rate < 1.0) {
            return bad(format!("target_positive_rate must lie in (0, 1), got {}", self.target_positive_rate));
        }
        if !(self.mean_len >= 1.0) || !self.mean_len.is_finite() {
            return bad(format!("mean_len must be >= 1, got {}", self.mean_len));
        }
        if !(self.recency > 0.0 && self.recency <= 1.0) || !(0.0..=1.0).contains(&self.state_decay) {
            return bad("recency must lie in (0, 1] and state_decay in [0, 1]".into());
        }
        let [lo, hi] = self.channel_effect_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("channel_effect_range must be an ordered finite pair, got [{lo}, {hi}]"));
        }
        let finite = [self.selection_bias_strength, self.state_weight, self.interaction_strength, self.content_weight];
        if finite.iter().any(|v| !v.is_finite()) || !(self.cost_sigma >= 0.0) {
            return bad("generator weights must be finite and cost_sigma >= 0".into());
        }
        Ok(())
    }
}

/// The exact weights used to generate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    pub channel_effect: Vec<f64>,
    /// Linear weights of the content numeric features.
    pub user_causal_weights: Vec<f64>,
    /// Additive effect of the content categorical value.
    pub content_cat_effect: Vec<f64>,
    /// `K x n_style`: channel preference per style feature.
    pub user_style_weights: Vec<Vec<f64>>,
    /// `style_cardinality x K`.
    pub style_cat_preference: Vec<Vec<f64>>,
    pub selection_bias_strength: f64,
    pub state_weight: f64,
    pub state_decay: f64,
    pub recency: f64,
    pub interaction_strength: f64,
    /// `n_content x d_f`.
    pub interaction: Vec<Vec<f64>>,
    pub intercept: f64,
    /// `K x d_f`.
    pub channel_feature_means: Vec<Vec<f64>>,
    pub cost_log_mean: Vec<f64>,
    pub cost_sigma: f64,
    /// Index sets into `user_num` and `user_cat`.
    pub content_num: Vec<usize>,
    pub style_num: Vec<usize>,
    pub content_cat: Vec<usize>,
    pub style_cat: Vec<usize>,
    pub achieved_pilot_rate: f64,
}

impl SyntheticGroundTruth {
    fn n_channels(&self) -> usize {
        self.channel_effect.len()
    }

    /// Logit without the intercept. Reads only content features and the exposures.
    fn base_logit(&self, j: &Journey) -> f64 {
        let content: Vec<f64> = self.content_num.iter().map(|&i| j.user_num[i]).collect();
        let mut total = 0.0;
        let t_len = j.len();
        for (t, tp) in j.touchpoints.iter().enumerate() {
            let mut bil = 0.0;
            for (u, row) in content.iter().zip(&self.interaction) {
                bil += u * row.iter().zip(&tp.features).map(|(r, f)| r * f).sum::<f64>();
            }
            let w = self.recency.powi((t_len - 1 - t) as i32);
            total += w * (self.channel_effect[tp.channel] + self.interaction_strength * bil.tanh());
        }
        total += content.iter().zip(&self.user_causal_weights).map(|(u, w)| u * w).sum::<f64>();
        for &i in &self.content_cat {
            total += self.content_cat_effect[j.user_cat[i]];
        }
        total
    }

    pub fn conversion_logit(&self, j: &Journey) -> f64 {
        self.intercept + self.base_logit(j)
    }

    /// True conversion probability of a journey under the generating process.
    pub fn conversion_probability(&self, j: &Journey) -> f64 {
        sigmoid(self.conversion_logit(j))
    }

    /// Copy with fresh style features; content, exposures and label are kept.
    pub fn resample_style<R: Rng>(&self, j: &Journey, rng: &mut R) -> Journey {
        let mut out = j.clone();
        for &i in &self.style_num {
            out.user_num[i] = rng.sample(StandardNormal);
        }
        for &i in &self.style_cat {
            out.user_cat[i] = rng.gen_range(0..self.style_cat_preference.len());
        }
        out
    }

    fn choice_logits(&self, style: &[f64], style_cat: usize, state: &[f64]) -> Vec<f64> {
        (0..self.n_channels())
            .map(|k| {
                let pref = self.user_style_weights[k].iter().zip(style).map(|(w, s)| w * s).sum::<f64>()
                    + self.style_cat_preference[style_cat][k];
                self.selection_bias_strength * (pref + self.state_weight * state[k])
            })
            .collect()
    }

    /// Draws one user and exposure sequence; the label is left false.
    fn simulate<R: Rng>(&self, cfg: &GeneratorConfig, id: String, rng: &mut R) -> Journey {
        let n_num = self.content_num.len() + self.style_num.len();
        let user_num: Vec<f64> = (0..n_num).map(|_| rng.sample(StandardNormal)).collect();
        let user_cat = vec![rng.gen_range(0..cfg.content_cardinality), rng.gen_range(0..cfg.style_cardinality)];
        let len = if cfg.mean_len > 1.0 {
            let extra: f64 = Poisson::new(cfg.mean_len - 1.0).expect("positive rate").sample(rng);
            (1 + extra as usize).min(cfg.max_len)
        } else {
            1
        };
        let style: Vec<f64> = self.style_num.iter().map(|&i| user_num[i]).collect();
        let k = self.n_channels();
        let mut state = vec![0.0; k];
        let mut ts: u64 = rng.gen_range(0..1000);
        let mut touchpoints = Vec::with_capacity(len);
        for _ in 0..len {
            let logits = self.choice_logits(&style, user_cat[1], &state);
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
            let mut c = k - 1;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    c = i;
                    break;
                }
                u -= wi;
            }
            for s in state.iter_mut() {
                *s *= self.state_decay;
            }
            state[c] += 1.0;
            let features =
                self.channel_feature_means[c].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            let cost = LogNormal::new(self.cost_log_mean[c], self.cost_sigma).expect("finite sigma").sample(rng);
            touchpoints.push(Touchpoint { channel: c, features, timestamp: ts, cost });
            ts += rng.gen_range(1..100);
        }
        Journey { id, user_cat, user_num, touchpoints, converted: false }
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sd).expect("finite sd");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn draw_truth(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> SyntheticGroundTruth {
    let k = cfg.n_channels;
    let d_f = cfg.n_touch_features;
    let [lo, hi] = cfg.channel_effect_range;
    let mut channel_effect: Vec<f64> = if k == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    };
    channel_effect.shuffle(rng);
    let scale = 1.5 / ((cfg.n_content * d_f).max(1) as f64).sqrt();
    SyntheticGroundTruth {
        channel_effect,
        user_causal_weights: normal_vec(rng, cfg.n_content, cfg.content_weight),
        content_cat_effect: normal_vec(rng, cfg.content_cardinality, 0.4),
        user_style_weights: (0..k).map(|_| normal_vec(rng, cfg.n_style, 0.8)).collect(),
        style_cat_preference: (0..cfg.style_cardinality).map(|_| normal_vec(rng, k, 0.8)).collect(),
        selection_bias_strength: cfg.selection_bias_strength,
        state_weight: cfg.state_weight,
        state_decay: cfg.state_decay,
        recency: cfg.recency,
        interaction_strength: cfg.interaction_strength,
        interaction: (0..cfg.n_content).map(|_| normal_vec(rng, d_f, scale)).collect(),
        intercept: 0.0,
        channel_feature_means: (0..k).map(|_| normal_vec(rng, d_f, 0.5)).collect(),
        cost_log_mean: (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        cost_sigma: cfg.cost_sigma,
        content_num: (0..cfg.n_content).collect(),
        style_num: (cfg.n_content..cfg.n_content + cfg.n_style).collect(),
        content_cat: vec![0],
        style_cat: vec![1],
        achieved_pilot_rate: f64::NAN,
    }
}

/// Bisects the intercept so the pilot's mean conversion probability hits the target.
fn calibrate(base: &[f64], target: f64) -> (f64, f64) {
    let rate = |b: f64| base.iter().map(|x| sigmoid(b + x)).sum::<f64>() / base.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    (b, rate(b))
}

pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<(Dataset, SyntheticGroundTruth), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = draw_truth(cfg, &mut rng);

    let mut pilot_rng = ChaCha8Rng::seed_from_u64(seed);
    pilot_rng.set_stream(1);
    let base: Vec<f64> =
        (0..PILOT_SIZE).map(|i| truth.base_logit(&truth.simulate(cfg, i.to_string(), &mut pilot_rng))).collect();
    let (intercept, achieved) = calibrate(&base, cfg.target_positive_rate);
    if (achieved - cfg.target_positive_rate).abs() > CALIBRATION_TOL * cfg.target_positive_rate {
        return Err(DataError::Calibration { target: cfg.target_positive_rate, achieved });
    }
    truth.intercept = intercept;
    truth.achieved_pilot_rate = achieved;

    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(2);
    let width = cfg.n_journeys.to_string().len();
    let journeys: Vec<Journey> = (0..cfg.n_journeys)
        .map(|i| {
            let mut j = truth.simulate(cfg, format!("u{i:0width$}"), &mut data_rng);
            j.converted = data_rng.gen::<f64>() < truth.conversion_probability(&j);
            j
        })
        .collect();
    let schema = DatasetSchema {
        n_channels: cfg.n_channels,
        n_touch_features: cfg.n_touch_features,
        cat_cardinalities: vec![cfg.content_cardinality, cfg.style_cardinality],
        n_user_numeric: cfg.n_content + cfg.n_style,
    };
    Ok((Dataset::new(schema, journeys)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig { n_journeys: n, ..Default::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, ta) = generate_synthetic(&small(300), 5).unwrap();
        let (b, tb) = generate_synthetic(&small(300), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.intercept.to_bits(), tb.intercept.to_bits());
        let (c, _) = generate_synthetic(&small(300), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn content_and_style_are_disjoint() {
        let (_, t) = generate_synthetic(&small(10), 1).unwrap();
        assert!(t.content_num.iter().all(|i| !t.style_num.contains(i)));
        assert!(t.content_cat.iter().all(|i| !t.style_cat.contains(i)));
    }

    #[test]
    fn positive_rate_near_target() {
        let (ds, t) = generate_synthetic(&small(20_000), 11).unwrap();
        assert!((t.achieved_pilot_rate - 0.1).abs() < 0.01);
        // Binomial noise at N=20000 is about 0.002.
        assert!((ds.positive_rate() - 0.1).abs() < 0.015, "{}", ds.positive_rate());
        let mean_len = ds.n_touchpoints() as f64 / ds.len() as f64;
        assert!((3.5..4.5).contains(&mean_len), "{mean_len}");
        assert!(ds.journeys().iter().all(|j| j.len() <= 10));
    }

    #[test]
    fn unbiased_choice_is_uniform() {
        let cfg = GeneratorConfig { selection_bias_strength: 0.0, ..small(20_000) };
        let (ds, _) = generate_synthetic(&cfg, 3).unwrap();
        let mut counts = vec![0usize; 10];
        for tp in ds.journeys().iter().flat_map(|j| &j.touchpoints) {
            counts[tp.channel] += 1;
        }
        let n = ds.n_touchpoints() as f64;
        let p = 0.1;
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() < 3.0 * sd, "{c} vs {}", n * p);
        }
    }

    #[test]
    fn style_has_no_effect_on_probability() {
        let (ds, t) = generate_synthetic(&small(500), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut changed = 0;
        for j in ds.journeys() {
            let r = t.resample_style(j, &mut rng);
            changed += (r.user_num != j.user_num) as usize;
            assert_eq!(t.conversion_probability(&r).to_bits(), t.conversion_probability(j).to_bits());
        }
        assert_eq!(changed, 500);
    }

    #[test]
    fn unreachable_target_reports_rate() {
        let cfg = GeneratorConfig { target_positive_rate: 1.0 - 1e-300, ..small(10) };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(DataError::Invalid(_))));
        let cfg = GeneratorConfig { target_positive_rate: 0.5, ..small(10) };
        let (_, t) = generate_synthetic(&cfg, 1).unwrap();
        assert!((t.achieved_pilot_rate - 0.5).abs() < 1e-6);
        let cfg = GeneratorConfig { target_positive_rate: 1e-25, ..small(10) };
        match generate_synthetic(&cfg, 1) {
            Err(DataError::Calibration { achieved, .. }) => assert!(achieved > 1e-20),
            other => panic!("expected a calibration error, got {other:?}"),
        }
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, i) in idx.into_iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    fn lift_rank_correlation(cfg: &GeneratorConfig, seed: u64) -> f64 {
        let (ds, t) = generate_synthetic(cfg, seed).unwrap();
        let base = ds.positive_rate();
        let lift: Vec<f64> = (0..10)
            .map(|k| {
                let with: Vec<&Journey> =
                    ds.journeys().iter().filter(|j| j.touchpoints.iter().any(|tp| tp.channel == k)).collect();
                with.iter().filter(|j| j.converted).count() as f64 / with.len() as f64 - base
            })
            .collect();
        let (a, b) = (ranks(&t.channel_effect), ranks(&lift));
        let n = 10.0;
        let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    // The interaction adds a per-channel term through the channel feature means, so
    // `channel_effect` alone only ranks the lift once the interaction is off.
    #[test]
    fn channel_lift_tracks_true_effect() {
        let additive = GeneratorConfig { interaction_strength: 0.0, ..small(50_000) };
        let rho = lift_rank_correlation(&additive, 21);
        assert!(rho > 0.8, "spearman {rho}");
        let rho = lift_rank_correlation(&small(50_000), 21);
        assert!(rho > 0.5, "spearman with interaction {rho}");
    }
}
