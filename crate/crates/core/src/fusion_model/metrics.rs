use serde::{Deserialize, Serialize};

use crate::diffcore::bce;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when only one label class is present.
    pub auc: Option<f64>,
    /// Mean binary cross-entropy.
    pub ce: f64,
    pub rmse: f64,
    pub n: usize,
    pub positives: usize,
}

/// Rank-statistic AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64 * avg;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn evaluate_scores(scores: &[f64], labels: &[f64]) -> EvalReport {
    let n = scores.len();
    let denom = n.max(1) as f64;
    let ce = scores.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum::<f64>() / denom;
    let mse = scores.iter().zip(labels).map(|(&p, &y)| (p - y).powi(2)).sum::<f64>() / denom;
    EvalReport {
        auc: auc(scores, labels),
        ce,
        rmse: mse.sqrt(),
        n,
        positives: labels.iter().filter(|&&y| y > 0.5).count(),
    }
}
