//! Fusion of the journey and user representations into conversion predictions, the joint
//! loss, training with early stopping, evaluation metrics, the logistic baseline, and
//! checkpoint files.

mod checkpoint;
mod metrics;
mod net;
mod train;

use serde::{Deserialize, Serialize};

use crate::datahub::DataError;
use crate::diffcore::DiffError;
use crate::journey_encoder::EncoderConfig;
use crate::user_cam::CamConfig;

pub use checkpoint::{from_bytes, load_model, save_model, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{auc, evaluate_scores, EvalReport};
pub use net::{loss_cpred, lr_features, DcrmtaNet, FusionOutput, LogRegNet, LossParts};
pub use train::{train, train_baseline_lr, EpochRecord, ModelKind, TrainedModel};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Model architecture, loss weights and optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cam: CamConfig,
    /// Weight of the channel reconstruction loss.
    pub alpha: f64,
    /// Weight of the factual prediction loss.
    pub beta: f64,
    /// Weight of the counterfactual-effect loss.
    pub gamma: f64,
    /// Gradient reversal scale.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    /// Replace the user module by plain feature merging.
    pub disable_user_cam: bool,
    /// Drop the reverse head and its loss.
    pub disable_grl: bool,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub fake_map_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            cam: CamConfig::default(),
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            lambda: 1.0,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            disable_user_cam: false,
            disable_grl: false,
            init_seed: 0,
            shuffle_seed: 1,
            fake_map_seed: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1".into());
        }
        if self.encoder.layers == 0 || self.encoder.hidden == 0 {
            return bad("encoder needs at least one layer and one hidden unit".into());
        }
        if !(0.0..1.0).contains(&self.encoder.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.encoder.dropout));
        }
        if self.cam.heads == 0 || self.cam.d_p == 0 || self.cam.n_fake == 0 || self.cam.user_dim == 0 {
            return bad("cam widths, heads and n_fake must be at least 1".into());
        }
        Ok(())
    }

    /// The counterfactual term only exists with the user module enabled.
    pub fn uses_counterfactual(&self) -> bool {
        !self.disable_user_cam && self.gamma > 0.0
    }
}

#[cfg(test)]
mod tests;
