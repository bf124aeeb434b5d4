use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_scores, EvalReport};
use super::net::{DcrmtaNet, LogRegNet};
use super::{ModelConfig, ModelError};
use crate::datahub::{Batch, Dataset, DatasetSchema, Journey};
use crate::diffcore::{Adam, Graph, ParamStore};
use crate::user_cam::{average_maps, sample_fake_maps};

/// Batches per length bucket when shuffling.
const BUCKET_BATCHES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Dcrmta,
    LogReg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-journey means over the epoch's batches.
    pub train_loss: f64,
    pub train_cpred: f64,
    /// Absent when the reverse head is disabled.
    pub train_rev: Option<f64>,
    pub val_ce: f64,
    pub val_auc: Option<f64>,
}

impl EpochRecord {
    /// Model selection score: validation AUC, or negated CE when AUC is undefined.
    fn selection_score(&self) -> f64 {
        self.val_auc.unwrap_or(-self.val_ce)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Net {
    Dcrmta(DcrmtaNet),
    LogReg(LogRegNet),
}

/// Frozen model: parameters of the best epoch plus the training record.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub(crate) config: ModelConfig,
    pub(crate) schema: DatasetSchema,
    pub(crate) kind: ModelKind,
    pub(crate) params: ParamStore,
    pub(crate) history: Vec<EpochRecord>,
    pub(crate) best_epoch: usize,
    pub(crate) net: Net,
}

impl TrainedModel {
    /// Fresh, untrained model with parameters drawn from `config.init_seed`.
    pub fn init(kind: ModelKind, config: &ModelConfig, schema: &DatasetSchema) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = match kind {
            ModelKind::Dcrmta => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
                Net::Dcrmta(DcrmtaNet::build(config, schema, &mut params, &mut rng)?)
            }
            ModelKind::LogReg => Net::LogReg(LogRegNet::build(schema, &mut params)?),
        };
        Ok(Self {
            config: config.clone(),
            schema: schema.clone(),
            kind,
            params,
            history: Vec::new(),
            best_epoch: 0,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// 1-based epoch whose parameters are held; 0 before training.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_val_auc(&self) -> Option<f64> {
        self.history.iter().filter_map(|r| r.val_auc).reduce(f64::max)
    }

    pub fn net(&self) -> Option<&DcrmtaNet> {
        match &self.net {
            Net::Dcrmta(n) => Some(n),
            Net::LogReg(_) => None,
        }
    }

    /// Probabilities for journeys given with their row positions; may include empty journeys.
    fn predict_rows(&self, rows: &[&Journey]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(self.config.batch_size) {
            let p = match &self.net {
                Net::Dcrmta(net) => {
                    let batch = Batch::from_journeys(&self.schema, chunk.iter().copied().enumerate());
                    net.predict(&self.params, &batch)?
                }
                Net::LogReg(net) => net.predict(&self.params, chunk.iter().copied())?,
            };
            out.extend(p);
        }
        Ok(out)
    }

    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<f64>, ModelError> {
        self.predict_rows(&dataset.journeys().iter().collect::<Vec<_>>())
    }

    pub fn predict_journeys(&self, journeys: &[Journey]) -> Result<Vec<f64>, ModelError> {
        self.predict_rows(&journeys.iter().collect::<Vec<_>>())
    }

    /// Conversion probability of the sub-journey of kept touchpoints. User features are kept.
    pub fn score_subset(&self, journey: &Journey, keep: &[bool]) -> Result<f64, ModelError> {
        Ok(self.score_subsets(journey, &[keep.to_vec()])?[0])
    }

    /// Batched [`Self::score_subset`] over many masks of one journey.
    pub fn score_subsets(&self, journey: &Journey, masks: &[Vec<bool>]) -> Result<Vec<f64>, ModelError> {
        if let Some(m) = masks.iter().find(|m| m.len() != journey.len()) {
            return Err(ModelError::Config(format!("keep mask of length {} for a journey of {}", m.len(), journey.len())));
        }
        let subs: Vec<Journey> = masks.iter().map(|m| journey.subset(m)).collect();
        self.predict_journeys(&subs)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalReport, ModelError> {
        let p = self.predict(dataset)?;
        let y: Vec<f64> = dataset.journeys().iter().map(Journey::label).collect();
        Ok(evaluate_scores(&p, &y))
    }
}

/// Shuffles, groups similar lengths into batches, then shuffles the batch order.
fn bucketed_batches(ds: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let js = ds.journeys();
    let mut order: Vec<usize> = (0..js.len()).collect();
    order.shuffle(rng);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for bucket in order.chunks_mut(batch_size * BUCKET_BATCHES) {
        bucket.sort_by_key(|&i| js[i].len());
        groups.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    groups.shuffle(rng);
    groups.into_iter().map(|g| Batch::from_journeys(ds.schema(), g.into_iter().map(|i| (i, &js[i])))).collect()
}

fn check_inputs(train: &Dataset, val: &Dataset) -> Result<(), ModelError> {
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::Config("training and validation sets must be non-empty".into()));
    }
    if train.schema() != val.schema() {
        return Err(ModelError::Config("training and validation schemas differ".into()));
    }
    Ok(())
}

struct EpochSums {
    total: f64,
    cpred: f64,
    rev: Option<f64>,
}

/// Shared loop: one optimiser step per batch, validation after every epoch,
/// best-epoch snapshot and patience-based stopping.
fn fit<F>(model: &mut TrainedModel, train: &Dataset, val: &Dataset, mut step: F) -> Result<(), ModelError>
where
    F: FnMut(&mut TrainedModel, &Batch, &mut ChaCha8Rng) -> Result<EpochSums, ModelError>,
{
    let cfg = model.config.clone();
    let mut adam = Adam::with_lr(cfg.learning_rate)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut best = model.params.clone();
    let mut best_score = f64::NEG_INFINITY;
    let n = train.len() as f64;
    for epoch in 1..=cfg.max_epochs {
        let (mut total, mut cpred, mut rev) = (0.0, 0.0, None::<f64>);
        for (bi, batch) in bucketed_batches(train, cfg.batch_size, &mut shuffle_rng).iter().enumerate() {
            model.params.zero_grads();
            let sums = step(model, batch, &mut shuffle_rng)?;
            if !sums.total.is_finite() {
                return Err(ModelError::Divergence { epoch, batch: bi, loss: sums.total });
            }
            adam.step(&mut model.params);
            total += sums.total;
            cpred += sums.cpred;
            if let Some(r) = sums.rev {
                *rev.get_or_insert(0.0) += r;
            }
        }
        let report = model.evaluate(val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / n,
            train_cpred: cpred / n,
            train_rev: rev.map(|r| r / n),
            val_ce: report.ce,
            val_auc: report.auc,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} val_auc {:?} val_ce {:.5}",
            rec.train_loss,
            rec.val_auc,
            rec.val_ce
        );
        let score = rec.selection_score();
        model.history.push(rec);
        if score > best_score {
            best_score = score;
            model.best_epoch = epoch;
            best.copy_values_from(&model.params)?;
        } else if epoch - model.best_epoch >= cfg.patience {
            break;
        }
    }
    model.params.copy_values_from(&best)?;
    model.params.zero_grads();
    Ok(())
}

/// Trains the full model (or an ablation, per the config flags).
pub fn train(train: &Dataset, val: &Dataset, cfg: &ModelConfig) -> Result<TrainedModel, ModelError> {
    check_inputs(train, val)?;
    let mut model = TrainedModel::init(ModelKind::Dcrmta, cfg, train.schema())?;
    let mut fake_rng = ChaCha8Rng::seed_from_u64(cfg.fake_map_seed);
    let cam_dims = (cfg.cam.heads, cfg.cam.d_p, cfg.cam.n_fake);
    fit(&mut model, train, val, |model, batch, rng| {
        let Net::Dcrmta(net) = &model.net else { unreachable!("dcrmta training on a dcrmta net") };
        let fakes = model.config.uses_counterfactual().then(|| {
            let (heads, d_p, n_fake) = cam_dims;
            average_maps(&sample_fake_maps(heads, batch.size, d_p, n_fake, &mut fake_rng))
        });
        let mut g = Graph::new(true, rng.gen());
        let (_, parts) = net.loss(&mut g, &model.params, batch, fakes.as_deref())?;
        let value = |id| g.value(id).data()[0];
        let sums = EpochSums { total: value(parts.total), cpred: value(parts.cpred), rev: parts.rev.map(value) };
        if sums.total.is_finite() {
            g.backward(parts.total)?;
            g.accumulate_param_grads(&mut model.params);
        }
        Ok(sums)
    })?;
    Ok(model)
}

/// Logistic baseline trained with the same optimiser, batching and early stopping.
pub fn train_baseline_lr(train: &Dataset, val: &Dataset, cfg: &ModelConfig) -> Result<TrainedModel, ModelError> {
    check_inputs(train, val)?;
    let mut model = TrainedModel::init(ModelKind::LogReg, cfg, train.schema())?;
    let js = train.journeys();
    fit(&mut model, train, val, |model, batch, _| {
        let Net::LogReg(net) = &model.net else { unreachable!("baseline training on a logistic net") };
        let mut g = Graph::new(true, 0);
        let p = net.forward(&mut g, &model.params, batch.indices.iter().map(|&i| &js[i]))?;
        let loss = g.binary_cross_entropy(p, batch.labels.clone())?;
        let v = g.value(loss).data()[0];
        if v.is_finite() {
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.params);
        }
        Ok(EpochSums { total: v, cpred: v, rev: None })
    })?;
    Ok(model)
}
