use rand::Rng;

use super::ModelConfig;
use crate::datahub::{Batch, DatasetSchema, Journey};
use crate::diffcore::{Array, DiffError, Graph, NodeId, ParamId, ParamStore};
use crate::init::{glorot, uniform};
use crate::journey_encoder::{loss_rev, EncoderOutput, JourneyEncoder, StepLayout};
use crate::user_cam::{user_block, CamOutput, MapSource, UserCam};

/// Plain merge used when the user module is disabled:
/// `s = tanh(W [mean touch features, embedded user features] + b)`.
#[derive(Clone, Debug)]
struct MergeBranch {
    cat_emb: Vec<ParamId>,
    num_proj: Option<(ParamId, ParamId)>,
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum UserBranch {
    Cam(UserCam),
    Merge(MergeBranch),
}

#[derive(Clone, Debug)]
pub struct DcrmtaNet {
    cfg: ModelConfig,
    encoder: JourneyEncoder,
    user: UserBranch,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub encoder: EncoderOutput,
    pub cam: Option<CamOutput>,
    pub s: NodeId,
    pub s_hat: Option<NodeId>,
    /// `[B, 1]`
    pub p: NodeId,
    pub p_hat: Option<NodeId>,
    pub v_eff: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub cpred: NodeId,
    pub rev: Option<NodeId>,
}

impl DcrmtaNet {
    /// Registers every parameter in `store`; the registration order is fixed by the config.
    pub fn build<R: Rng>(
        cfg: &ModelConfig,
        schema: &DatasetSchema,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let h = cfg.encoder.hidden;
        let encoder = JourneyEncoder::new(&cfg.encoder, schema.n_channels, schema.n_touch_features, store, rng)?;
        let user = if cfg.disable_user_cam {
            let ud = cfg.cam.user_dim;
            let cat_emb = schema
                .cat_cardinalities
                .iter()
                .enumerate()
                .map(|(i, &card)| store.add(format!("merge.cat_emb{i}"), uniform(&[card.max(1), ud], 0.5, rng)))
                .collect::<Result<Vec<_>, _>>()?;
            let num_proj = if schema.n_user_numeric > 0 {
                Some((
                    store.add("merge.num_w", glorot(schema.n_user_numeric, ud, rng))?,
                    store.add("merge.num_b", Array::zeros(&[1, ud]))?,
                ))
            } else {
                None
            };
            let user_w = (ud * (cat_emb.len() + num_proj.is_some() as usize)).max(1);
            let width = schema.n_touch_features.max(1) + user_w;
            UserBranch::Merge(MergeBranch {
                cat_emb,
                num_proj,
                w: store.add("merge.w", glorot(width, h, rng))?,
                b: store.add("merge.b", Array::zeros(&[1, h]))?,
            })
        } else {
            UserBranch::Cam(UserCam::new(&cfg.cam, schema, h, store, rng)?)
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            user,
            head_w1: store.add("head.w1", glorot(h, h, rng))?,
            head_b1: store.add("head.b1", Array::zeros(&[1, h]))?,
            head_w2: store.add("head.w2", glorot(h, 1, rng))?,
            head_b2: store.add("head.b2", Array::zeros(&[1, 1]))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &JourneyEncoder {
        &self.encoder
    }

    pub fn cam(&self) -> Option<&UserCam> {
        match &self.user {
            UserBranch::Cam(c) => Some(c),
            UserBranch::Merge(_) => None,
        }
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        vec![self.head_w1, self.head_b1, self.head_w2, self.head_b2]
    }

    /// Prediction head logits, `[B, 1]`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId, DiffError> {
        let (w1, b1) = (g.param(store, self.head_w1), g.param(store, self.head_b1));
        let (w2, b2) = (g.param(store, self.head_w2), g.param(store, self.head_b2));
        let z = g.linear(x, w1, Some(b1))?;
        let z = g.tanh(z)?;
        g.linear(z, w2, Some(b2))
    }

    /// `p = σ(head(s + m))`; with `s_hat`, also `v_eff = s - s_hat` and `p_hat = σ(head(v_eff))`.
    /// `(s + m) - (s_hat + m)` is evaluated in its cancelled form so `m` drops out exactly.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s: NodeId,
        s_hat: Option<NodeId>,
        m: NodeId,
    ) -> Result<(NodeId, Option<NodeId>, Option<NodeId>), DiffError> {
        let v_final = g.add(s, m)?;
        let logit = self.head(g, store, v_final)?;
        let p = g.sigmoid(logit)?;
        let Some(s_hat) = s_hat else { return Ok((p, None, None)) };
        let v_eff = g.sub(s, s_hat)?;
        let logit_hat = self.head(g, store, v_eff)?;
        let p_hat = g.sigmoid(logit_hat)?;
        Ok((p, Some(p_hat), Some(v_eff)))
    }

    /// `σ(head(0))`: the prediction for a journey whose representations are all zero.
    pub fn baseline_probability(&self, store: &ParamStore) -> f64 {
        let mut g = Graph::new(false, 0);
        let z = g.constant(Array::zeros(&[1, self.cfg.encoder.hidden]));
        let logit = self.head(&mut g, store, z).expect("head shapes are fixed");
        crate::diffcore::sigmoid(g.value(logit).data()[0])
    }

    fn merge(&self, g: &mut Graph, store: &ParamStore, br: &MergeBranch, batch: &Batch, layout: &StepLayout) -> Result<NodeId, DiffError> {
        let rows = layout.rows;
        let d = batch.d_f.max(1);
        let f = g.constant(layout.features(batch));
        let f = g.reshape(f, &[layout.t_max, rows * d])?;
        let f = g.sum(f, 0)?;
        let f = g.reshape(f, &[rows, d])?;
        let inv = g.constant(layout.inverse_lengths());
        let f_mean = g.mul(f, inv)?;
        let e_u = user_block(g, store, batch, &br.cat_emb, br.num_proj)?;
        let x = g.concat(&[f_mean, e_u], 1)?;
        let (w, b) = (g.param(store, br.w), g.param(store, br.b));
        let s = g.linear(x, w, Some(b))?;
        g.tanh(s)
    }

    /// Forward pass. `source` picks the counterfactual maps (ignored without the user module);
    /// `reverse` runs the reverse head when the config keeps it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        source: MapSource<'_>,
        reverse: bool,
    ) -> Result<FusionOutput, DiffError> {
        let layout = StepLayout::new(batch);
        let lambda = (reverse && !self.cfg.disable_grl).then_some(self.cfg.lambda);
        let encoder = self.encoder.forward(g, store, batch, &layout, lambda)?;
        let (cam, s, s_hat) = match &self.user {
            UserBranch::Cam(cam) => {
                let out = cam.forward(g, store, batch, &layout, source)?;
                let (s, s_hat) = (out.s, out.s_hat);
                (Some(out), s, s_hat)
            }
            UserBranch::Merge(br) => (None, self.merge(g, store, br, batch, &layout)?, None),
        };
        let (p, p_hat, v_eff) = self.fuse(g, store, s, s_hat, encoder.m)?;
        Ok(FusionOutput { encoder, cam, s, s_hat, p, p_hat, v_eff })
    }

    /// Joint loss `beta·ΣBCE(p) + gamma·ΣBCE(p_hat) + alpha·ΣCE(reverse)` over the batch.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        fakes: Option<&[Array]>,
    ) -> Result<(FusionOutput, LossParts), DiffError> {
        let source = match fakes {
            Some(f) if self.cfg.uses_counterfactual() => MapSource::Fake(f),
            _ => MapSource::None,
        };
        let out = self.forward(g, store, batch, source, true)?;
        let cpred = loss_cpred(g, out.p, out.p_hat, &batch.labels, self.cfg.beta, self.cfg.gamma)?;
        let (total, rev) = match out.encoder.rev_logits {
            Some(logits) => {
                let rev = loss_rev(g, logits, batch, &StepLayout::new(batch), self.cfg.alpha)?;
                (g.add(cpred, rev)?, Some(rev))
            }
            None => (cpred, None),
        };
        Ok((out, LossParts { total, cpred, rev }))
    }

    /// Factual conversion probabilities, in batch row order.
    pub fn predict(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<f64>, DiffError> {
        let mut g = Graph::new(false, 0);
        let out = self.forward(&mut g, store, batch, MapSource::None, false)?;
        Ok(g.value(out.p).data().to_vec())
    }
}

/// `beta·Σ BCE(p, y) + gamma·Σ BCE(p_hat, y)`; the second term is dropped without `p_hat`.
pub fn loss_cpred(
    g: &mut Graph,
    p: NodeId,
    p_hat: Option<NodeId>,
    labels: &[f64],
    beta: f64,
    gamma: f64,
) -> Result<NodeId, DiffError> {
    let f = g.binary_cross_entropy(p, labels.to_vec())?;
    let f = g.scale(f, beta)?;
    match p_hat {
        Some(ph) => {
            let c = g.binary_cross_entropy(ph, labels.to_vec())?;
            let c = g.scale(c, gamma)?;
            g.add(f, c)
        }
        None => Ok(f),
    }
}

/// Logistic regression on channel counts, mean touch features and the user features.
#[derive(Clone, Debug)]
pub struct LogRegNet {
    schema: DatasetSchema,
    w: ParamId,
    b: ParamId,
}

/// `[count per channel, mean touch features, one-hot categoricals, numeric user features]`.
pub fn lr_features(schema: &DatasetSchema, j: &Journey) -> Vec<f64> {
    let mut x = vec![0.0; schema.n_channels];
    let mut mean = vec![0.0; schema.n_touch_features];
    for tp in &j.touchpoints {
        x[tp.channel] += 1.0;
        mean.iter_mut().zip(&tp.features).for_each(|(m, f)| *m += f);
    }
    if !j.is_empty() {
        mean.iter_mut().for_each(|m| *m /= j.len() as f64);
    }
    x.extend(mean);
    for (&v, &card) in j.user_cat.iter().zip(&schema.cat_cardinalities) {
        x.extend((0..card).map(|c| (c == v) as u8 as f64));
    }
    x.extend_from_slice(&j.user_num);
    x
}

impl LogRegNet {
    /// Zero-initialised weights, so every initial prediction is 0.5.
    pub fn build(schema: &DatasetSchema, store: &mut ParamStore) -> Result<Self, DiffError> {
        let n = schema.n_channels + schema.n_touch_features + schema.cat_cardinalities.iter().sum::<usize>()
            + schema.n_user_numeric;
        Ok(Self {
            schema: schema.clone(),
            w: store.add("lr.w", Array::zeros(&[n.max(1), 1]))?,
            b: store.add("lr.b", Array::zeros(&[1, 1]))?,
        })
    }

    fn design<'a>(&self, journeys: impl Iterator<Item = &'a Journey>) -> Result<Array, DiffError> {
        let mut data = Vec::new();
        let mut rows = 0;
        let width = self.width();
        for j in journeys {
            let mut x = lr_features(&self.schema, j);
            x.resize(width, 0.0);
            data.extend(x);
            rows += 1;
        }
        Array::new(vec![rows, width], data)
    }

    fn width(&self) -> usize {
        (self.schema.n_channels
            + self.schema.n_touch_features
            + self.schema.cat_cardinalities.iter().sum::<usize>()
            + self.schema.n_user_numeric)
            .max(1)
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        journeys: impl Iterator<Item = &'a Journey>,
    ) -> Result<NodeId, DiffError> {
        let x = g.constant(self.design(journeys)?);
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let z = g.linear(x, w, Some(b))?;
        g.sigmoid(z)
    }

    pub fn predict<'a>(&self, store: &ParamStore, journeys: impl Iterator<Item = &'a Journey>) -> Result<Vec<f64>, DiffError> {
        let mut g = Graph::new(false, 0);
        let p = self.forward(&mut g, store, journeys)?;
        Ok(g.value(p).data().to_vec())
    }
}
