//! Journey representation: channel and touch-feature embeddings, a stacked LSTM,
//! context-vector attention pooling into `m`, and a gradient-reversed channel
//! reconstruction head.
//!
//! Sequence tensors are time-major: step `t` of journey `b` is row `t * B + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datahub::Batch;
use crate::diffcore::{Array, DiffError, Graph, NodeId, ParamId, ParamStore};
use crate::init::{glorot, uniform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channel_dim: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Between stacked layers, training only.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channel_dim: 4, feature_dim: 5, hidden: 64, layers: 3, dropout: 0.2 }
    }
}

impl EncoderConfig {
    pub fn input_width(&self) -> usize {
        self.channel_dim + self.feature_dim
    }
}

/// Masks and reorderings shared by every sequence op of one batch.
#[derive(Clone, Debug)]
pub struct StepLayout {
    pub rows: usize,
    pub t_max: usize,
    /// Time-major validity.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl StepLayout {
    pub fn new(batch: &Batch) -> Self {
        let (rows, t_max) = (batch.size, batch.t_max);
        let mut mask = vec![false; rows * t_max];
        for b in 0..rows {
            for t in 0..t_max {
                mask[t * rows + b] = batch.mask[b * t_max + t];
            }
        }
        Self { rows, t_max, mask, lengths: batch.lengths.clone() }
    }

    /// `[B, 1]` indicator of the journeys still running at step `t`.
    pub fn step_mask(&self, t: usize) -> Array {
        let m = &self.mask[t * self.rows..(t + 1) * self.rows];
        Array::column(m.iter().map(|&v| v as u8 as f64).collect())
    }

    /// `[T * B, 1]` validity indicator.
    pub fn mask_column(&self) -> Array {
        Array::column(self.mask.iter().map(|&v| v as u8 as f64).collect())
    }

    /// Softmax mask over steps; an empty journey gets step 0 unmasked so the softmax is defined.
    /// Its hidden states and touch encodings are zero, so what it pools is zero too.
    pub fn attention_mask(&self) -> Vec<bool> {
        let mut m = self.mask.clone();
        for (b, &len) in self.lengths.iter().enumerate() {
            if len == 0 {
                m[b] = true;
            }
        }
        m
    }

    /// `[B, 1]` holding `1 / T_b` (0 for empty journeys).
    pub fn inverse_lengths(&self) -> Array {
        Array::column(self.lengths.iter().map(|&l| if l == 0 { 0.0 } else { 1.0 / l as f64 }).collect())
    }

    /// `[B, 1]` holding 1 for journeys with at least one touch.
    pub fn nonempty(&self) -> Array {
        Array::column(self.lengths.iter().map(|&l| (l > 0) as u8 as f64).collect())
    }

    pub fn channels(&self, batch: &Batch) -> Vec<usize> {
        let mut out = vec![0; self.rows * self.t_max];
        for b in 0..self.rows {
            for t in 0..self.t_max {
                out[t * self.rows + b] = batch.channels[b * self.t_max + t];
            }
        }
        out
    }

    /// `[T * B, d_f]` touch features (zero at padding).
    pub fn features(&self, batch: &Batch) -> Array {
        let d = batch.d_f.max(1);
        let mut out = vec![0.0; self.rows * self.t_max * d];
        if batch.d_f > 0 {
            for b in 0..self.rows {
                for t in 0..self.t_max {
                    let src = (b * self.t_max + t) * d;
                    let dst = (t * self.rows + b) * d;
                    out[dst..dst + d].copy_from_slice(&batch.features[src..src + d]);
                }
            }
        }
        Array::new(vec![self.rows * self.t_max, d], out).expect("sizes agree")
    }
}

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct JourneyEncoder {
    cfg: EncoderConfig,
    n_channels: usize,
    channel_emb: ParamId,
    feat_w: ParamId,
    feat_b: ParamId,
    lstm: Vec<LstmLayer>,
    attn_w: ParamId,
    attn_b: ParamId,
    context: ParamId,
    rev_w1: ParamId,
    rev_b1: ParamId,
    rev_w2: ParamId,
    rev_b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[T * B, channel_dim + feature_dim]`
    pub e_in: NodeId,
    /// Top-layer hidden states, `[T * B, hidden]`.
    pub hidden: NodeId,
    /// `[B, hidden]`
    pub m: NodeId,
    /// `[T, B]` attention weights.
    pub attention: NodeId,
    /// `[T * B, K]`, present when the reverse head ran.
    pub rev_logits: Option<NodeId>,
}

impl JourneyEncoder {
    /// Registers the encoder's parameters under `enc.*`.
    pub fn new<R: Rng>(
        cfg: &EncoderConfig,
        n_channels: usize,
        n_touch_features: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if cfg.layers == 0 || cfg.hidden == 0 || n_channels == 0 {
            return Err(DiffError::Hyper("encoder needs at least one layer, hidden unit and channel".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(DiffError::Hyper(format!("dropout must lie in [0, 1), got {}", cfg.dropout)));
        }
        let h = cfg.hidden;
        let d_f = n_touch_features.max(1);
        let mut emb = uniform(&[n_channels + 1, cfg.channel_dim], 0.5, rng);
        // The sentinel row stays zero: the lookup never routes gradient into it.
        for v in &mut emb.data_mut()[n_channels * cfg.channel_dim..] {
            *v = 0.0;
        }
        let channel_emb = store.add("enc.channel_emb", emb)?;
        let feat_w = store.add("enc.feat_w", glorot(d_f, cfg.feature_dim, rng))?;
        let feat_b = store.add("enc.feat_b", Array::zeros(&[1, cfg.feature_dim]))?;
        let bound = 1.0 / (h as f64).sqrt();
        let mut lstm = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { cfg.input_width() } else { h };
            let mut b = Array::zeros(&[1, 4 * h]);
            // forget gate starts open
            b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            lstm.push(LstmLayer {
                w_ih: store.add(format!("enc.lstm{l}.w_ih"), uniform(&[input, 4 * h], bound, rng))?,
                w_hh: store.add(format!("enc.lstm{l}.w_hh"), uniform(&[h, 4 * h], bound, rng))?,
                b: store.add(format!("enc.lstm{l}.b"), b)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            n_channels,
            channel_emb,
            feat_w,
            feat_b,
            lstm,
            attn_w: store.add("enc.attn_w", glorot(h, h, rng))?,
            attn_b: store.add("enc.attn_b", Array::zeros(&[1, h]))?,
            context: store.add("enc.context", glorot(h, 1, rng))?,
            rev_w1: store.add("enc.rev_w1", glorot(h, h, rng))?,
            rev_b1: store.add("enc.rev_b1", Array::zeros(&[1, h]))?,
            rev_w2: store.add("enc.rev_w2", glorot(h, n_channels, rng))?,
            rev_b2: store.add("enc.rev_b2", Array::zeros(&[1, n_channels]))?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Parameters of the recurrent stack (everything upstream of the reverse head's input).
    pub fn recurrent_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.channel_emb, self.feat_w, self.feat_b];
        for l in &self.lstm {
            v.extend([l.w_ih, l.w_hh, l.b]);
        }
        v
    }

    pub fn reverse_head_params(&self) -> Vec<ParamId> {
        vec![self.rev_w1, self.rev_b1, self.rev_w2, self.rev_b2]
    }

    /// `e_in = [channel embedding, projected features]`, zero at padded steps.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &Batch, layout: &StepLayout) -> Result<NodeId, DiffError> {
        let table = g.param(store, self.channel_emb);
        let e_c = g.embedding(table, layout.channels(batch), Some(self.n_channels))?;
        let f = g.constant(layout.features(batch));
        let (w, b) = (g.param(store, self.feat_w), g.param(store, self.feat_b));
        let e_f = g.linear(f, w, Some(b))?;
        let m = g.constant(layout.mask_column());
        let e_f = g.mul(e_f, m)?;
        g.concat(&[e_c, e_f], 1)
    }

    /// Stacked LSTM. A masked step carries `h` and `c` forward unchanged.
    pub fn recur(&self, g: &mut Graph, store: &ParamStore, e_in: NodeId, layout: &StepLayout) -> Result<NodeId, DiffError> {
        let (rows, h) = (layout.rows, self.cfg.hidden);
        let step_masks: Vec<NodeId> = (0..layout.t_max).map(|t| g.constant(layout.step_mask(t))).collect();
        let mut input = e_in;
        for (l, layer) in self.lstm.iter().enumerate() {
            if l > 0 {
                input = g.dropout(input, self.cfg.dropout)?;
            }
            let (w_ih, w_hh, b) = (g.param(store, layer.w_ih), g.param(store, layer.w_hh), g.param(store, layer.b));
            let x_all = g.linear(input, w_ih, Some(b))?;
            let mut h_prev = g.constant(Array::zeros(&[rows, h]));
            let mut c_prev = h_prev;
            let mut outs = Vec::with_capacity(layout.t_max);
            for (t, &mask) in step_masks.iter().enumerate() {
                let x_t = g.slice(x_all, 0, t * rows, rows)?;
                let rec = g.matmul(h_prev, w_hh)?;
                let z = g.add(x_t, rec)?;
                let zi = g.slice(z, 1, 0, h)?;
                let zf = g.slice(z, 1, h, h)?;
                let zg = g.slice(z, 1, 2 * h, h)?;
                let zo = g.slice(z, 1, 3 * h, h)?;
                let (i, f, o) = (g.sigmoid(zi)?, g.sigmoid(zf)?, g.sigmoid(zo)?);
                let cand = g.tanh(zg)?;
                let keep = g.mul(f, c_prev)?;
                let write = g.mul(i, cand)?;
                let c_new = g.add(keep, write)?;
                let tc = g.tanh(c_new)?;
                let h_new = g.mul(o, tc)?;
                c_prev = masked_update(g, c_prev, c_new, mask)?;
                h_prev = masked_update(g, h_prev, h_new, mask)?;
                outs.push(h_prev);
            }
            input = g.concat(&outs, 0)?;
        }
        Ok(input)
    }

    /// `a = softmax_t(<tanh(W_h h_t + b_h), context>)`, `m = sum_t a_t h_t`.
    pub fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: NodeId,
        layout: &StepLayout,
    ) -> Result<(NodeId, NodeId), DiffError> {
        let (rows, t_max, h) = (layout.rows, layout.t_max, self.cfg.hidden);
        let (w, b, ctx) = (g.param(store, self.attn_w), g.param(store, self.attn_b), g.param(store, self.context));
        let u = g.linear(hidden, w, Some(b))?;
        let u = g.tanh(u)?;
        let scores = g.matmul(u, ctx)?;
        let scores = g.reshape(scores, &[t_max, rows])?;
        let a = g.softmax(scores, 0, Some(layout.attention_mask()))?;
        let a3 = g.reshape(a, &[t_max, rows, 1])?;
        let h3 = g.reshape(hidden, &[t_max, rows, h])?;
        let weighted = g.mul(a3, h3)?;
        let m = g.sum(weighted, 0)?;
        let m = g.reshape(m, &[rows, h])?;
        Ok((m, a))
    }

    /// Channel logits per step from `GRL(h_t)`; softmax is left to the loss.
    pub fn reverse_head(&self, g: &mut Graph, store: &ParamStore, hidden: NodeId, lambda: f64) -> Result<NodeId, DiffError> {
        let r = g.grad_reverse(hidden, lambda)?;
        self.reverse_mlp(g, store, r)
    }

    /// The head without the reversal, for comparisons.
    pub fn reverse_mlp(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId, DiffError> {
        let (w1, b1) = (g.param(store, self.rev_w1), g.param(store, self.rev_b1));
        let (w2, b2) = (g.param(store, self.rev_w2), g.param(store, self.rev_b2));
        let z = g.linear(x, w1, Some(b1))?;
        let z = g.tanh(z)?;
        g.linear(z, w2, Some(b2))
    }

    /// Full encoder pass. `lambda = None` skips the reverse head.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        layout: &StepLayout,
        lambda: Option<f64>,
    ) -> Result<EncoderOutput, DiffError> {
        let e_in = self.embed(g, store, batch, layout)?;
        let hidden = self.recur(g, store, e_in, layout)?;
        let (m, attention) = self.attention(g, store, hidden, layout)?;
        let rev_logits = lambda.map(|l| self.reverse_head(g, store, hidden, l)).transpose()?;
        Ok(EncoderOutput { e_in, hidden, m, attention, rev_logits })
    }
}

fn masked_update(g: &mut Graph, prev: NodeId, new: NodeId, mask: NodeId) -> Result<NodeId, DiffError> {
    let d = g.sub(new, prev)?;
    let d = g.mul(d, mask)?;
    g.add(prev, d)
}

/// `alpha * sum` of per-step cross-entropy against the observed channels; padding contributes 0.
pub fn loss_rev(
    g: &mut Graph,
    logits: NodeId,
    batch: &Batch,
    layout: &StepLayout,
    alpha: f64,
) -> Result<NodeId, DiffError> {
    let targets = layout.channels(batch).into_iter().zip(&layout.mask).map(|(c, &m)| if m { c } else { 0 }).collect();
    let weights = layout.mask.iter().map(|&m| if m { alpha } else { 0.0 }).collect();
    g.softmax_cross_entropy(logits, targets, weights)
}
