//! Causal user representation.
//!
//! User features and per-touch features are encoded to a shared width `d_p`. Each of `M`
//! heads attends over the touches with a user-dependent query; the resulting maps are pooled
//! against a projection of `[v_u, mean v_F]` and projected to the output width. The same
//! pooling runs on Gaussian maps to give the counterfactual response `s_hat`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datahub::{Batch, DatasetSchema};
use crate::diffcore::{Array, DiffError, Graph, NodeId, ParamId, ParamStore};
use crate::init::{glorot, uniform};
use crate::journey_encoder::StepLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamConfig {
    /// Width of each categorical embedding and of the numeric projection.
    pub user_dim: usize,
    pub d_p: usize,
    pub heads: usize,
    /// Gaussian maps averaged per head for the counterfactual response.
    pub n_fake: usize,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self { user_dim: 5, d_p: 16, heads: 8, n_fake: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct UserCam {
    cfg: CamConfig,
    cat_emb: Vec<ParamId>,
    num_proj: Option<(ParamId, ParamId)>,
    w_u: ParamId,
    b_u: ParamId,
    w_f: ParamId,
    b_f: ParamId,
    /// `[d_p, heads * d_p]`, one query projection per head side by side.
    queries: ParamId,
    vc_w: ParamId,
    vc_b: ParamId,
    pool_w: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CamEncoding {
    /// `[B, d_p]`
    pub v_u: NodeId,
    /// `[T * B, d_p]`, zero at padding.
    pub v_f: NodeId,
    /// `[B, 2 d_p]`
    pub v_c: NodeId,
    /// `[B, d_p]`
    pub v_c_proj: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadMap {
    /// `[T, B]` attention weights.
    pub weights: NodeId,
    /// `[B, d_p]`
    pub v_attn: NodeId,
}

/// Which maps feed the counterfactual branch.
#[derive(Clone, Copy, Debug)]
pub enum MapSource<'a> {
    /// Skip the counterfactual branch.
    None,
    /// One `[B, d_p]` array per head (already averaged over samples).
    Fake(&'a [Array]),
    /// Reuse the factual maps; `s_hat` then equals `s`.
    Factual,
}

#[derive(Clone, Debug)]
pub struct CamOutput {
    pub encoding: CamEncoding,
    pub maps: Vec<HeadMap>,
    /// `[B, out]`
    pub s: NodeId,
    pub s_hat: Option<NodeId>,
}

impl UserCam {
    /// Registers parameters under `cam.*`; `out_dim` is the width of `s`.
    pub fn new<R: Rng>(
        cfg: &CamConfig,
        schema: &DatasetSchema,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if cfg.heads == 0 || cfg.d_p == 0 || cfg.user_dim == 0 || cfg.n_fake == 0 {
            return Err(DiffError::Hyper("CAM widths, heads and n_fake must be at least 1".into()));
        }
        let (d_p, ud) = (cfg.d_p, cfg.user_dim);
        let cat_emb = schema
            .cat_cardinalities
            .iter()
            .enumerate()
            .map(|(i, &card)| store.add(format!("cam.cat_emb{i}"), uniform(&[card.max(1), ud], 0.5, rng)))
            .collect::<Result<Vec<_>, _>>()?;
        let num_proj = if schema.n_user_numeric > 0 {
            Some((
                store.add("cam.num_w", glorot(schema.n_user_numeric, ud, rng))?,
                store.add("cam.num_b", Array::zeros(&[1, ud]))?,
            ))
        } else {
            None
        };
        let e_u = user_width(cfg, schema);
        let d_f = schema.n_touch_features.max(1);
        let mut q = Array::zeros(&[d_p, cfg.heads * d_p]);
        for j in 0..cfg.heads {
            let block = glorot(d_p, d_p, rng);
            for r in 0..d_p {
                q.data_mut()[r * cfg.heads * d_p + j * d_p..r * cfg.heads * d_p + (j + 1) * d_p]
                    .copy_from_slice(block.row_slice(r));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            cat_emb,
            num_proj,
            w_u: store.add("cam.w_u", glorot(e_u, d_p, rng))?,
            b_u: store.add("cam.b_u", Array::zeros(&[1, d_p]))?,
            w_f: store.add("cam.w_f", glorot(d_f, d_p, rng))?,
            b_f: store.add("cam.b_f", Array::zeros(&[1, d_p]))?,
            queries: store.add("cam.queries", q)?,
            vc_w: store.add("cam.vc_w", glorot(2 * d_p, d_p, rng))?,
            vc_b: store.add("cam.vc_b", Array::zeros(&[1, d_p]))?,
            pool_w: store.add("cam.pool_w", glorot(cfg.heads, out_dim, rng))?,
        })
    }

    pub fn config(&self) -> &CamConfig {
        &self.cfg
    }

    /// Embedded static features `[B, width]`; a constant column when the schema has none.
    pub fn embed_user(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<NodeId, DiffError> {
        user_block(g, store, batch, &self.cat_emb, self.num_proj)
    }

    pub fn encode_user_touch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        layout: &StepLayout,
    ) -> Result<CamEncoding, DiffError> {
        let rows = layout.rows;
        let e_u = self.embed_user(g, store, batch)?;
        let (w_u, b_u) = (g.param(store, self.w_u), g.param(store, self.b_u));
        let v_u = g.linear(e_u, w_u, Some(b_u))?;
        let v_u = g.tanh(v_u)?;
        let f = g.constant(layout.features(batch));
        let (w_f, b_f) = (g.param(store, self.w_f), g.param(store, self.b_f));
        let v_f = g.linear(f, w_f, Some(b_f))?;
        let v_f = g.tanh(v_f)?;
        let mask = g.constant(layout.mask_column());
        let v_f = g.mul(v_f, mask)?;
        let summed = g.reshape(v_f, &[layout.t_max, rows * self.cfg.d_p])?;
        let summed = g.sum(summed, 0)?;
        let summed = g.reshape(summed, &[rows, self.cfg.d_p])?;
        let inv = g.constant(layout.inverse_lengths());
        let v_f_mean = g.mul(summed, inv)?;
        let v_c = g.concat(&[v_u, v_f_mean], 1)?;
        let (vc_w, vc_b) = (g.param(store, self.vc_w), g.param(store, self.vc_b));
        let v_c_proj = g.linear(v_c, vc_w, Some(vc_b))?;
        Ok(CamEncoding { v_u, v_f, v_c, v_c_proj })
    }

    /// Per head: `w_t = softmax_t(<v_F_t, Q_j v_u>)` and `v_attn = sum_t w_t v_F_t`.
    pub fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &CamEncoding,
        layout: &StepLayout,
    ) -> Result<Vec<HeadMap>, DiffError> {
        let (rows, t_max, d_p) = (layout.rows, layout.t_max, self.cfg.d_p);
        let q = g.param(store, self.queries);
        let queries = g.matmul(enc.v_u, q)?;
        let v_f3 = g.reshape(enc.v_f, &[t_max, rows, d_p])?;
        let mask = layout.attention_mask();
        let mut maps = Vec::with_capacity(self.cfg.heads);
        for j in 0..self.cfg.heads {
            let qj = g.slice(queries, 1, j * d_p, d_p)?;
            let qj = g.reshape(qj, &[1, rows, d_p])?;
            let prod = g.mul(v_f3, qj)?;
            let scores = g.sum(prod, 2)?;
            let scores = g.reshape(scores, &[t_max, rows])?;
            let weights = g.softmax(scores, 0, Some(mask.clone()))?;
            let w3 = g.reshape(weights, &[t_max, rows, 1])?;
            let weighted = g.mul(w3, v_f3)?;
            let v_attn = g.sum(weighted, 0)?;
            let v_attn = g.reshape(v_attn, &[rows, d_p])?;
            maps.push(HeadMap { weights, v_attn });
        }
        Ok(maps)
    }

    /// `[B, M]` responses: coordinate mean of `v_c_proj ⊙ map_j`.
    pub fn pool(&self, g: &mut Graph, v_c_proj: NodeId, maps: &[NodeId]) -> Result<NodeId, DiffError> {
        let cols = maps
            .iter()
            .map(|&m| {
                let p = g.mul(v_c_proj, m)?;
                g.mean(p, 1)
            })
            .collect::<Result<Vec<_>, _>>()?;
        g.concat(&cols, 1)
    }

    /// Pooling, projection to the output width, then L2 normalisation.
    /// Both the factual and the counterfactual response go through here.
    pub fn pool_project(&self, g: &mut Graph, store: &ParamStore, v_c_proj: NodeId, maps: &[NodeId]) -> Result<NodeId, DiffError> {
        let pooled = self.pool(g, v_c_proj, maps)?;
        let w = g.param(store, self.pool_w);
        let projected = g.matmul(pooled, w)?;
        g.l2_normalize(projected)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        layout: &StepLayout,
        source: MapSource<'_>,
    ) -> Result<CamOutput, DiffError> {
        let encoding = self.encode_user_touch(g, store, batch, layout)?;
        let maps = self.attention(g, store, &encoding, layout)?;
        let factual: Vec<NodeId> = maps.iter().map(|m| m.v_attn).collect();
        let s = self.pool_project(g, store, encoding.v_c_proj, &factual)?;
        let s_hat = match source {
            MapSource::None => None,
            MapSource::Factual => Some(self.pool_project(g, store, encoding.v_c_proj, &factual)?),
            MapSource::Fake(arrays) => {
                if arrays.len() != self.cfg.heads {
                    return Err(DiffError::Invalid {
                        op: "cam",
                        msg: format!("{} fake maps for {} heads", arrays.len(), self.cfg.heads),
                    });
                }
                // Empty journeys have no map to replace.
                let live = layout.nonempty();
                let fakes: Vec<NodeId> = arrays
                    .iter()
                    .map(|a| {
                        let mut a = a.clone();
                        for (row, &keep) in a.data_mut().chunks_mut(self.cfg.d_p).zip(live.data()) {
                            row.iter_mut().for_each(|v| *v *= keep);
                        }
                        g.constant(a)
                    })
                    .collect();
                Some(self.pool_project(g, store, encoding.v_c_proj, &fakes)?)
            }
        };
        Ok(CamOutput { encoding, maps, s, s_hat })
    }
}

fn user_width(cfg: &CamConfig, schema: &DatasetSchema) -> usize {
    let w = cfg.user_dim * (schema.cat_cardinalities.len() + (schema.n_user_numeric > 0) as usize);
    w.max(1)
}

/// Concatenated categorical embeddings and numeric projection of the static user features.
pub(crate) fn user_block(
    g: &mut Graph,
    store: &ParamStore,
    batch: &Batch,
    cat_emb: &[ParamId],
    num_proj: Option<(ParamId, ParamId)>,
) -> Result<NodeId, DiffError> {
    let rows = batch.size;
    let n_cat = cat_emb.len();
    let mut parts = Vec::new();
    for (i, &table) in cat_emb.iter().enumerate() {
        let ids: Vec<usize> = (0..rows).map(|b| batch.user_cat[b * n_cat + i]).collect();
        let t = g.param(store, table);
        parts.push(g.embedding(t, ids, None)?);
    }
    if let Some((w, b)) = num_proj {
        let n_num = batch.user_num.len() / rows.max(1);
        let x = g.constant(Array::new(vec![rows, n_num], batch.user_num.clone())?);
        let (w, b) = (g.param(store, w), g.param(store, b));
        parts.push(g.linear(x, w, Some(b))?);
    }
    if parts.is_empty() {
        return Ok(g.constant(Array::full(&[rows, 1], 1.0)));
    }
    g.concat(&parts, 1)
}

/// `n_fake` independent draws of standard-normal maps, `heads` arrays of `[rows, d_p]` each.
pub fn sample_fake_maps<R: Rng>(heads: usize, rows: usize, d_p: usize, n_fake: usize, rng: &mut R) -> Vec<Vec<Array>> {
    (0..n_fake)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let data = (0..rows * d_p).map(|_| rng.sample(StandardNormal)).collect();
                    Array::new(vec![rows, d_p], data).expect("sizes agree")
                })
                .collect()
        })
        .collect()
}

/// Per-head mean over the sampled maps.
pub fn average_maps(samples: &[Vec<Array>]) -> Vec<Array> {
    let n = samples.len() as f64;
    let mut out = samples[0].clone();
    for s in &samples[1..] {
        for (acc, m) in out.iter_mut().zip(s) {
            acc.data_mut().iter_mut().zip(m.data()).for_each(|(a, b)| *a += b);
        }
    }
    if samples.len() > 1 {
        for a in &mut out {
            a.data_mut().iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}
