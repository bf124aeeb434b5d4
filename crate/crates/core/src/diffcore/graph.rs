use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, DiffError, ParamId, ParamStore};

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Every differentiable operation the kernel knows about.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Elementwise with same-rank broadcasting over extents of 1.
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Tanh,
    Sigmoid,
    /// Softmax along `axis`; `mask` has the input's shape and `false` marks excluded entries.
    Softmax { axis: usize, mask: Option<Vec<bool>> },
    Mean { axis: usize },
    Sum { axis: usize },
    SumAll,
    /// Row lookup into a `[vocab, dim]` table. Ids equal to `padding` give zero rows and no gradient.
    Embedding { ids: Vec<usize>, padding: Option<usize> },
    /// Inverted dropout; identity when the graph is not in training mode.
    Dropout { rate: f64 },
    /// Normalizes each row (last axis) to unit Euclidean norm; zero rows stay zero.
    L2Normalize,
    /// Identity forward, gradient multiplied by `-lambda` backward.
    GradReverse { lambda: f64 },
    /// `sum_i w_i * CE(softmax(logits_i), target_i)` over rows of a `[n, k]` input.
    SoftmaxCrossEntropy { targets: Vec<usize>, weights: Vec<f64> },
    /// `sum_i BCE(p_i, y_i)` with `p` clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    BinaryCrossEntropy { targets: Vec<f64> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Mean { .. } => "mean",
            OpKind::Sum { .. } => "sum",
            OpKind::SumAll => "sum_all",
            OpKind::Embedding { .. } => "embedding_lookup",
            OpKind::Dropout { .. } => "dropout",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::GradReverse { .. } => "grad_reverse",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::BinaryCrossEntropy { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Leaf,
    Param,
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node {
    source: Source,
    inputs: Vec<NodeId>,
    value: Array,
    grad: Option<Vec<f64>>,
    /// Op-specific saved state (dropout keep mask).
    aux: Vec<f64>,
}

/// Tape of array operations supporting one reverse sweep from a scalar root.
///
/// Nodes are appended in evaluation order, so the tape itself is a topological order.
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
    param_nodes: Vec<Option<NodeId>>,
}

impl Graph {
    /// `train` enables dropout; `seed` drives the dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Self { nodes: Vec::new(), train, rng: ChaCha8Rng::seed_from_u64(seed), param_nodes: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Source::Leaf, Vec::new(), value, Vec::new())
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if self.param_nodes.len() <= id.index() {
            self.param_nodes.resize(id.index() + 1, None);
        }
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let n = self.push(Source::Param, Vec::new(), store.value(id).clone(), Vec::new());
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward root with respect to this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, source: Source, inputs: Vec<NodeId>, value: Array, aux: Vec<f64>) -> NodeId {
        self.nodes.push(Node { source, inputs, value, grad: None, aux });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        let (value, aux) = self.forward(&kind, inputs)?;
        Ok(self.push(Source::Op(kind), inputs.to_vec(), value, aux))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Slice { axis, start, len }, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: NodeId, axis: usize, mask: Option<Vec<bool>>) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Softmax { axis, mask }, &[a])
    }
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Mean { axis }, &[a])
    }
    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Sum { axis }, &[a])
    }
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::SumAll, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>, padding: Option<usize>) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Embedding { ids, padding }, &[table])
    }
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId, DiffError> {
        self.apply(OpKind::Dropout { rate }, &[a])
    }
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(OpKind::L2Normalize, &[a])
    }
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> Result<NodeId, DiffError> {
        self.apply(OpKind::GradReverse { lambda }, &[a])
    }
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<NodeId, DiffError> {
        self.apply(OpKind::SoftmaxCrossEntropy { targets, weights }, &[logits])
    }
    pub fn binary_cross_entropy(&mut self, p: NodeId, targets: Vec<f64>) -> Result<NodeId, DiffError> {
        self.apply(OpKind::BinaryCrossEntropy { targets }, &[p])
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, DiffError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn forward(&mut self, kind: &OpKind, inputs: &[NodeId]) -> Result<(Array, Vec<f64>), DiffError> {
        let op = kind.name();
        let expect = |n: usize| -> Result<(), DiffError> {
            if inputs.len() != n {
                Err(DiffError::Invalid { op, msg: format!("expects {n} inputs, got {}", inputs.len()) })
            } else {
                Ok(())
            }
        };
        let out = match kind {
            OpKind::MatMul => {
                expect(2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(op, a, b));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut c, 0.0);
                Array::new(vec![m, n], c)?
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                expect(2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let bc = Broadcast::new(op, a, b)?;
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let mut out = vec![0.0; bc.len()];
                bc.for_each(|o, ia, ib| out[o] = f(a.data()[ia], b.data()[ib]));
                Array::new(bc.out_shape.clone(), out)?
            }
            OpKind::Scale(c) => {
                expect(1)?;
                map(self.value(inputs[0]), |x| c * x)
            }
            OpKind::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(DiffError::Invalid { op, msg: "needs at least one input".into() });
                }
                let first = self.value(inputs[0]).shape().to_vec();
                check_axis(op, &first, *axis)?;
                let mut total = 0;
                for &i in inputs {
                    let s = self.value(i).shape();
                    let compatible = s.len() == first.len()
                        && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                    if !compatible {
                        return Err(DiffError::ShapeMismatch { op, lhs: first.clone(), rhs: s.to_vec() });
                    }
                    total += s[*axis];
                }
                let mut shape = first.clone();
                shape[*axis] = total;
                let (outer, _, inner) = split_axis(&shape, *axis);
                let mut out = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for &i in inputs {
                        let v = self.value(i);
                        let chunk = v.shape()[*axis] * inner;
                        out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Array::new(shape, out)?
            }
            OpKind::Slice { axis, start, len } => {
                expect(1)?;
                let a = self.value(inputs[0]);
                check_axis(op, a.shape(), *axis)?;
                if *len == 0 || start + len > a.shape()[*axis] {
                    return Err(DiffError::Invalid {
                        op,
                        msg: format!("range {start}..{} outside extent {:?}", start + len, a.shape()),
                    });
                }
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    out.extend_from_slice(&a.data()[base..base + len * inner]);
                }
                let mut shape = a.shape().to_vec();
                shape[*axis] = *len;
                Array::new(shape, out)?
            }
            OpKind::Reshape(shape) => {
                expect(1)?;
                let a = self.value(inputs[0]);
                if shape.iter().product::<usize>() != a.len() {
                    return Err(DiffError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: shape.clone() });
                }
                Array::new(shape.clone(), a.data().to_vec())?
            }
            OpKind::Tanh => {
                expect(1)?;
                map(self.value(inputs[0]), f64::tanh)
            }
            OpKind::Sigmoid => {
                expect(1)?;
                map(self.value(inputs[0]), sigmoid)
            }
            OpKind::Softmax { axis, mask } => {
                expect(1)?;
                let a = self.value(inputs[0]);
                check_axis(op, a.shape(), *axis)?;
                if let Some(m) = mask {
                    if m.len() != a.len() {
                        return Err(DiffError::Invalid {
                            op,
                            msg: format!("mask has {} entries for shape {:?}", m.len(), a.shape()),
                        });
                    }
                }
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let mut out = vec![0.0; a.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let keep = |i: usize| mask.as_ref().map_or(true, |m| m[idx(i)]);
                        let mut max = f64::NEG_INFINITY;
                        for i in (0..n).filter(|&i| keep(i)) {
                            max = max.max(a.data()[idx(i)]);
                        }
                        if max == f64::NEG_INFINITY {
                            return Err(DiffError::FullyMasked { op, slice: o * inner + j });
                        }
                        let mut z = 0.0;
                        for i in (0..n).filter(|&i| keep(i)) {
                            let e = (a.data()[idx(i)] - max).exp();
                            out[idx(i)] = e;
                            z += e;
                        }
                        for i in (0..n).filter(|&i| keep(i)) {
                            out[idx(i)] /= z;
                        }
                    }
                }
                Array::new(a.shape().to_vec(), out)?
            }
            OpKind::Mean { axis } | OpKind::Sum { axis } => {
                expect(1)?;
                let a = self.value(inputs[0]);
                check_axis(op, a.shape(), *axis)?;
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        let src = &a.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if matches!(kind, OpKind::Mean { .. }) {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = a.shape().to_vec();
                shape[*axis] = 1;
                Array::new(shape, out)?
            }
            OpKind::SumAll => {
                expect(1)?;
                Array::scalar(self.value(inputs[0]).data().iter().sum())
            }
            OpKind::Embedding { ids, padding } => {
                expect(1)?;
                let t = self.value(inputs[0]);
                if t.rank() != 2 {
                    return Err(DiffError::Invalid { op, msg: format!("table must be rank 2, got {:?}", t.shape()) });
                }
                if ids.is_empty() {
                    return Err(DiffError::Invalid { op, msg: "no ids to look up".into() });
                }
                let (vocab, dim) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; ids.len() * dim];
                for (r, &id) in ids.iter().enumerate() {
                    if id >= vocab {
                        return Err(DiffError::Invalid { op, msg: format!("id {id} outside vocabulary of {vocab}") });
                    }
                    if Some(id) != *padding {
                        out[r * dim..(r + 1) * dim].copy_from_slice(t.row_slice(id));
                    }
                }
                Array::new(vec![ids.len(), dim], out)?
            }
            OpKind::Dropout { rate } => {
                expect(1)?;
                if !(0.0..1.0).contains(rate) {
                    return Err(DiffError::Invalid { op, msg: format!("rate must lie in [0, 1), got {rate}") });
                }
                let a = self.value(inputs[0]).clone();
                if !self.train || *rate == 0.0 {
                    return Ok((a, Vec::new()));
                }
                let keep = 1.0 - rate;
                let mask: Vec<f64> =
                    (0..a.len()).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let out = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                return Ok((Array::new(a.shape().to_vec(), out)?, mask));
            }
            OpKind::L2Normalize => {
                expect(1)?;
                let a = self.value(inputs[0]);
                let w = *a.shape().last().unwrap();
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(w) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        row.iter_mut().for_each(|v| *v /= norm);
                    }
                }
                Array::new(a.shape().to_vec(), out)?
            }
            OpKind::GradReverse { lambda } => {
                expect(1)?;
                if !(*lambda >= 0.0) {
                    return Err(DiffError::Invalid { op, msg: format!("lambda must be non-negative, got {lambda}") });
                }
                self.value(inputs[0]).clone()
            }
            OpKind::SoftmaxCrossEntropy { targets, weights } => {
                expect(1)?;
                let a = self.value(inputs[0]);
                if a.rank() != 2 || targets.len() != a.shape()[0] || weights.len() != a.shape()[0] {
                    return Err(DiffError::Invalid {
                        op,
                        msg: format!(
                            "logits {:?} with {} targets and {} weights",
                            a.shape(),
                            targets.len(),
                            weights.len()
                        ),
                    });
                }
                let k = a.shape()[1];
                let mut total = 0.0;
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    if t >= k {
                        return Err(DiffError::Invalid { op, msg: format!("target {t} outside {k} classes") });
                    }
                    let row = a.row_slice(r);
                    total += w * (log_sum_exp(row) - row[t]);
                }
                Array::scalar(total)
            }
            OpKind::BinaryCrossEntropy { targets } => {
                expect(1)?;
                let a = self.value(inputs[0]);
                if targets.len() != a.len() {
                    return Err(DiffError::Invalid {
                        op,
                        msg: format!("{} targets for shape {:?}", targets.len(), a.shape()),
                    });
                }
                Array::scalar(a.data().iter().zip(targets).map(|(&p, &y)| bce(p, y)).sum())
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse sweep from a scalar `root`. Gradients of earlier sweeps are cleared first.
    pub fn backward(&mut self, root: NodeId) -> Result<(), DiffError> {
        let rs = self.value(root).shape();
        if rs.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarRoot(rs.to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else { continue };
            let Source::Op(kind) = &node.source else { continue };
            backprop(kind, node, g, before);
        }
        Ok(())
    }

    /// Adds the gradients held by parameter leaves into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (idx, node) in self.param_nodes.iter().enumerate() {
            let Some(n) = node else { continue };
            if let Some(g) = &self.nodes[n.0].grad {
                store.accumulate_grad(ParamId(idx), g);
            }
        }
    }
}

fn grad_slot(nodes: &mut [Node], id: NodeId) -> &mut Vec<f64> {
    let n = &mut nodes[id.0];
    let len = n.value.len();
    n.grad.get_or_insert_with(|| vec![0.0; len])
}

fn backprop(kind: &OpKind, node: &Node, g: &[f64], nodes: &mut [Node]) {
    let ins = &node.inputs;
    let y = node.value.data();
    match kind {
        OpKind::MatMul => {
            let (m, k) = (nodes[ins[0].0].value.shape()[0], nodes[ins[0].0].value.shape()[1]);
            let n = nodes[ins[1].0].value.shape()[1];
            let b = nodes[ins[1].0].value.data().to_vec();
            let a = nodes[ins[0].0].value.data().to_vec();
            // dA += dC · Bᵀ
            gemm(m, n, k, g, (n, 1), &b, (1, n), grad_slot(nodes, ins[0]), 1.0);
            // dB += Aᵀ · dC
            gemm(k, m, n, &a, (1, k), g, (n, 1), grad_slot(nodes, ins[1]), 1.0);
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (&nodes[ins[0].0].value, &nodes[ins[1].0].value);
            let bc = Broadcast::new("backward", a, b).expect("shapes checked in forward");
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            match kind {
                OpKind::Add => bc.for_each(|o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] += g[o];
                }),
                OpKind::Sub => bc.for_each(|o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] -= g[o];
                }),
                _ => bc.for_each(|o, ia, ib| {
                    ga[ia] += g[o] * b.data()[ib];
                    gb[ib] += g[o] * a.data()[ia];
                }),
            }
            add_into(grad_slot(nodes, ins[0]), &ga);
            add_into(grad_slot(nodes, ins[1]), &gb);
        }
        OpKind::Scale(c) => {
            let slot = grad_slot(nodes, ins[0]);
            slot.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
        }
        OpKind::Concat { axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let total = node.value.shape()[*axis];
            let mut offset = 0;
            for &i in ins {
                let len = nodes[i.0].value.shape()[*axis];
                let slot = grad_slot(nodes, i);
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                    add_into(&mut slot[o * len * inner..(o + 1) * len * inner], src);
                }
                offset += len;
            }
        }
        OpKind::Slice { axis, start, len } => {
            let shape = nodes[ins[0].0].value.shape().to_vec();
            let (outer, n, inner) = split_axis(&shape, *axis);
            let slot = grad_slot(nodes, ins[0]);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                add_into(&mut slot[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
            }
        }
        OpKind::Reshape(_) | OpKind::Dropout { .. } if node.aux.is_empty() => {
            add_into(grad_slot(nodes, ins[0]), g);
        }
        OpKind::Dropout { .. } => {
            let slot = grad_slot(nodes, ins[0]);
            for ((s, g), m) in slot.iter_mut().zip(g).zip(&node.aux) {
                *s += g * m;
            }
        }
        OpKind::Reshape(_) => unreachable!(),
        OpKind::Tanh => {
            let slot = grad_slot(nodes, ins[0]);
            for ((s, g), y) in slot.iter_mut().zip(g).zip(y) {
                *s += g * (1.0 - y * y);
            }
        }
        OpKind::Sigmoid => {
            let slot = grad_slot(nodes, ins[0]);
            for ((s, g), y) in slot.iter_mut().zip(g).zip(y) {
                *s += g * y * (1.0 - y);
            }
        }
        OpKind::Softmax { axis, .. } => {
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            let slot = grad_slot(nodes, ins[0]);
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + j;
                    let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..n {
                        slot[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
        }
        OpKind::Mean { axis } | OpKind::Sum { axis } => {
            let shape = nodes[ins[0].0].value.shape().to_vec();
            let (outer, n, inner) = split_axis(&shape, *axis);
            let c = if matches!(kind, OpKind::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
            let slot = grad_slot(nodes, ins[0]);
            for o in 0..outer {
                for i in 0..n {
                    let dst = &mut slot[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d += c * s;
                    }
                }
            }
        }
        OpKind::SumAll => {
            let slot = grad_slot(nodes, ins[0]);
            slot.iter_mut().for_each(|s| *s += g[0]);
        }
        OpKind::Embedding { ids, padding } => {
            let dim = nodes[ins[0].0].value.shape()[1];
            let slot = grad_slot(nodes, ins[0]);
            for (r, &id) in ids.iter().enumerate() {
                if Some(id) != *padding {
                    add_into(&mut slot[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
        }
        OpKind::L2Normalize => {
            let x = nodes[ins[0].0].value.data().to_vec();
            let w = *node.value.shape().last().unwrap();
            let slot = grad_slot(nodes, ins[0]);
            for r in 0..x.len() / w {
                let rg = r * w..(r + 1) * w;
                let norm = x[rg.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                let dot: f64 = y[rg.clone()].iter().zip(&g[rg.clone()]).map(|(a, b)| a * b).sum();
                for i in rg {
                    slot[i] += (g[i] - y[i] * dot) / norm;
                }
            }
        }
        OpKind::GradReverse { lambda } => {
            let slot = grad_slot(nodes, ins[0]);
            slot.iter_mut().zip(g).for_each(|(s, g)| *s += -lambda * g);
        }
        OpKind::SoftmaxCrossEntropy { targets, weights } => {
            let logits = nodes[ins[0].0].value.clone();
            let k = logits.shape()[1];
            let slot = grad_slot(nodes, ins[0]);
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let row = logits.row_slice(r);
                let lse = log_sum_exp(row);
                for c in 0..k {
                    let p = (row[c] - lse).exp();
                    let onehot = if c == t { 1.0 } else { 0.0 };
                    slot[r * k + c] += g[0] * w * (p - onehot);
                }
            }
        }
        OpKind::BinaryCrossEntropy { targets } => {
            let p = nodes[ins[0].0].value.data().to_vec();
            let slot = grad_slot(nodes, ins[0]);
            for ((s, &p), &t) in slot.iter_mut().zip(&p).zip(targets) {
                if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                    *s += g[0] * (-t / p + (1.0 - t) / (1.0 - p));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one prediction with the standard probability clamp.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> DiffError {
    DiffError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), DiffError> {
    if axis >= shape.len() {
        return Err(DiffError::Invalid { op, msg: format!("axis {axis} out of range for shape {shape:?}") });
    }
    Ok(())
}

/// `(product of extents before axis, extent of axis, product after axis)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = beta * c + a · b` for row-major buffers described by (row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the bounds above cover every element addressed through the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-rank broadcasting where each extent either matches or is 1.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(op: &'static str, a: &Array, b: &Array) -> Result<Self, DiffError> {
        if a.rank() != b.rank() {
            return Err(mismatch(op, a, b));
        }
        if a.shape() == b.shape() {
            return Ok(Self { out_shape: a.shape().to_vec(), a_strides: vec![], b_strides: vec![], same: true });
        }
        let mut out_shape = Vec::with_capacity(a.rank());
        for (&x, &y) in a.shape().iter().zip(b.shape()) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch(op, a, b));
            }
            out_shape.push(x.max(y));
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; s.len()];
            let mut acc = 1;
            for d in (0..s.len()).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        Ok(Self { a_strides: strides(a.shape()), b_strides: strides(b.shape()), out_shape, same: false })
    }

    fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.len();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}
