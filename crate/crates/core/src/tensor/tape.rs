//! Define-by-run computation tape.
//!
//! A [`Tape`] records every executed operation in topological order (a node
//! is pushed only after its inputs exist), so replaying adjoints in reverse
//! creation order yields gradients for all leaves. The tape is rebuilt for
//! each forward pass and confined to one thread.

use rand::Rng;

use crate::params::{ParamId, ParameterStore};

use super::{numel_of, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// `a + bias` with a rank-1 bias broadcast over the last axis.
    AddBias { a: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// `a - v` with a rank-1 vector broadcast over the last axis.
    SubVec { a: NodeId, v: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Row-wise multiplication by a constant factor per row (rank 2 only).
    ScaleRows { a: NodeId, factors: Vec<f64> },
    Power { a: NodeId, k: u32 },
    Relu { a: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    Elu { a: NodeId, alpha: f64 },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LogSoftmax { a: NodeId, axis: usize },
    /// Inverted dropout; `keep` holds 0.0 or 1/(1-p) per element.
    Dropout { a: NodeId, keep: Vec<f64> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    /// Column means of a rank-2 matrix: [n, d] -> [d].
    MeanAxis0 { a: NodeId },
    FrobeniusSq { a: NodeId },
    L2Norm { a: NodeId },
    /// Rows scaled to unit l2 norm; rows with norm <= EPS_ROW_NORM pass
    /// through as zero. `norms` caches the forward row norms.
    NormalizeRows { a: NodeId, norms: Vec<f64> },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    SliceLast { a: NodeId, start: usize, len: usize },
}

const EPS_ROW_NORM: f64 = 1e-12;

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape for one forward (and optional backward) pass.
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
    bindings: Vec<(ParamId, NodeId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), adjoints: Vec::new(), bindings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(numel_of(&shape), values.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, values, op, needs_grad });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn values_f32(&self, id: NodeId) -> Vec<f32> {
        self.nodes[id.0].values.iter().map(|&v| v as f32).collect()
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Adjoint of a node populated by the most recent [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.adjoints.get(id.0).and_then(|g| g.as_deref())
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, shape: Vec<usize>, data: &[f32]) -> Result<NodeId, TensorError> {
        if numel_of(&shape) != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        let values = data.iter().map(|&v| v as f64).collect();
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn constant_f64(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<NodeId, TensorError> {
        if numel_of(&shape) != values.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: values.len() });
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    /// Places a tensor on the tape as a leaf. Gradient participation follows
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        let values = tensor.data().iter().map(|&v| v as f64).collect();
        self.push(tensor.shape().to_vec(), values, Op::Leaf, tensor.requires_grad())
    }

    /// Places a registered parameter on the tape and records the binding so
    /// [`Tape::accumulate_grads`] can write its gradient back.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        let node = self.leaf(store.tensor(id));
        self.bindings.push((id, node));
        node
    }

    // ── elementwise and broadcast arithmetic ────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.add_like("add", a, b, 1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.add_like("sub", a, b, -1.0)
    }

    fn add_like(&mut self, opname: &'static str, a: NodeId, b: NodeId, sign: f64) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        let needs = self.needs(a) || self.needs(b);
        if sa == sb {
            let values = self
                .node(a)
                .values
                .iter()
                .zip(&self.node(b).values)
                .map(|(x, y)| x + sign * y)
                .collect();
            let op = if sign > 0.0 { Op::Add { a, b } } else { Op::Sub { a, b } };
            return Ok(self.push(sa, values, op, needs));
        }
        // Rank-1 broadcast over the last axis: [.., n] op [n].
        if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            let n = sb[0];
            let av = &self.node(a).values;
            let bv = &self.node(b).values;
            let values = av.iter().enumerate().map(|(i, x)| x + sign * bv[i % n]).collect();
            let op = if sign > 0.0 { Op::AddBias { a, bias: b } } else { Op::SubVec { a, v: b } };
            return Ok(self.push(sa, values, op, needs));
        }
        Err(TensorError::ShapeMismatch { op: opname, lhs: sa, rhs: sb })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let needs = self.needs(a) || self.needs(b);
        let values = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa, values, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.node(a).shape.clone();
        let needs = self.needs(a);
        let values = self.node(a).values.iter().map(|x| c * x).collect();
        self.push(shape, values, Op::Scale { a, c }, needs)
    }

    /// Multiplies each row of a rank-2 node by a constant factor. Used for
    /// masked recurrence; no gradient flows into the factors.
    pub fn scale_rows(&mut self, a: NodeId, factors: &[f64]) -> Result<NodeId, TensorError> {
        let shape = self.node(a).shape.clone();
        if shape.len() != 2 || shape[0] != factors.len() {
            return Err(TensorError::BadOperand {
                op: "scale_rows",
                shape,
                expected: format!("rank-2 with {} rows", factors.len()),
            });
        }
        let cols = shape[1];
        let needs = self.needs(a);
        let values = self
            .node(a)
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x * factors[i / cols])
            .collect();
        Ok(self.push(shape, values, Op::ScaleRows { a, factors: factors.to_vec() }, needs))
    }

    pub fn power(&mut self, a: NodeId, k: u32) -> Result<NodeId, TensorError> {
        if k == 0 {
            return Err(TensorError::BadOperand {
                op: "power",
                shape: self.node(a).shape.clone(),
                expected: "exponent >= 1".into(),
            });
        }
        let shape = self.node(a).shape.clone();
        let needs = self.needs(a);
        let values = self.node(a).values.iter().map(|x| x.powi(k as i32)).collect();
        Ok(self.push(shape, values, Op::Power { a, k }, needs))
    }

    // ── matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let needs = self.needs(a) || self.needs(b);
        let values = matmul_raw(&self.node(a).values, &self.node(b).values, m, k, n);
        Ok(self.push(vec![m, n], values, Op::Matmul { a, b }, needs))
    }

    /// Batched matrix product: [b, m, k] x [b, k, n] -> [b, m, n].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let needs = self.needs(a) || self.needs(b);
        let mut values = vec![0.0; batch * m * n];
        for i in 0..batch {
            let block = matmul_raw(
                &self.node(a).values[i * m * k..(i + 1) * m * k],
                &self.node(b).values[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            values[i * m * n..(i + 1) * m * n].copy_from_slice(&block);
        }
        Ok(self.push(vec![batch, m, n], values, Op::Bmm { a, b }, needs))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 node.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.node(a).shape.clone();
        let (batch, m, n) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => {
                return Err(TensorError::BadOperand {
                    op: "transpose",
                    shape: sa,
                    expected: "rank 2 or 3".into(),
                })
            }
        };
        let needs = self.needs(a);
        let values = transpose_raw(&self.node(a).values, batch, m, n);
        let shape = if sa.len() == 2 { vec![n, m] } else { vec![batch, n, m] };
        Ok(self.push(shape, values, Op::Transpose { a }, needs))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let len = self.node(a).values.len();
        if numel_of(&new_shape) != len {
            return Err(TensorError::ShapeDataMismatch { shape: new_shape, len });
        }
        let needs = self.needs(a);
        let values = self.node(a).values.clone();
        Ok(self.push(new_shape, values, Op::Reshape { a }, needs))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = inputs.first().ok_or(TensorError::BadOperand {
            op: "concat",
            shape: vec![],
            expected: "at least one input".into(),
        })?;
        let base = self.node(*first).shape.clone();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: base.len() });
        }
        let mut extent = 0;
        for &id in inputs {
            let s = self.node(id).shape.clone();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let needs = inputs.iter().any(|&id| self.needs(id));
        let mut values = vec![0.0; numel_of(&shape)];
        let row = extent * inner;
        let mut offset = 0;
        for &id in inputs {
            let e = self.node(id).shape[axis];
            let src = &self.node(id).values;
            for o in 0..outer {
                let dst = o * row + offset * inner;
                values[dst..dst + e * inner].copy_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
            offset += e;
        }
        Ok(self.push(shape, values, Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    /// Slices `len` entries starting at `start` along the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let sa = self.node(a).shape.clone();
        let rank = sa.len();
        if rank == 0 {
            return Err(TensorError::BadOperand { op: "slice_last", shape: sa, expected: "rank >= 1".into() });
        }
        let width = sa[rank - 1];
        if start + len > width {
            return Err(TensorError::BadOperand {
                op: "slice_last",
                shape: sa,
                expected: format!("slice {start}..{} within last axis", start + len),
            });
        }
        let outer: usize = sa[..rank - 1].iter().product();
        let needs = self.needs(a);
        let mut values = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let base = o * width + start;
            values.extend_from_slice(&self.node(a).values[base..base + len]);
        }
        let mut shape = sa;
        shape[rank - 1] = len;
        Ok(self.push(shape, values, Op::SliceLast { a, start, len }, needs))
    }

    // ── activations ─────────────────────────────────────────────────────

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, Op::LeakyRelu { a, slope }, |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn elu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.unary(a, Op::Elu { a, alpha }, |x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh { a }, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid { a }, |x| 1.0 / (1.0 + (-x).exp()))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let shape = self.node(a).shape.clone();
        let needs = self.needs(a);
        let values = self.node(a).values.iter().map(|&x| f(x)).collect();
        self.push(shape, values, op, needs)
    }

    /// Numerically stabilized softmax along `axis`; every slice along the
    /// axis is non-negative and sums to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.softmax_like(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.softmax_like(a, axis, true)
    }

    fn softmax_like(&mut self, a: NodeId, axis: usize, log: bool) -> Result<NodeId, TensorError> {
        let shape = self.node(a).shape.clone();
        let opname: &'static str = if log { "log_softmax" } else { "softmax" };
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op: opname, axis, rank: shape.len() });
        }
        if !self.node(a).values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: opname });
        }
        let needs = self.needs(a);
        let (outer, extent, inner) = lane_dims(&shape, axis);
        let src = &self.node(a).values;
        let mut values = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for e in 0..extent {
                    max = max.max(src[idx(e)]);
                }
                let mut denom = 0.0;
                for e in 0..extent {
                    denom += (src[idx(e)] - max).exp();
                }
                if log {
                    let log_denom = denom.ln();
                    for e in 0..extent {
                        values[idx(e)] = src[idx(e)] - max - log_denom;
                    }
                } else {
                    for e in 0..extent {
                        values[idx(e)] = (src[idx(e)] - max).exp() / denom;
                    }
                }
            }
        }
        let op = if log { Op::LogSoftmax { a, axis } } else { Op::Softmax { a, axis } };
        Ok(self.push(shape, values, op, needs))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by 1/(1-p). Callers skip this op entirely in eval mode.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl Rng) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadOperand {
                op: "dropout",
                shape: self.node(a).shape.clone(),
                expected: "probability in [0, 1)".into(),
            });
        }
        let shape = self.node(a).shape.clone();
        let needs = self.needs(a);
        let inv = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.node(a).values.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { inv })
            .collect();
        let values = self.node(a).values.iter().zip(&keep).map(|(x, k)| x * k).collect();
        Ok(self.push(shape, values, Op::Dropout { a, keep }, needs))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let needs = self.needs(a);
        let total: f64 = self.node(a).values.iter().sum();
        self.push(vec![], vec![total], Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let needs = self.needs(a);
        let n = self.node(a).values.len() as f64;
        let total: f64 = self.node(a).values.iter().sum();
        self.push(vec![], vec![total / n], Op::Mean { a }, needs)
    }

    /// Column means of a rank-2 matrix: [n, d] -> [d].
    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.node(a).shape.clone();
        if sa.len() != 2 {
            return Err(TensorError::BadOperand { op: "mean_axis0", shape: sa, expected: "rank 2".into() });
        }
        let (n, d) = (sa[0], sa[1]);
        let needs = self.needs(a);
        let src = &self.node(a).values;
        let mut values = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                values[j] += src[i * d + j];
            }
        }
        for v in &mut values {
            *v /= n as f64;
        }
        Ok(self.push(vec![d], values, Op::MeanAxis0 { a }, needs))
    }

    /// Sum of squared entries (squared Frobenius norm for matrices).
    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        let needs = self.needs(a);
        let total: f64 = self.node(a).values.iter().map(|x| x * x).sum();
        self.push(vec![], vec![total], Op::FrobeniusSq { a }, needs)
    }

    /// Euclidean norm of all entries; subgradient 0 at the origin.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let needs = self.needs(a);
        let total: f64 = self.node(a).values.iter().map(|x| x * x).sum();
        self.push(vec![], vec![total.sqrt()], Op::L2Norm { a }, needs)
    }

    /// Scales each row of a rank-2 matrix to unit l2 norm; zero rows stay
    /// zero (with zero gradient).
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.node(a).shape.clone();
        if sa.len() != 2 {
            return Err(TensorError::BadOperand { op: "normalize_rows", shape: sa, expected: "rank 2".into() });
        }
        let (n, d) = (sa[0], sa[1]);
        let needs = self.needs(a);
        let src = &self.node(a).values;
        let mut norms = vec![0.0; n];
        let mut values = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm > EPS_ROW_NORM {
                for j in 0..d {
                    values[i * d + j] = row[j] / norm;
                }
            }
        }
        Ok(self.push(sa, values, Op::NormalizeRows { a, norms }, needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagates adjoints from a scalar loss to every leaf that requires
    /// gradients. Adjoints from a previous call on this tape are replaced.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(loss.0));
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.shape.is_empty() {
            return Err(TensorError::NonScalarLoss { shape: loss_node.shape.clone() });
        }
        self.adjoints = vec![None; self.nodes.len()];
        self.adjoints[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.adjoints[idx].take() else { continue };
            self.propagate(idx, &g);
            self.adjoints[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.adjoints[id.0];
        match slot {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_indexed(&mut self, id: NodeId, f: impl Fn(usize) -> f64) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let len = self.nodes[id.0].values.len();
        let slot = &mut self.adjoints[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        let buf = slot.as_mut().unwrap();
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(i);
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, g);
                self.accumulate_indexed(b, |i| -g[i]);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(a, g);
                let n = self.nodes[bias.0].values.len();
                let mut gb = vec![0.0; n];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % n] += gi;
                }
                self.accumulate(bias, &gb);
            }
            Op::SubVec { a, v } => {
                self.accumulate(a, g);
                let n = self.nodes[v.0].values.len();
                let mut gv = vec![0.0; n];
                for (i, &gi) in g.iter().enumerate() {
                    gv[i % n] -= gi;
                }
                self.accumulate(v, &gv);
            }
            Op::Mul { a, b } => {
                let bv: Vec<f64> = self.nodes[b.0].values.clone();
                let av: Vec<f64> = self.nodes[a.0].values.clone();
                self.accumulate_indexed(a, |i| g[i] * bv[i]);
                self.accumulate_indexed(b, |i| g[i] * av[i]);
            }
            Op::Scale { a, c } => {
                self.accumulate_indexed(a, |i| c * g[i]);
            }
            Op::ScaleRows { a, factors } => {
                let cols = self.nodes[a.0].shape[1];
                self.accumulate_indexed(a, |i| g[i] * factors[i / cols]);
            }
            Op::Power { a, k } => {
                let av = self.nodes[a.0].values.clone();
                let kf = k as f64;
                self.accumulate_indexed(a, |i| g[i] * kf * av[i].powi(k as i32 - 1));
            }
            Op::Relu { a } => {
                let av = self.nodes[a.0].values.clone();
                self.accumulate_indexed(a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::LeakyRelu { a, slope } => {
                let av = self.nodes[a.0].values.clone();
                self.accumulate_indexed(a, |i| if av[i] > 0.0 { g[i] } else { slope * g[i] });
            }
            Op::Elu { a, alpha } => {
                let av = self.nodes[a.0].values.clone();
                let yv = self.nodes[idx].values.clone();
                self.accumulate_indexed(a, |i| if av[i] > 0.0 { g[i] } else { g[i] * (yv[i] + alpha) });
            }
            Op::Tanh { a } => {
                let yv = self.nodes[idx].values.clone();
                self.accumulate_indexed(a, |i| g[i] * (1.0 - yv[i] * yv[i]));
            }
            Op::Sigmoid { a } => {
                let yv = self.nodes[idx].values.clone();
                self.accumulate_indexed(a, |i| g[i] * yv[i] * (1.0 - yv[i]));
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[idx].values.clone();
                let shape = self.nodes[idx].shape.clone();
                let (outer, extent, inner) = lane_dims(&shape, axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx_at = |e: usize| (o * extent + e) * inner + i;
                        let mut dot = 0.0;
                        for e in 0..extent {
                            dot += g[idx_at(e)] * y[idx_at(e)];
                        }
                        for e in 0..extent {
                            let p = idx_at(e);
                            da[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LogSoftmax { a, axis } => {
                let y = self.nodes[idx].values.clone();
                let shape = self.nodes[idx].shape.clone();
                let (outer, extent, inner) = lane_dims(&shape, axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx_at = |e: usize| (o * extent + e) * inner + i;
                        let mut gsum = 0.0;
                        for e in 0..extent {
                            gsum += g[idx_at(e)];
                        }
                        for e in 0..extent {
                            let p = idx_at(e);
                            da[p] = g[p] - y[p].exp() * gsum;
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Dropout { a, keep } => {
                self.accumulate_indexed(a, |i| g[i] * keep[i]);
            }
            Op::Sum { a } => {
                let s = g[0];
                self.accumulate_indexed(a, |_| s);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].values.len() as f64;
                let s = g[0] / n;
                self.accumulate_indexed(a, |_| s);
            }
            Op::MeanAxis0 { a } => {
                let sa = self.nodes[a.0].shape.clone();
                let (n, d) = (sa[0] as f64, sa[1]);
                self.accumulate_indexed(a, |i| g[i % d] / n);
            }
            Op::FrobeniusSq { a } => {
                let av = self.nodes[a.0].values.clone();
                let s = g[0];
                self.accumulate_indexed(a, |i| 2.0 * av[i] * s);
            }
            Op::L2Norm { a } => {
                let norm = self.nodes[idx].values[0];
                if norm > EPS_ROW_NORM {
                    let av = self.nodes[a.0].values.clone();
                    let s = g[0] / norm;
                    self.accumulate_indexed(a, |i| av[i] * s);
                }
            }
            Op::NormalizeRows { a, norms } => {
                let y = self.nodes[idx].values.clone();
                let d = self.nodes[idx].shape[1];
                let n = norms.len();
                let mut da = vec![0.0; y.len()];
                for i in 0..n {
                    if norms[i] <= EPS_ROW_NORM {
                        continue;
                    }
                    let row = i * d..(i + 1) * d;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..d {
                        let p = i * d + j;
                        da[p] = (g[p] - y[p] * dot) / norms[i];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Matmul { a, b } => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    // dA = g . B^T
                    let bt = transpose_raw(&self.nodes[b.0].values, 1, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T . g
                    let at = transpose_raw(&self.nodes[a.0].values, 1, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let bt = transpose_raw(&self.nodes[b.0].values[i * k * n..(i + 1) * k * n], 1, k, n);
                        let block = matmul_raw(&g[i * m * n..(i + 1) * m * n], &bt, m, n, k);
                        da[i * m * k..(i + 1) * m * k].copy_from_slice(&block);
                    }
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let at = transpose_raw(&self.nodes[a.0].values[i * m * k..(i + 1) * m * k], 1, m, k);
                        let block = matmul_raw(&at, &g[i * m * n..(i + 1) * m * n], k, m, n);
                        db[i * k * n..(i + 1) * k * n].copy_from_slice(&block);
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose { a } => {
                let shape = self.nodes[idx].shape.clone();
                let (batch, m, n) = match shape.len() {
                    2 => (1, shape[0], shape[1]),
                    _ => (shape[0], shape[1], shape[2]),
                };
                let da = transpose_raw(g, batch, m, n);
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate(a, g);
            }
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[idx].shape.clone();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let extent = shape[axis];
                let row = extent * inner;
                let mut offset = 0;
                for id in inputs {
                    let e = self.nodes[id.0].shape[axis];
                    let mut di = vec![0.0; outer * e * inner];
                    for o in 0..outer {
                        let src = o * row + offset * inner;
                        di[o * e * inner..(o + 1) * e * inner].copy_from_slice(&g[src..src + e * inner]);
                    }
                    self.accumulate(id, &di);
                    offset += e;
                }
            }
            Op::SliceLast { a, start, len } => {
                let sa = self.nodes[a.0].shape.clone();
                let width = sa[sa.len() - 1];
                let outer: usize = sa[..sa.len() - 1].iter().product();
                let mut da = vec![0.0; outer * width];
                for o in 0..outer {
                    for j in 0..len {
                        da[o * width + start + j] = g[o * len + j];
                    }
                }
                self.accumulate(a, &da);
            }
        }
    }

    /// Writes the adjoint of every bound parameter into its tensor's
    /// gradient buffer (adding to whatever is already there).
    pub fn accumulate_grads(&self, store: &mut ParameterStore) {
        for &(pid, node) in &self.bindings {
            if let Some(g) = self.grad(node) {
                store.tensor_mut(pid).accumulate_grad(g);
            }
        }
    }

    /// Parameter bindings recorded by [`Tape::param`], with adjoints if
    /// backward has run. Adjoints are f64 for oracle comparisons.
    pub fn param_grads(&self) -> Vec<(ParamId, Option<&[f64]>)> {
        self.bindings.iter().map(|&(pid, node)| (pid, self.grad(node))).collect()
    }
}

/// Decomposes a shape around `axis` into (outer, extent, inner) strides.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(src: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = src[b * m * n + i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap().with_requires_grad()
    }

    #[test]
    fn matmul_small_case() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(vec![2, 1], &[1.0, 1.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.values(c), &[3.0, 7.0]);
        assert_eq!(t.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], &[0.0; 6]).unwrap();
        let b = t.constant(vec![2, 2], &[0.0; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 2] }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn frobenius_sq_of_identity() {
        let mut t = Tape::new();
        let eye = t.constant(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = t.frobenius_sq(eye);
        assert_eq!(t.value_scalar(f), 2.0);
    }

    #[test]
    fn mean_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let oracle: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / 12.0;
        let mut t = Tape::new();
        let a = t.constant(vec![3, 4], &data).unwrap();
        let m = t.mean(a);
        assert!((t.value_scalar(m) - oracle).abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t = Tape::new();
        let a = t.constant(vec![3], &[0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax(a, 0).unwrap();
        for &v in t.values(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_stable_under_large_logits() {
        let mut t = Tape::new();
        let a = t.constant(vec![2], &[1000.0, 1000.0]).unwrap();
        let s = t.softmax(a, 0).unwrap();
        assert_eq!(t.values(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let mut t = Tape::new();
        let a = t.constant(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax(a, 0).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (v, x) in t.values(s).iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((v - x.exp() / denom).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tape::new();
        let a = t.constant(vec![2], &[f32::NAN, 0.0]).unwrap();
        assert_eq!(t.softmax(a, 0).unwrap_err(), TensorError::NonFinite { op: "softmax" });
    }

    #[test]
    fn backward_linear_grad_is_input() {
        let x = Tensor::from_vec(vec![3], vec![2.0, -1.0, 0.5]).unwrap();
        let w = tensor(vec![3], vec![0.1, 0.2, 0.3]);
        let mut t = Tape::new();
        let xn = t.leaf(&x);
        let wn = t.leaf(&w);
        let prod = t.mul(wn, xn).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(wn).unwrap(), &[2.0, -1.0, 0.5]);
        assert!(t.grad(xn).is_none());
    }

    #[test]
    fn backward_sigmoid_product_rule_at_origin() {
        // d/dw [sigmoid(w) * w] at w=0 is sigma(0) + 0 * sigma'(0) = 0.5
        let w = tensor(vec![], vec![0.0]);
        let mut t = Tape::new();
        let wn = t.leaf(&w);
        let s = t.sigmoid(wn);
        let loss = t.mul(s, wn).unwrap();
        t.backward(loss).unwrap();
        assert!((t.grad(wn).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let w = tensor(vec![2], vec![1.0, 2.0]);
        let mut t = Tape::new();
        let wn = t.leaf(&w);
        let err = t.backward(wn).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_three_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = Tensor::uniform(vec![4, 5], 0.5, &mut rng).with_requires_grad();
        let w2 = Tensor::uniform(vec![5, 3], 0.5, &mut rng).with_requires_grad();
        let w3 = Tensor::uniform(vec![3, 1], 0.5, &mut rng).with_requires_grad();
        let x = Tensor::uniform(vec![2, 4], 1.0, &mut rng);

        let eval = |w1: &Tensor, w2: &Tensor, w3: &Tensor| -> (Tape, NodeId) {
            let mut t = Tape::new();
            let xn = t.leaf(&x);
            let a = t.leaf(w1);
            let b = t.leaf(w2);
            let c = t.leaf(w3);
            let h1 = t.matmul(xn, a).unwrap();
            let h1 = t.tanh(h1);
            let h2 = t.matmul(h1, b).unwrap();
            let h2 = t.sigmoid(h2);
            let out = t.matmul(h2, c).unwrap();
            let loss = t.mean(out);
            (t, loss)
        };

        let (mut tape, loss) = eval(&w1, &w2, &w3);
        tape.backward(loss).unwrap();
        let leaf_w1 = NodeId(1);
        let grads = tape.grad(leaf_w1).unwrap().to_vec();

        let step = 1e-3f64;
        for i in 0..w1.numel() {
            let orig = w1.data()[i];
            let mut plus = w1.clone();
            plus.data_mut()[i] = (orig as f64 + step) as f32;
            let mut minus = w1.clone();
            minus.data_mut()[i] = (orig as f64 - step) as f32;
            let (tp, lp) = eval(&plus, &w2, &w3);
            let (tm, lm) = eval(&minus, &w2, &w3);
            let denom = plus.data()[i] as f64 - minus.data()[i] as f64;
            let fd = (tp.value_scalar(lp) - tm.value_scalar(lm)) / denom;
            let ad = grads[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "i={i} ad={ad} fd={fd} rel={rel}");
        }
    }

    #[test]
    fn repeated_backward_accumulates_into_store() {
        use crate::params::ParameterStore;
        let mut store = ParameterStore::new();
        let w = store
            .register("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad())
            .unwrap();
        let x = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();

        let mut t = Tape::new();
        let wn = t.param(&store, w);
        let xn = t.leaf(&x);
        let p = t.mul(wn, xn).unwrap();
        let loss = t.sum(p);
        t.backward(loss).unwrap();
        t.accumulate_grads(&mut store);
        t.accumulate_grads(&mut store);
        assert_eq!(store.tensor(w).grad().unwrap(), &[6.0, 8.0]);
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.constant(vec![1000], &[1.0; 1000]).unwrap();
        let d = t.dropout(a, 0.5, &mut rng).unwrap();
        let vals = t.values(d);
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        assert!((400..600).contains(&kept), "kept={kept}");
    }

    #[test]
    fn dropout_deterministic_for_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut t = Tape::new();
            let a = t.constant(vec![64], &[1.0; 64]).unwrap();
            let d = t.dropout(a, 0.3, &mut rng).unwrap();
            t.values(d).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(vec![2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 5]);
        assert_eq!(t.values(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = t.slice_last(c, 2, 3).unwrap();
        assert_eq!(t.values(back), t.values(b));
    }

    #[test]
    fn transpose_rank3_swaps_last_axes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2, 3], &(0..12).map(|i| i as f32).collect::<Vec<_>>()).unwrap();
        let tr = t.transpose(a).unwrap();
        assert_eq!(t.shape(tr), &[2, 3, 2]);
        assert_eq!(t.values(tr)[..6], [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn normalize_rows_keeps_zero_rows() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = t.normalize_rows(a).unwrap();
        assert_eq!(t.values(n), &[0.6, 0.8, 0.0, 0.0]);
    }
}
