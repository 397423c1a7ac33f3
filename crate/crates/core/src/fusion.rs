//! Attention fusion over the stacked subspace representations.
//!
//! The six vectors [h^c_l, h^c_v, h^c_a, h^p_l, h^p_v, h^p_a] (fewer for
//! reduced variants) are stacked per example, run through multi-head
//! self-attention with Q = K = V, and concatenated into the joint vector
//! handed to the prediction head. There is no positional encoding,
//! residual path, or layer norm: rows are distinguished by content.

use rand_chacha::ChaCha8Rng;

use crate::config::Modality;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Which subspace a fused row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subspace {
    Shared,
    Private,
}

impl Subspace {
    pub fn key(self) -> &'static str {
        match self {
            Subspace::Shared => "c",
            Subspace::Private => "p",
        }
    }
}

/// Canonical label for one fused row, e.g. `c_l` or `p_a`.
pub fn row_label(subspace: Subspace, modality: Modality) -> String {
    format!("{}_{}", subspace.key(), modality.key())
}

/// Batched stack of subspace vectors with its canonical row labels.
#[derive(Debug, Clone)]
pub struct FusionMatrix {
    /// `[n, rows, d_h]`.
    pub node: NodeId,
    pub labels: Vec<String>,
    pub n: usize,
    pub rows: usize,
    pub d_h: usize,
}

/// Stacks per-modality `[n, d_h]` representations into a batched fusion
/// matrix, preserving the given row order.
pub fn stack_rows(
    tape: &mut Tape,
    rows: &[(String, NodeId)],
    n: usize,
    d_h: usize,
) -> Result<FusionMatrix, TensorError> {
    if rows.is_empty() {
        return Err(TensorError::BadOperand {
            op: "stack_rows",
            shape: vec![],
            expected: "at least one row".into(),
        });
    }
    let mut reshaped = Vec::with_capacity(rows.len());
    for (_, id) in rows {
        reshaped.push(tape.reshape(*id, vec![n, 1, d_h])?);
    }
    let node = tape.concat(&reshaped, 1)?;
    Ok(FusionMatrix {
        node,
        labels: rows.iter().map(|(l, _)| l.clone()).collect(),
        n,
        rows: rows.len(),
        d_h,
    })
}

/// Per-head projection parameters plus the shared output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<AttentionHead>,
    pub w_o: ParamId,
    pub d_h: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionParams {
    /// Registers `n_heads` full `d_h x d_h` projections per query/key/value
    /// role and an `(n_heads * d_h) x d_h` output projection.
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_h: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (d_h as f32).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            let mut reg = |role: &str| {
                store
                    .register(
                        &format!("{prefix}.head{i}.{role}"),
                        Tensor::uniform(vec![d_h, d_h], bound, rng),
                    )
                    .expect("unique parameter name")
            };
            heads.push(AttentionHead { w_q: reg("w_q"), w_k: reg("w_k"), w_v: reg("w_v") });
        }
        let w_o = store
            .register(
                &format!("{prefix}.w_o"),
                Tensor::uniform(vec![n_heads * d_h, d_h], 1.0 / ((n_heads * d_h) as f32).sqrt(), rng),
            )
            .expect("unique parameter name");
        Self { heads, w_o, d_h }
    }
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d_h)) V.
///
/// Accepts `[rows, d_h]` matrices or `[n, rows, d_h]` batches. Returns the
/// attended output and the attention-weight node (same rank as the input,
/// with rows x rows trailing axes); every weight row is a distribution.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let q_shape = tape.shape(q).to_vec();
    let rank2 = q_shape.len() == 2;
    let (q3, k3, v3) = if rank2 {
        let (r, d) = (q_shape[0], q_shape[1]);
        (
            tape.reshape(q, vec![1, r, d])?,
            tape.reshape(k, vec![1, r, d])?,
            tape.reshape(v, vec![1, r, d])?,
        )
    } else {
        (q, k, v)
    };
    let shape = tape.shape(q3).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::BadOperand {
            op: "scaled_dot_attention",
            shape,
            expected: "rank 2 or 3".into(),
        });
    }
    let d_h = shape[2];
    let kt = tape.transpose(k3)?;
    let logits = tape.bmm(q3, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d_h as f64).sqrt());
    let weights = tape.softmax(scaled, 2)?;
    let out = tape.bmm(weights, v3)?;
    if rank2 {
        let (r, d) = (q_shape[0], q_shape[1]);
        let out2 = tape.reshape(out, vec![r, d])?;
        let w2 = tape.reshape(weights, vec![r, r])?;
        Ok((out2, w2))
    } else {
        Ok((out, weights))
    }
}

/// Multi-head self-attention over the fusion matrix with Q = K = V = M.
///
/// Each head projects M with its own query/key/value matrices, the head
/// outputs are concatenated along features and projected back to `d_h`.
/// Also returns the per-head attention-weight nodes `[n, rows, rows]` for
/// export.
pub fn multihead_self_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    m: &FusionMatrix,
    params: &AttentionParams,
) -> Result<(FusionMatrix, Vec<NodeId>), TensorError> {
    let d_h = m.d_h;
    if params.d_h != d_h {
        return Err(TensorError::BadOperand {
            op: "multihead_self_attention",
            shape: vec![params.d_h],
            expected: format!("attention parameters sized for d_h {d_h}"),
        });
    }
    let wo_shape = store.tensor(params.w_o).shape().to_vec();
    if wo_shape != [params.heads.len() * d_h, d_h] {
        return Err(TensorError::ShapeMismatch {
            op: "multihead_self_attention",
            lhs: wo_shape,
            rhs: vec![params.heads.len() * d_h, d_h],
        });
    }

    let flat = tape.reshape(m.node, vec![m.n * m.rows, d_h])?;
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    let mut head_weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let project = |tape: &mut Tape, w: ParamId| -> Result<NodeId, TensorError> {
            let wn = tape.param(store, w);
            let p = tape.matmul(flat, wn)?;
            tape.reshape(p, vec![m.n, m.rows, d_h])
        };
        let q = project(tape, head.w_q)?;
        let k = project(tape, head.w_k)?;
        let v = project(tape, head.w_v)?;
        let (out, weights) = scaled_dot_attention(tape, q, k, v)?;
        head_outputs.push(out);
        head_weights.push(weights);
    }
    let concat = tape.concat(&head_outputs, 2)?;
    let concat_flat = tape.reshape(concat, vec![m.n * m.rows, params.heads.len() * d_h])?;
    let wo = tape.param(store, params.w_o);
    let projected = tape.matmul(concat_flat, wo)?;
    let node = tape.reshape(projected, vec![m.n, m.rows, d_h])?;
    Ok((
        FusionMatrix { node, labels: m.labels.clone(), n: m.n, rows: m.rows, d_h },
        head_weights,
    ))
}

/// Concatenates the attended rows in canonical order into the joint vector
/// `[n, rows * d_h]`. Row-major layout makes this a reshape.
pub fn fuse(tape: &mut Tape, m_bar: &FusionMatrix) -> Result<NodeId, TensorError> {
    tape.reshape(m_bar.node, vec![m_bar.n, m_bar.rows * m_bar.d_h])
}
