//! Utterance encoding and subspace projection.
//!
//! Each modality's sequence runs through a 2-layer bidirectional LSTM whose
//! top-layer end states are projected to the utterance vector u_m. A single
//! shared feed-forward encoder (sigmoid-bounded) produces the invariant
//! vector h^c_m for every modality; per-modality feed-forward encoders
//! produce the specific vectors h^p_m. A shared decoder reconstructs u_m
//! from the summed pair, and a two-layer head maps the fused vector to task
//! outputs.
//!
//! Recurrence is masked: once a row passes its true length, its hidden and
//! cell states freeze, so a padded example encodes bit-identically to the
//! same example alone.

use rand_chacha::ChaCha8Rng;

use crate::config::Activation;
use crate::data::PaddedModality;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Stacked bidirectional depth of the sequence encoder.
pub const LSTM_LAYERS: usize = 2;

/// Train/eval switch; eval skips every dropout draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One LSTM direction: input, recurrent, and bias parameters with gate
/// layout [input, forget, cell, output], each `d_h` wide.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmLayer {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

/// Recurrent utterance encoder parameters for one modality.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub layers: Vec<BiLstmLayer>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

/// Dense projection used when a modality arrives pre-pooled.
#[derive(Debug, Clone, Copy)]
pub struct PooledEncoder {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

/// Single linear layer; the building block of E_c, E_p, and D.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub w: ParamId,
    pub b: ParamId,
}

/// Two-layer prediction head G.
#[derive(Debug, Clone, Copy)]
pub struct PredictionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::uniform(shape, bound, rng)
}

impl LstmDirection {
    fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w_ih = store
            .register(&format!("{prefix}.w_ih"), fan_in_uniform(vec![d_in, 4 * d_h], d_in, rng))
            .expect("unique parameter name");
        let w_hh = store
            .register(&format!("{prefix}.w_hh"), fan_in_uniform(vec![d_h, 4 * d_h], d_h, rng))
            .expect("unique parameter name");
        // Forget-gate bias starts at +1, everything else at 0.
        let mut bias = vec![0.0f32; 4 * d_h];
        bias[d_h..2 * d_h].fill(1.0);
        let bias = store
            .register(&format!("{prefix}.bias"), Tensor::from_vec(vec![4 * d_h], bias).unwrap())
            .expect("unique parameter name");
        Self { w_ih, w_hh, bias }
    }
}

impl SequenceEncoder {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(LSTM_LAYERS);
        for layer in 0..LSTM_LAYERS {
            let input = if layer == 0 { d_in } else { 2 * d_h };
            layers.push(BiLstmLayer {
                fwd: LstmDirection::init(store, &format!("{prefix}.lstm{layer}.fwd"), input, d_h, rng),
                bwd: LstmDirection::init(store, &format!("{prefix}.lstm{layer}.bwd"), input, d_h, rng),
            });
        }
        let proj_w = store
            .register(&format!("{prefix}.proj_w"), fan_in_uniform(vec![2 * d_h, d_h], 2 * d_h, rng))
            .expect("unique parameter name");
        let proj_b = store
            .register(&format!("{prefix}.proj_b"), Tensor::zeros(vec![d_h]))
            .expect("unique parameter name");
        Self { layers, proj_w, proj_b, d_in, d_h }
    }
}

impl PooledEncoder {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store
            .register(&format!("{prefix}.w"), fan_in_uniform(vec![d_in, d_h], d_in, rng))
            .expect("unique parameter name");
        let b = store
            .register(&format!("{prefix}.b"), Tensor::zeros(vec![d_h]))
            .expect("unique parameter name");
        Self { w, b, d_in, d_h }
    }
}

impl FeedForward {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store
            .register(&format!("{prefix}.w"), fan_in_uniform(vec![d_in, d_out], d_in, rng))
            .expect("unique parameter name");
        let b = store
            .register(&format!("{prefix}.b"), Tensor::zeros(vec![d_out]))
            .expect("unique parameter name");
        Self { w, b }
    }

    /// Plain affine map `x W + b`.
    pub fn affine(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

impl PredictionHead {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w1 = store
            .register(&format!("{prefix}.w1"), fan_in_uniform(vec![d_in, d_hidden], d_in, rng))
            .expect("unique parameter name");
        let b1 = store
            .register(&format!("{prefix}.b1"), Tensor::zeros(vec![d_hidden]))
            .expect("unique parameter name");
        let w2 = store
            .register(&format!("{prefix}.w2"), fan_in_uniform(vec![d_hidden, d_out], d_hidden, rng))
            .expect("unique parameter name");
        let b2 = store
            .register(&format!("{prefix}.b2"), Tensor::zeros(vec![d_out]))
            .expect("unique parameter name");
        Self { w1, b1, w2, b2, d_in, d_out }
    }
}

/// Applies the configured dataset non-linearity.
pub fn activate(tape: &mut Tape, x: NodeId, activation: Activation) -> NodeId {
    match activation {
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu => tape.leaky_relu(x, 0.01),
        Activation::Elu => tape.elu(x, 1.0),
        Activation::Tanh => tape.tanh(x),
    }
}

fn maybe_dropout(
    tape: &mut Tape,
    x: NodeId,
    p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    if mode == Mode::Train && p > 0.0 {
        tape.dropout(x, p, rng)
    } else {
        Ok(x)
    }
}

/// Runs one LSTM direction over per-timestep inputs with row masking.
///
/// Returns the hidden state per original timestep index and the final
/// state (the last valid state for the forward direction, the t=0 state
/// for the reversed one).
fn lstm_direction_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    dir: &LstmDirection,
    inputs: &[NodeId],
    masks: &[Vec<f64>],
    n: usize,
    d_h: usize,
    reverse: bool,
) -> Result<(Vec<NodeId>, NodeId), TensorError> {
    let w_ih = tape.param(store, dir.w_ih);
    let w_hh = tape.param(store, dir.w_hh);
    let bias = tape.param(store, dir.bias);

    let mut h = tape.constant_f64(vec![n, d_h], vec![0.0; n * d_h])?;
    let mut c = tape.constant_f64(vec![n, d_h], vec![0.0; n * d_h])?;
    let mut per_step = vec![h; inputs.len()];

    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let x = inputs[t];
        let xw = tape.matmul(x, w_ih)?;
        let hw = tape.matmul(h, w_hh)?;
        let pre = tape.add(xw, hw)?;
        let gates = tape.add(pre, bias)?;
        let i_gate = tape.slice_last(gates, 0, d_h)?;
        let f_gate = tape.slice_last(gates, d_h, d_h)?;
        let g_gate = tape.slice_last(gates, 2 * d_h, d_h)?;
        let o_gate = tape.slice_last(gates, 3 * d_h, d_h)?;
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.sigmoid(f_gate);
        let g_gate = tape.tanh(g_gate);
        let o_gate = tape.sigmoid(o_gate);

        let fc = tape.mul(f_gate, c)?;
        let ig = tape.mul(i_gate, g_gate)?;
        let c_new = tape.add(fc, ig)?;
        let c_tanh = tape.tanh(c_new);
        let h_new = tape.mul(o_gate, c_tanh)?;

        // Freeze rows that are past their true length.
        let mask = &masks[t];
        let inv_mask: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        let c_keep = tape.scale_rows(c, &inv_mask)?;
        let c_take = tape.scale_rows(c_new, mask)?;
        c = tape.add(c_take, c_keep)?;
        let h_keep = tape.scale_rows(h, &inv_mask)?;
        let h_take = tape.scale_rows(h_new, mask)?;
        h = tape.add(h_take, h_keep)?;

        per_step[t] = h;
    }
    Ok((per_step, h))
}

/// Maps a padded modality batch to utterance vectors `[n, d_h]`.
pub fn encode_sequence(
    tape: &mut Tape,
    store: &ParameterStore,
    enc: &SequenceEncoder,
    batch: &PaddedModality,
    activation: Activation,
    dropout: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    if batch.dim != enc.d_in {
        return Err(TensorError::BadOperand {
            op: "encode_sequence",
            shape: vec![batch.lengths.len(), batch.t_max, batch.dim],
            expected: format!("feature dim {}", enc.d_in),
        });
    }
    let n = batch.lengths.len();
    let d_h = enc.d_h;
    let masks: Vec<Vec<f64>> = (0..batch.t_max).map(|t| batch.mask_at(t)).collect();

    let mut inputs: Vec<NodeId> = (0..batch.t_max)
        .map(|t| tape.constant(vec![n, batch.dim], &batch.step_matrix(t)))
        .collect::<Result<_, _>>()?;

    let mut final_fwd = None;
    let mut final_bwd = None;
    for layer in &enc.layers {
        let (steps_f, last_f) =
            lstm_direction_forward(tape, store, &layer.fwd, &inputs, &masks, n, d_h, false)?;
        let (steps_b, last_b) =
            lstm_direction_forward(tape, store, &layer.bwd, &inputs, &masks, n, d_h, true)?;
        inputs = steps_f
            .iter()
            .zip(&steps_b)
            .map(|(&f, &b)| tape.concat(&[f, b], 1))
            .collect::<Result<_, _>>()?;
        final_fwd = Some(last_f);
        final_bwd = Some(last_b);
    }

    let ends = tape.concat(&[final_fwd.unwrap(), final_bwd.unwrap()], 1)?;
    let w = tape.param(store, enc.proj_w);
    let b = tape.param(store, enc.proj_b);
    let proj = tape.matmul(ends, w)?;
    let proj = tape.add(proj, b)?;
    let out = activate(tape, proj, activation);
    maybe_dropout(tape, out, dropout, mode, rng)
}

/// Projects pre-pooled features to utterance vectors. Sequences with more
/// than one timestep are averaged over their true length first.
pub fn encode_pooled(
    tape: &mut Tape,
    store: &ParameterStore,
    enc: &PooledEncoder,
    batch: &PaddedModality,
    activation: Activation,
    dropout: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    if batch.dim != enc.d_in {
        return Err(TensorError::BadOperand {
            op: "encode_pooled",
            shape: vec![batch.lengths.len(), batch.t_max, batch.dim],
            expected: format!("feature dim {}", enc.d_in),
        });
    }
    let n = batch.lengths.len();
    let mut pooled = vec![0.0f32; n * batch.dim];
    for i in 0..n {
        let len = batch.lengths[i].max(1);
        for t in 0..len {
            for (j, &x) in batch.step(i, t).iter().enumerate() {
                pooled[i * batch.dim + j] += x / len as f32;
            }
        }
    }
    let x = tape.constant(vec![n, batch.dim], &pooled)?;
    let w = tape.param(store, enc.w);
    let b = tape.param(store, enc.b);
    let proj = tape.matmul(x, w)?;
    let proj = tape.add(proj, b)?;
    let out = activate(tape, proj, activation);
    maybe_dropout(tape, out, dropout, mode, rng)
}

/// Shared-subspace projection: one sigmoid-squashed linear layer, so every
/// coordinate lies in [0, 1].
pub fn encode_shared(
    tape: &mut Tape,
    store: &ParameterStore,
    shared: &FeedForward,
    u: NodeId,
) -> Result<NodeId, TensorError> {
    let z = shared.affine(tape, store, u)?;
    Ok(tape.sigmoid(z))
}

/// Modality-specific projection: linear layer, dataset activation, dropout.
pub fn encode_private(
    tape: &mut Tape,
    store: &ParameterStore,
    private: &FeedForward,
    u: NodeId,
    activation: Activation,
    dropout: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    let z = private.affine(tape, store, u)?;
    let z = activate(tape, z, activation);
    maybe_dropout(tape, z, dropout, mode, rng)
}

/// Reconstructs the utterance vector from the elementwise sum of the
/// subspace vectors (or from a single subspace when only one exists).
/// The decoder is a plain linear layer shared across modalities.
pub fn decode(
    tape: &mut Tape,
    store: &ParameterStore,
    decoder: &FeedForward,
    shared: Option<NodeId>,
    private: Option<NodeId>,
) -> Result<NodeId, TensorError> {
    let input = match (shared, private) {
        (Some(c), Some(p)) => tape.add(c, p)?,
        (Some(c), None) => c,
        (None, Some(p)) => p,
        (None, None) => {
            return Err(TensorError::BadOperand {
                op: "decode",
                shape: vec![],
                expected: "at least one subspace vector".into(),
            })
        }
    };
    decoder.affine(tape, store, input)
}

/// Maps the fused joint vector to task outputs (a scalar per example for
/// regression, C logits for classification).
pub fn predict(
    tape: &mut Tape,
    store: &ParameterStore,
    head: &PredictionHead,
    joint: NodeId,
    activation: Activation,
    dropout: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    let shape = tape.shape(joint).to_vec();
    if shape.len() != 2 || shape[1] != head.d_in {
        return Err(TensorError::BadOperand {
            op: "predict",
            shape,
            expected: format!("[n, {}] joint vector", head.d_in),
        });
    }
    let w1 = tape.param(store, head.w1);
    let b1 = tape.param(store, head.b1);
    let h = tape.matmul(joint, w1)?;
    let h = tape.add(h, b1)?;
    let h = activate(tape, h, activation);
    let h = maybe_dropout(tape, h, dropout, mode, rng)?;
    let w2 = tape.param(store, head.w2);
    let b2 = tape.param(store, head.b2);
    let out = tape.matmul(h, w2)?;
    tape.add(out, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Activation;
    use rand::{Rng, SeedableRng};

    fn padded(n: usize, t: usize, dim: usize, seed: u64) -> PaddedModality {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        PaddedModality { t_max: t, dim, data, lengths: vec![t; n] }
    }

    fn encoder_fixture(d_in: usize, d_h: usize) -> (ParameterStore, SequenceEncoder) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SequenceEncoder::init(&mut store, "enc.l", d_in, d_h, &mut rng);
        (store, enc)
    }

    #[test]
    fn encode_sequence_output_width_is_d_h() {
        let (store, enc) = encoder_fixture(5, 7);
        let batch = padded(3, 4, 5, 1);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = encode_sequence(
            &mut tape, &store, &enc, &batch, Activation::Tanh, 0.0, Mode::Eval, &mut rng,
        )
        .unwrap();
        assert_eq!(tape.shape(u), &[3, 7]);
    }

    #[test]
    fn single_timestep_sequences_encode() {
        let (store, enc) = encoder_fixture(4, 6);
        let batch = padded(2, 1, 4, 3);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = encode_sequence(
            &mut tape, &store, &enc, &batch, Activation::Relu, 0.0, Mode::Eval, &mut rng,
        )
        .unwrap();
        assert_eq!(tape.shape(u), &[2, 6]);
        assert!(tape.values(u).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, enc) = encoder_fixture(5, 4);
        let batch = padded(2, 3, 5, 4);
        let run = || {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let u = encode_sequence(
                &mut tape, &store, &enc, &batch, Activation::Tanh, 0.5, Mode::Eval, &mut rng,
            )
            .unwrap();
            tape.values(u).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let (store, enc) = encoder_fixture(5, 4);
        let batch = padded(2, 3, 6, 4);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = encode_sequence(
            &mut tape, &store, &enc, &batch, Activation::Tanh, 0.0, Mode::Eval, &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::BadOperand { op: "encode_sequence", .. }));
    }

    #[test]
    fn padding_never_leaks_into_end_states() {
        let (store, enc) = encoder_fixture(3, 5);
        // One example of length 2 inside a batch padded to length 6.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let example: Vec<f32> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let longer: Vec<f32> = (0..6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut batch_data = vec![0.0f32; 2 * 6 * 3];
        batch_data[..6].copy_from_slice(&example);
        batch_data[18..36].copy_from_slice(&longer);
        let batch = PaddedModality { t_max: 6, dim: 3, data: batch_data, lengths: vec![2, 6] };

        let alone = PaddedModality { t_max: 2, dim: 3, data: example, lengths: vec![2] };

        let encode = |pm: &PaddedModality| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let u = encode_sequence(
                &mut tape, &store, &enc, pm, Activation::Tanh, 0.0, Mode::Eval, &mut rng,
            )
            .unwrap();
            tape.values(u).to_vec()
        };
        let in_batch = encode(&batch);
        let standalone = encode(&alone);
        assert_eq!(&in_batch[..5], &standalone[..5]);
    }

    #[test]
    fn shared_encoder_output_is_bounded() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shared = FeedForward::init(&mut store, "shared", 4, 4, &mut rng);
        let mut tape = Tape::new();
        let u = tape.constant(vec![3, 4], &[5.0, -5.0, 2.0, 0.0, 1.0, 1.0, -9.0, 9.0, 0.3, -0.3, 4.0, -4.0]).unwrap();
        let hc = encode_shared(&mut tape, &store, &shared, u).unwrap();
        assert!(tape.values(hc).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn private_encoders_are_isolated_and_shared_is_shared() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shared = FeedForward::init(&mut store, "shared", 3, 3, &mut rng);
        let priv_l = FeedForward::init(&mut store, "priv.l", 3, 3, &mut rng);
        let priv_v = FeedForward::init(&mut store, "priv.v", 3, 3, &mut rng);

        let us: [Vec<f32>; 2] = [vec![0.5, -0.2, 0.8], vec![-0.4, 0.9, 0.1]];
        let run = |store: &ParameterStore| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut outs = Vec::new();
            for u_data in &us {
                let u = tape.constant(vec![1, 3], u_data).unwrap();
                let c = encode_shared(&mut tape, store, &shared, u).unwrap();
                outs.push(tape.values(c).to_vec());
            }
            let u = tape.constant(vec![1, 3], &us[0]).unwrap();
            let pl = encode_private(&mut tape, store, &priv_l, u, Activation::Tanh, 0.0, Mode::Eval, &mut rng).unwrap();
            let pv = encode_private(&mut tape, store, &priv_v, u, Activation::Tanh, 0.0, Mode::Eval, &mut rng).unwrap();
            outs.push(tape.values(pl).to_vec());
            outs.push(tape.values(pv).to_vec());
            outs
        };
        let before = run(&store);

        // Perturbing the shared encoder changes every shared output.
        let mut store2 = store.clone();
        store2.tensor_mut(shared.w).data_mut()[0] += 0.25;
        let after_shared = run(&store2);
        assert_ne!(before[0], after_shared[0]);
        assert_ne!(before[1], after_shared[1]);
        assert_eq!(before[2], after_shared[2]);

        // Perturbing one private encoder leaves the other bit-identical.
        let mut store3 = store.clone();
        store3.tensor_mut(priv_l.w).data_mut()[0] += 0.25;
        let after_private = run(&store3);
        assert_ne!(before[2], after_private[2]);
        assert_eq!(before[3], after_private[3]);
        assert_eq!(before[0], after_private[0]);
    }

    #[test]
    fn decode_is_affine_in_the_sum() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = FeedForward::init(&mut store, "dec", 2, 2, &mut rng);
        let mut tape = Tape::new();
        let zero = tape.constant(vec![1, 2], &[0.0, 0.0]).unwrap();
        let out = decode(&mut tape, &store, &dec, Some(zero), Some(zero)).unwrap();
        // Zero pair through a zero-bias linear layer stays zero.
        assert_eq!(tape.values(out), &[0.0, 0.0]);

        // Exactly representable values keep the sum bit-identical.
        let c = tape.constant(vec![1, 2], &[0.25, -0.125]).unwrap();
        let p = tape.constant(vec![1, 2], &[0.25, 0.5]).unwrap();
        let got = decode(&mut tape, &store, &dec, Some(c), Some(p)).unwrap();
        // Same as decoding the precomputed sum: no activation inside D.
        let s = tape.constant(vec![1, 2], &[0.5, 0.375]).unwrap();
        let want = decode(&mut tape, &store, &dec, Some(s), None).unwrap();
        let (g, w) = (tape.values(got).to_vec(), tape.values(want).to_vec());
        for (a, b) in g.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_zero_input_is_activated_bias_path() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = PooledEncoder::init(&mut store, "pool", 3, 2, &mut rng);
        store.tensor_mut(enc.b).data_mut().copy_from_slice(&[0.5, -0.5]);
        let batch = PaddedModality { t_max: 1, dim: 3, data: vec![0.0; 3], lengths: vec![1] };
        let mut tape = Tape::new();
        let u = encode_pooled(
            &mut tape, &store, &enc, &batch, Activation::Tanh, 0.0, Mode::Eval, &mut rng,
        )
        .unwrap();
        let want = [0.5f64.tanh(), (-0.5f64).tanh()];
        for (v, w) in tape.values(u).iter().zip(want) {
            assert!((v - w).abs() < 1e-7);
        }
    }

    #[test]
    fn predict_output_dims_follow_task() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let head_reg = PredictionHead::init(&mut store, "g_reg", 12, 4, 1, &mut rng);
        let head_cls = PredictionHead::init(&mut store, "g_cls", 12, 4, 2, &mut rng);
        let mut tape = Tape::new();
        let joint = tape.constant(vec![3, 12], &[0.1; 36]).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let reg = predict(&mut tape, &store, &head_reg, joint, Activation::Relu, 0.0, Mode::Eval, &mut rng2).unwrap();
        assert_eq!(tape.shape(reg), &[3, 1]);
        let cls = predict(&mut tape, &store, &head_cls, joint, Activation::Relu, 0.0, Mode::Eval, &mut rng2).unwrap();
        assert_eq!(tape.shape(cls), &[3, 2]);

        let wrong = tape.constant(vec![3, 6], &[0.0; 18]).unwrap();
        assert!(matches!(
            predict(&mut tape, &store, &head_reg, wrong, Activation::Relu, 0.0, Mode::Eval, &mut rng2),
            Err(TensorError::BadOperand { op: "predict", .. })
        ));
    }

    #[test]
    fn encoder_gradients_pass_finite_difference_check() {
        use crate::tensor::grad_check;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let enc = PooledEncoder::init(&mut store, "pool", 3, 4, &mut rng);
        let head = PredictionHead::init(&mut store, "g", 4, 3, 1, &mut rng);
        let batch = padded(2, 1, 3, 21);
        let report = grad_check(&mut store, 1e-3, 1e-3, |tape, store| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let u = encode_pooled(tape, store, &enc, &batch, Activation::Tanh, 0.0, Mode::Eval, &mut rng)?;
            let y = predict(tape, store, &head, u, Activation::Tanh, 0.0, Mode::Eval, &mut rng)?;
            Ok(tape.mean(y))
        })
        .unwrap();
        assert!(report.all_pass(), "worst {:?}", report.worst());
    }

    #[test]
    fn lstm_gradients_pass_finite_difference_check() {
        use crate::tensor::grad_check;
        let (mut store, enc) = encoder_fixture(3, 3);
        let batch = padded(2, 3, 3, 30);
        let report = grad_check(&mut store, 1e-3, 1e-3, |tape, store| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let u = encode_sequence(tape, store, &enc, &batch, Activation::Tanh, 0.0, Mode::Eval, &mut rng)?;
            Ok(tape.mean(u))
        })
        .unwrap();
        assert!(report.all_pass(), "worst {:?}", report.worst());
    }
}
