//! The optimization loop: Adam with bias correction, global-norm gradient
//! clipping, exponential learning-rate decay, and patience-based early
//! stopping.
//!
//! Checkpoint selection follows the best validation task loss; the early
//! stopping counter follows the validation total loss. Both appear in the
//! per-epoch history.

use std::fmt;
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TaskKind, TrainConfig};
use crate::data::{self, DatasetSplits, MultimodalExample, UtteranceBatch};
use crate::encoders::Mode;
use crate::fusion::{self, Subspace};
use crate::losses::{self, LossReport};
use crate::metrics::{self, MetricBundle, MetricError};
use crate::model::{MisaModel, ModelError};
use crate::params::ParameterStore;
use crate::seed;
use crate::tensor::Tape;

const SALT_DROPOUT: u64 = 0x44726f70;

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    Metric(MetricError),
    /// A loss component left the finite range; training aborts.
    NonFiniteLoss { component: String, epoch: usize, step: usize },
    NonFiniteGrad { param: String },
    EmptySplit { split: &'static str },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Model(e) => write!(f, "{e}"),
            Self::Metric(e) => write!(f, "{e}"),
            Self::NonFiniteLoss { component, epoch, step } => {
                write!(f, "non-finite {component} loss at epoch {epoch} step {step}; aborting")
            }
            Self::NonFiniteGrad { param } => write!(f, "non-finite gradient for {param}"),
            Self::EmptySplit { split } => write!(f, "{split} split is empty"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<MetricError> for TrainError {
    fn from(e: MetricError) -> Self {
        Self::Metric(e)
    }
}

/// Builds the architecture variant selected by the train config.
pub fn build_variant(model: &ModelConfig, train: &TrainConfig) -> Result<MisaModel, ModelError> {
    MisaModel::build(model, train)
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Adam state: first/second moment buffers aligned with the parameter
/// store, plus the shared step counter.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One bias-corrected update from the gradients currently stored on the
    /// parameters. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for pid in store.ids().collect::<Vec<_>>() {
            let name = store.name(pid).to_string();
            let tensor = store.tensor_mut(pid);
            let numel = tensor.numel();
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.iter().map(|&x| x as f64).collect(),
                None => vec![0.0; numel],
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGrad { param: name });
            }
            let m_buf = &mut self.m[pid_index(pid)];
            let v_buf = &mut self.v[pid_index(pid)];
            let data = tensor.data_mut();
            for i in 0..numel {
                let g = grad[i];
                let m = self.beta1 * m_buf[i] as f64 + (1.0 - self.beta1) * g;
                let v = self.beta2 * v_buf[i] as f64 + (1.0 - self.beta2) * g * g;
                m_buf[i] = m as f32;
                v_buf[i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                data[i] = (data[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

fn pid_index(pid: crate::params::ParamId) -> usize {
    // ParamIds are dense registration indices.
    pid.0
}

/// Scales all gradients so the global l2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, _, t) in store.iter() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for pid in store.ids().collect::<Vec<_>>() {
            if let Some(grad) = store.tensor_mut(pid).grad_mut() {
                for g in grad {
                    *g = (*g as f64 * factor) as f32;
                }
            }
        }
    }
    norm
}

// ── training loop ───────────────────────────────────────────────────────

/// One epoch's aggregate losses. Train components are means over steps;
/// `total` re-derives the weighted combination from the means.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossReport,
    pub val: LossReport,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose validation task loss selected the checkpoint.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Parameters at the best checkpoint.
    pub best_store: ParameterStore,
}

fn dropout_rng(seed_value: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let salt = (epoch as u64) * 1_000_003 + step as u64;
    ChaCha8Rng::seed_from_u64(seed::mix(seed::mix(seed_value, SALT_DROPOUT), salt))
}

/// Runs the full optimization loop.
pub fn train(
    model: &mut MisaModel,
    splits: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if splits.train.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if splits.dev.is_empty() {
        return Err(TrainError::EmptySplit { split: "dev" });
    }

    let mut adam = Adam::new(&model.store);
    let mut lr = cfg.learning_rate;
    let mut history = Vec::new();
    let mut best_val_task = f64::INFINITY;
    let mut best_val_total = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_improvement = 0usize;
    let mut best_store = model.store.clone();
    let mut stopped_epoch = 0usize;

    for epoch in 1..=cfg.max_epochs {
        stopped_epoch = epoch;
        let plan = data::batch_plan(splits.train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;

        let mut run_step = |batch: UtteranceBatch, step: usize| -> Result<(), TrainError> {
            let mut tape = Tape::new();
            let mut rng = dropout_rng(cfg.seed, epoch, step);
            let pass = model.forward(&mut tape, &batch, Mode::Train, &mut rng)?;
            let nodes = model.losses(&mut tape, &pass, &batch)?;
            let (total, report) = losses::total_loss(&mut tape, &nodes, &cfg.weights)
                .map_err(|e| lift_loss_error(e, epoch, step))?;
            tape.backward(total).map_err(|e| TrainError::Model(ModelError::Tensor(e)))?;
            model.store.zero_grads();
            tape.accumulate_grads(&mut model.store);
            clip_gradients(&mut model.store, cfg.grad_clip);
            adam.step(&mut model.store, lr)?;
            sums[0] += report.task;
            sums[1] += report.sim;
            sums[2] += report.diff;
            sums[3] += report.recon;
            steps += 1;
            Ok(())
        };

        if cfg.prefetch_batches > 1 {
            // Batch preparation runs ahead on a worker; order is fixed by
            // the plan, so results match the inline path bit for bit.
            std::thread::scope(|scope| -> Result<(), TrainError> {
                let (tx, rx) = mpsc::sync_channel(cfg.prefetch_batches);
                let train_split = &splits.train;
                let plan_ref = &plan;
                scope.spawn(move || {
                    for chunk in plan_ref {
                        if tx.send(data::build_batch(train_split, chunk)).is_err() {
                            return;
                        }
                    }
                });
                for (step, batch) in rx.iter().enumerate() {
                    run_step(batch, step)?;
                }
                Ok(())
            })?;
        } else {
            for (step, chunk) in plan.iter().enumerate() {
                run_step(data::build_batch(&splits.train, chunk), step)?;
            }
        }
        drop(run_step);

        let n = steps.max(1) as f64;
        let train_report = mean_report(&sums, n, cfg);
        let val_report = split_loss(model, &splits.dev, cfg, epoch)?;
        history.push(EpochRecord { epoch, lr, train: train_report, val: val_report.clone() });

        if val_report.task < best_val_task {
            best_val_task = val_report.task;
            best_epoch = epoch;
            best_store = model.store.clone();
        }
        if val_report.total < best_val_total {
            best_val_total = val_report.total;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
        }
        lr *= cfg.lr_decay;
        if epochs_since_improvement >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome { history, best_epoch, stopped_epoch, best_store })
}

fn lift_loss_error(e: losses::LossError, epoch: usize, step: usize) -> TrainError {
    match e {
        losses::LossError::NonFiniteComponent { component } => {
            TrainError::NonFiniteLoss { component: component.to_string(), epoch, step }
        }
        other => TrainError::Model(ModelError::Loss(other)),
    }
}

fn mean_report(sums: &[f64; 4], n: f64, cfg: &TrainConfig) -> LossReport {
    let (task, sim, diff, recon) = (sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n);
    LossReport {
        task,
        sim,
        diff,
        recon,
        total: LossReport::combine(task, sim, diff, recon, &cfg.weights),
    }
}

/// Mean component losses over a split in eval mode.
pub fn split_loss(
    model: &MisaModel,
    split: &[MultimodalExample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossReport, TrainError> {
    let mut sums = [0.0f64; 4];
    let mut steps = 0usize;
    for batch in data::batch_iter_sequential(split, cfg.batch_size) {
        let mut tape = Tape::new();
        // Eval mode draws nothing; the rng value is irrelevant.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model.forward(&mut tape, &batch, Mode::Eval, &mut rng)?;
        let nodes = model.losses(&mut tape, &pass, &batch)?;
        let (_, report) = losses::total_loss(&mut tape, &nodes, &cfg.weights)
            .map_err(|e| lift_loss_error(e, epoch, steps))?;
        sums[0] += report.task;
        sums[1] += report.sim;
        sums[2] += report.diff;
        sums[3] += report.recon;
        steps += 1;
    }
    Ok(mean_report(&sums, steps.max(1) as f64, cfg))
}

// ── evaluation ──────────────────────────────────────────────────────────

/// What `evaluate` should write out besides metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    None,
    Embeddings,
    Attention,
    All,
}

impl ExportKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "embeddings" => Some(Self::Embeddings),
            "attention" => Some(Self::Attention),
            "all" => Some(Self::All),
            _ => None,
        }
    }

    fn embeddings(self) -> bool {
        matches!(self, Self::Embeddings | Self::All)
    }

    fn attention(self) -> bool {
        matches!(self, Self::Attention | Self::All)
    }
}

/// One exported subspace vector.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EmbeddingRecord {
    pub id: String,
    /// Row label, e.g. `c_l` or `p_a`.
    pub repr: String,
    pub vector: Vec<f32>,
}

/// One example's head-averaged attention matrix.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AttentionRecord {
    pub id: String,
    pub labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct EvalExports {
    pub row_labels: Vec<String>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub attention: Vec<AttentionRecord>,
    /// Mean attention matrix over the whole split.
    pub attention_mean: Vec<Vec<f64>>,
}

pub struct EvalReport {
    pub metrics: MetricBundle,
    pub exports: Option<EvalExports>,
}

/// Deterministic evaluation over a split with optional artifact export.
pub fn evaluate(
    model: &MisaModel,
    split: &[MultimodalExample],
    batch_size: usize,
    export: ExportKind,
) -> Result<EvalReport, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit { split: "eval" });
    }
    let mut scores: Vec<f64> = Vec::new();
    let mut logits: Vec<Vec<f64>> = Vec::new();
    let mut labels_f: Vec<f64> = Vec::new();
    let mut labels_c: Vec<usize> = Vec::new();
    let mut exports = EvalExports::default();
    let mut mean_acc: Vec<Vec<f64>> = Vec::new();
    let mut seen = 0usize;

    for batch in data::batch_iter_sequential(split, batch_size) {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = model.forward(&mut tape, &batch, Mode::Eval, &mut rng)?;
        let n = batch.len();
        // Predictions are f32 model state; metrics run in f64.
        let preds: Vec<f64> =
            tape.values_f32(pass.predictions).iter().map(|&x| x as f64).collect();
        match model.config.task {
            TaskKind::Regression { .. } => {
                scores.extend_from_slice(&preds);
                labels_f.extend(batch.labels.iter().map(|&y| y as f64));
            }
            TaskKind::Classification { classes } => {
                for i in 0..n {
                    logits.push(preds[i * classes..(i + 1) * classes].to_vec());
                    labels_c.push(batch.labels[i] as usize);
                }
            }
        }

        if export.embeddings() {
            for (m, reps) in &pass.reps.modalities {
                for (sub, node) in
                    [(Subspace::Shared, reps.shared), (Subspace::Private, reps.private)]
                {
                    let Some(node) = node else { continue };
                    let vals = tape.values_f32(node);
                    let d = pass.reps.d_h;
                    for i in 0..n {
                        exports.embeddings.push(EmbeddingRecord {
                            id: batch.ids[i].clone(),
                            repr: fusion::row_label(sub, *m),
                            vector: vals[i * d..(i + 1) * d].to_vec(),
                        });
                    }
                }
            }
        }
        if export.attention() {
            let rows = pass.fused.rows;
            if exports.row_labels.is_empty() {
                exports.row_labels = pass.fused.labels.clone();
                mean_acc = vec![vec![0.0; rows]; rows];
            }
            let heads: Vec<&[f64]> =
                pass.attention_weights.iter().map(|&w| tape.values(w)).collect();
            let h = heads.len() as f64;
            for i in 0..n {
                let mut mat = vec![vec![0.0f64; rows]; rows];
                for head in &heads {
                    for r in 0..rows {
                        for c in 0..rows {
                            mat[r][c] += head[(i * rows + r) * rows + c] / h;
                        }
                    }
                }
                for r in 0..rows {
                    for c in 0..rows {
                        mean_acc[r][c] += mat[r][c];
                    }
                }
                exports.attention.push(AttentionRecord {
                    id: batch.ids[i].clone(),
                    labels: pass.fused.labels.clone(),
                    weights: mat,
                });
            }
        }
        seen += n;
    }

    let metrics = match model.config.task {
        TaskKind::Regression { .. } => metrics::regression_bundle(&scores, &labels_f)?,
        TaskKind::Classification { .. } => metrics::binary_bundle(&logits, &labels_c)?,
    };
    let exports = if export == ExportKind::None {
        None
    } else {
        if export.attention() && seen > 0 {
            exports.attention_mean = mean_acc
                .iter()
                .map(|row| row.iter().map(|v| v / seen as f64).collect())
                .collect();
        }
        Some(exports)
    };
    Ok(EvalReport { metrics, exports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LossWeights, ModalityMap, Variant};
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::tensor::Tensor;

    fn scalar_adam_oracle(grads: &[f64], lr: f64) -> f64 {
        // Single-parameter reference implementation.
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut x = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    fn store_with(value: f32) -> ParameterStore {
        let mut store = ParameterStore::new();
        store.register("w", Tensor::from_vec(vec![1], vec![value]).unwrap()).unwrap();
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = store_with(0.5);
        let pid = store.id_of("w").unwrap();
        store.tensor_mut(pid).accumulate_grad(&[0.0]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 1e-2).unwrap();
        assert_eq!(store.tensor(pid).data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_against_gradient_by_almost_lr() {
        for g in [0.3f64, -1.7, 42.0] {
            let mut store = store_with(0.0);
            let pid = store.id_of("w").unwrap();
            store.tensor_mut(pid).accumulate_grad(&[g]);
            let mut adam = Adam::new(&store);
            adam.step(&mut store, 1e-2).unwrap();
            let got = store.tensor(pid).data()[0] as f64;
            let want = scalar_adam_oracle(&[g], 1e-2);
            assert!((got - want).abs() < 1e-9, "g={g} got={got} want={want}");
            assert!((got + g.signum() * 1e-2).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let mut store = store_with(0.0);
        let pid = store.id_of("w").unwrap();
        let mut adam = Adam::new(&store);
        let lr = 1e-3;
        let mut prev = 0.0f64;
        let mut last_step = 0.0f64;
        for t in 0..200 {
            store.tensor_mut(pid).zero_grad();
            store.tensor_mut(pid).accumulate_grad(&[1.0]);
            adam.step(&mut store, lr).unwrap();
            let cur = store.tensor(pid).data()[0] as f64;
            last_step = prev - cur;
            prev = cur;
            let oracle = scalar_adam_oracle(&vec![1.0; t + 1], lr);
            assert!((cur - oracle).abs() < 1e-6);
        }
        assert!((last_step - lr).abs() < lr * 1e-2, "step={last_step}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = store_with(0.0);
        let pid = store.id_of("w").unwrap();
        store.tensor_mut(pid).accumulate_grad(&[f64::NAN]);
        let mut adam = Adam::new(&store);
        assert!(matches!(
            adam.step(&mut store, 1e-3),
            Err(TrainError::NonFiniteGrad { .. })
        ));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let mut store = ParameterStore::new();
            for name in ["a", "b", "c"] {
                let n = rng.random_range(1..6);
                store.register(name, Tensor::zeros(vec![n])).unwrap();
            }
            for pid in store.ids().collect::<Vec<_>>() {
                let n = store.tensor(pid).numel();
                let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                store.tensor_mut(pid).accumulate_grad(&g);
            }
            let clip = rng.random_range(0.1..2.0);
            clip_gradients(&mut store, clip);
            let mut sq = 0.0f64;
            for (_, _, t) in store.iter() {
                sq += t.grad().unwrap().iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
            }
            assert!(sq.sqrt() <= clip + 1e-6, "norm {} clip {clip}", sq.sqrt());
        }
    }

    fn quick_setup(variant: Variant, seed_value: u64) -> (MisaModel, DatasetSplits, TrainConfig) {
        let synth = SynthConfig {
            n_train: 16,
            n_dev: 8,
            n_test: 8,
            t_range: ModalityMap::splat((2, 3)),
            dims: ModalityMap::new(5, 4, 4),
            seed: 11,
            ..SynthConfig::default()
        };
        let splits = generate_synthetic(&synth).unwrap();
        let model_cfg = ModelConfig {
            d_h: 5,
            n_heads: 1,
            input_dims: synth.dims,
            task: synth.task,
            dropout: 0.1,
            ..ModelConfig::default()
        };
        let train_cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            patience: 6,
            learning_rate: 1e-3,
            seed: seed_value,
            variant,
            ..TrainConfig::default()
        };
        let model = build_variant(&model_cfg, &train_cfg).unwrap();
        (model, splits, train_cfg)
    }

    #[test]
    fn same_seed_gives_bit_identical_history() {
        let run = || {
            let (mut model, splits, cfg) = quick_setup(Variant::Full, 5);
            train(&mut model, &splits, &cfg).unwrap().history
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn prefetch_matches_inline_execution() {
        let (mut model, splits, mut cfg) = quick_setup(Variant::Full, 6);
        let inline = train(&mut model, &splits, &cfg).unwrap().history;
        cfg.prefetch_batches = 3;
        let (mut model2, splits2, _) = quick_setup(Variant::Full, 6);
        let prefetched = train(&mut model2, &splits2, &cfg).unwrap().history;
        assert_eq!(inline, prefetched);
    }

    #[test]
    fn base_variant_total_equals_task() {
        let (mut model, splits, mut cfg) = quick_setup(Variant::Base, 7);
        cfg.weights = LossWeights::new(0.0, 0.0, 0.0);
        let outcome = train(&mut model, &splits, &cfg).unwrap();
        for rec in &outcome.history {
            assert_eq!(rec.train.total, rec.train.task);
            assert_eq!(rec.val.total, rec.val.task);
            assert_eq!(rec.train.sim, 0.0);
            assert_eq!(rec.train.diff, 0.0);
            assert_eq!(rec.train.recon, 0.0);
        }
    }

    #[test]
    fn early_stopping_respects_patience_bound() {
        let (mut model, splits, mut cfg) = quick_setup(Variant::Full, 8);
        cfg.max_epochs = 50;
        cfg.patience = 2;
        // A huge learning rate plateaus validation loss almost immediately.
        cfg.learning_rate = 0.5;
        let outcome = train(&mut model, &splits, &cfg).unwrap();
        let mut best_total = f64::INFINITY;
        let mut best_total_epoch = 0;
        for rec in &outcome.history {
            if rec.val.total < best_total {
                best_total = rec.val.total;
                best_total_epoch = rec.epoch;
            }
        }
        assert!(outcome.stopped_epoch <= best_total_epoch + cfg.patience);
        assert!(outcome.stopped_epoch < 50, "expected early stop");
    }

    #[test]
    fn poisoned_parameters_abort_with_component_name() {
        let (mut model, splits, cfg) = quick_setup(Variant::Full, 9);
        let pid = model.store.id_of("head.w2").unwrap();
        model.store.tensor_mut(pid).data_mut()[0] = f32::INFINITY;
        match train(&mut model, &splits, &cfg) {
            Err(TrainError::NonFiniteLoss { component, .. }) => assert_eq!(component, "task"),
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_exports_counts() {
        let (mut model, splits, cfg) = quick_setup(Variant::Full, 10);
        train(&mut model, &splits, &cfg).unwrap();
        let a = evaluate(&model, &splits.test, cfg.batch_size, ExportKind::All).unwrap();
        let b = evaluate(&model, &splits.test, cfg.batch_size, ExportKind::All).unwrap();
        assert_eq!(a.metrics, b.metrics);
        let exports = a.exports.unwrap();
        assert_eq!(exports.embeddings.len(), splits.test.len() * 6);
        assert_eq!(exports.attention.len(), splits.test.len());
        for row in &exports.attention_mean {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
