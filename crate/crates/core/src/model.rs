//! The assembled network: per-modality utterance encoders, subspace
//! projections, attention fusion, and the prediction head, wired according
//! to the architecture variant.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, Modality, ModelConfig, TaskKind, TrainConfig, Variant};
use crate::data::UtteranceBatch;
use crate::encoders::{
    self, FeedForward, Mode, PooledEncoder, PredictionHead, SequenceEncoder,
};
use crate::fusion::{self, AttentionParams, FusionMatrix, Subspace};
use crate::losses::{self, BatchRepresentations, LossError, LossNodes, ModalityReps, TaskTargets};
use crate::params::ParameterStore;
use crate::seed;
use crate::tensor::{NodeId, Tape, TensorError};

const SALT_INIT: u64 = 0x496e_6974;

#[derive(Debug)]
pub enum ModelError {
    Config(ConfigError),
    Tensor(TensorError),
    Loss(LossError),
    /// Batch labels do not fit the configured task.
    BadLabel { value: f32, task: &'static str },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(e) => write!(f, "{e}"),
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Loss(e) => write!(f, "{e}"),
            Self::BadLabel { value, task } => write!(f, "label {value} invalid for {task} task"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<ConfigError> for ModelError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<LossError> for ModelError {
    fn from(e: LossError) -> Self {
        Self::Loss(e)
    }
}

enum UtteranceEncoder {
    Recurrent(SequenceEncoder),
    Pooled(PooledEncoder),
}

/// A built model: configuration, parameters, and the wiring between them.
pub struct MisaModel {
    pub config: ModelConfig,
    pub variant: Variant,
    /// Active modalities in canonical order.
    pub active: Vec<Modality>,
    pub store: ParameterStore,
    encoders: Vec<(Modality, UtteranceEncoder)>,
    shared: Option<FeedForward>,
    privates: Vec<(Modality, FeedForward)>,
    decoder: Option<FeedForward>,
    attention: AttentionParams,
    head: PredictionHead,
}

/// Everything a forward pass exposes to losses, metrics, and exports.
pub struct ForwardPass {
    /// `[n, 1]` scores or `[n, C]` logits.
    pub predictions: NodeId,
    pub reps: BatchRepresentations,
    pub fused: FusionMatrix,
    /// Pre-output attention weights, one `[n, rows, rows]` node per head.
    pub attention_weights: Vec<NodeId>,
}

impl MisaModel {
    /// Builds the variant's architecture with seeded initialization.
    ///
    /// Shared pieces exist once: a single shared encoder (absent for
    /// `base`), one decoder (absent for `base`), one attention block, one
    /// head sized to the variant's fused row count.
    pub fn build(config: &ModelConfig, train: &TrainConfig) -> Result<Self, ModelError> {
        config.validate()?;
        train.validate()?;
        let variant = train.variant;
        let active = train.canonical_modalities();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(train.seed, SALT_INIT));
        let d_h = config.d_h;

        let mut encoders_vec = Vec::new();
        for &m in &active {
            let d_in = *config.input_dims.get(m);
            let prefix = format!("enc.{}", m.key());
            let enc = if m == Modality::Language && config.pooled_language {
                UtteranceEncoder::Pooled(PooledEncoder::init(&mut store, &prefix, d_in, d_h, &mut rng))
            } else {
                UtteranceEncoder::Recurrent(SequenceEncoder::init(&mut store, &prefix, d_in, d_h, &mut rng))
            };
            encoders_vec.push((m, enc));
        }

        let shared = variant
            .has_shared()
            .then(|| FeedForward::init(&mut store, "shared", d_h, d_h, &mut rng));
        let mut privates = Vec::new();
        if variant.has_private() {
            for &m in &active {
                privates.push((m, FeedForward::init(&mut store, &format!("private.{}", m.key()), d_h, d_h, &mut rng)));
            }
        }
        let decoder = variant
            .uses_recon()
            .then(|| FeedForward::init(&mut store, "decoder", d_h, d_h, &mut rng));

        let attention = AttentionParams::init(&mut store, "att", d_h, config.n_heads, &mut rng);
        let fused_rows = active.len() * variant.rows_per_modality();
        let head = PredictionHead::init(
            &mut store,
            "head",
            fused_rows * d_h,
            d_h,
            config.task.output_dim(),
            &mut rng,
        );

        Ok(Self {
            config: config.clone(),
            variant,
            active,
            store,
            encoders: encoders_vec,
            shared,
            privates,
            decoder,
            attention,
            head,
        })
    }

    /// Fused row count for this variant and modality set.
    pub fn fused_rows(&self) -> usize {
        self.active.len() * self.variant.rows_per_modality()
    }

    /// Runs the network over a batch. In train mode `rng` drives dropout;
    /// eval mode draws nothing and is deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &UtteranceBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass, ModelError> {
        self.forward_with(&self.store, tape, batch, mode, rng)
    }

    /// Like [`MisaModel::forward`] but reads parameters from an external
    /// store with the same layout (used by gradient checking).
    pub fn forward_with(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        batch: &UtteranceBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass, ModelError> {
        let cfg = &self.config;
        let n = batch.len();
        let act = cfg.activation;
        let drop = cfg.dropout;

        let mut modality_reps: Vec<(Modality, ModalityReps)> = Vec::new();
        for (m, enc) in &self.encoders {
            let pm = batch.modalities.get(*m);
            let u = match enc {
                UtteranceEncoder::Recurrent(e) => {
                    encoders::encode_sequence(tape, store, e, pm, act, drop, mode, rng)?
                }
                UtteranceEncoder::Pooled(e) => {
                    encoders::encode_pooled(tape, store, e, pm, act, drop, mode, rng)?
                }
            };
            let h_c = match &self.shared {
                Some(s) => Some(encoders::encode_shared(tape, store, s, u)?),
                None => None,
            };
            let h_p = match self.privates.iter().find(|(pm, _)| pm == m) {
                Some((_, p)) => {
                    Some(encoders::encode_private(tape, store, p, u, act, drop, mode, rng)?)
                }
                None => None,
            };
            let reconstruction = match &self.decoder {
                Some(d) => Some(encoders::decode(tape, store, d, h_c, h_p)?),
                None => None,
            };
            modality_reps.push((
                *m,
                ModalityReps { utterance: u, reconstruction, shared: h_c, private: h_p },
            ));
        }

        // Canonical fusion order: shared rows for every modality, then
        // private rows for every modality.
        let mut rows: Vec<(String, NodeId)> = Vec::new();
        if self.variant.fuses_shared() {
            for (m, r) in &modality_reps {
                rows.push((fusion::row_label(Subspace::Shared, *m), r.shared.expect("shared row")));
            }
        }
        if self.variant.fuses_private() {
            for (m, r) in &modality_reps {
                rows.push((fusion::row_label(Subspace::Private, *m), r.private.expect("private row")));
            }
        }
        let stacked = fusion::stack_rows(tape, &rows, n, cfg.d_h)?;
        let (fused, attention_weights) =
            fusion::multihead_self_attention(tape, store, &stacked, &self.attention)?;
        let joint = fusion::fuse(tape, &fused)?;
        let predictions = encoders::predict(tape, store, &self.head, joint, act, drop, mode, rng)?;

        Ok(ForwardPass {
            predictions,
            reps: BatchRepresentations { n_rows: n, d_h: cfg.d_h, modalities: modality_reps },
            fused,
            attention_weights,
        })
    }

    /// Builds the variant's loss components for a completed forward pass.
    pub fn losses(
        &self,
        tape: &mut Tape,
        pass: &ForwardPass,
        batch: &UtteranceBatch,
    ) -> Result<LossNodes, ModelError> {
        let targets = self.targets(batch)?;
        let task = losses::task_loss(tape, pass.predictions, &targets, self.config.task)?;
        let cmd_cfg = losses::CmdConfig::new(self.config.cmd_k);
        let sim = if self.variant.uses_sim() {
            losses::similarity_loss(tape, &pass.reps, &cmd_cfg)?
        } else {
            None
        };
        let diff = if self.variant.uses_diff() {
            losses::difference_loss(tape, &pass.reps)?
        } else {
            None
        };
        let recon = if self.variant.uses_recon() {
            losses::reconstruction_loss(tape, &pass.reps)?
        } else {
            None
        };
        Ok(LossNodes { task, sim, diff, recon })
    }

    /// Converts batch labels into task targets, validating class indices.
    pub fn targets(&self, batch: &UtteranceBatch) -> Result<TaskTargets, ModelError> {
        match self.config.task {
            TaskKind::Regression { .. } => Ok(TaskTargets::Scores(batch.labels.clone())),
            TaskKind::Classification { classes } => {
                let mut ys = Vec::with_capacity(batch.labels.len());
                for &l in &batch.labels {
                    if l.fract() != 0.0 || l < 0.0 || l >= classes as f32 {
                        return Err(ModelError::BadLabel { value: l, task: "classification" });
                    }
                    ys.push(l as usize);
                }
                Ok(TaskTargets::Classes(ys))
            }
        }
    }
}
