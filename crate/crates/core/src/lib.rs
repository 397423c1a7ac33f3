//! Subspace representation learning for multimodal utterances.
//!
//! Each modality of an utterance is encoded to a fixed vector, projected
//! into a sigmoid-bounded shared subspace and a modality-specific private
//! subspace, regularized by central-moment matching, soft orthogonality,
//! and reconstruction, then fused with multi-head self-attention into the
//! task prediction. Everything runs on a small define-by-run autodiff tape;
//! no external ML framework is involved.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub(crate) mod seed;
pub mod tensor;
pub mod training;

pub use config::{
    Activation, ConfigError, LossWeights, Modality, ModalityMap, ModelConfig, Preset, TaskKind,
    TrainConfig, Variant,
};
pub use model::{MisaModel, ModelError};
pub use params::{ParamId, ParameterStore};
pub use tensor::{grad_check, NodeId, Tape, Tensor, TensorError};
