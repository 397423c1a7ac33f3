//! Model and training configuration, including the per-dataset presets.

use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the three input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Language,
    Visual,
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Language, Modality::Visual, Modality::Acoustic];

    pub fn key(self) -> &'static str {
        match self {
            Modality::Language => "l",
            Modality::Visual => "v",
            Modality::Acoustic => "a",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l" | "language" => Some(Modality::Language),
            "v" | "visual" => Some(Modality::Visual),
            "a" | "acoustic" | "audio" => Some(Modality::Acoustic),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Per-modality value map in canonical (l, v, a) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityMap<T> {
    pub l: T,
    pub v: T,
    pub a: T,
}

impl<T> ModalityMap<T> {
    pub fn new(l: T, v: T, a: T) -> Self {
        Self { l, v, a }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Language => &self.l,
            Modality::Visual => &self.v,
            Modality::Acoustic => &self.a,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Language => &mut self.l,
            Modality::Visual => &mut self.v,
            Modality::Acoustic => &mut self.a,
        }
    }
}

impl<T: Clone> ModalityMap<T> {
    pub fn splat(value: T) -> Self {
        Self { l: value.clone(), v: value.clone(), a: value }
    }
}

/// Dataset non-linearity applied inside encoders and the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leakyrelu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Some(Activation::Relu),
            "leakyrelu" | "leaky_relu" => Some(Activation::LeakyRelu),
            "elu" => Some(Activation::Elu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Prediction target type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TaskKind {
    /// Continuous score; `range` bounds the label distribution.
    Regression { range: (f32, f32) },
    /// `classes` mutually exclusive labels.
    Classification { classes: usize },
}

impl TaskKind {
    pub fn is_regression(self) -> bool {
        matches!(self, TaskKind::Regression { .. })
    }

    /// Width of the prediction head output.
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Regression { .. } => 1,
            TaskKind::Classification { classes } => classes,
        }
    }
}

/// Architecture variants used by the ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Variant {
    /// Shared + private encoders, six fused rows, all losses.
    Full,
    /// Per-modality encoders only; no shared subspace, no regularizers.
    Base,
    /// Shared encoder only; no private subspace, no difference loss.
    Inv,
    /// Full representation learning; only private rows are fused.
    SFusion,
    /// Full representation learning; only shared rows are fused.
    IFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::Base, Variant::Inv, Variant::SFusion, Variant::IFusion];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Base => "base",
            Variant::Inv => "inv",
            Variant::SFusion => "sFusion",
            Variant::IFusion => "iFusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Some(Variant::Full),
            "base" => Some(Variant::Base),
            "inv" => Some(Variant::Inv),
            "sfusion" => Some(Variant::SFusion),
            "ifusion" => Some(Variant::IFusion),
            _ => None,
        }
    }

    /// Whether the shared encoder exists.
    pub fn has_shared(self) -> bool {
        !matches!(self, Variant::Base)
    }

    /// Whether per-modality private encoders exist.
    pub fn has_private(self) -> bool {
        !matches!(self, Variant::Inv)
    }

    /// Whether shared rows participate in fusion.
    pub fn fuses_shared(self) -> bool {
        matches!(self, Variant::Full | Variant::Inv | Variant::IFusion)
    }

    /// Whether private rows participate in fusion.
    pub fn fuses_private(self) -> bool {
        matches!(self, Variant::Full | Variant::Base | Variant::SFusion)
    }

    /// Fused rows per active modality (2 for full, 1 otherwise).
    pub fn rows_per_modality(self) -> usize {
        usize::from(self.fuses_shared()) + usize::from(self.fuses_private())
    }

    /// The similarity loss applies whenever a shared subspace is learned.
    pub fn uses_sim(self) -> bool {
        self.has_shared()
    }

    /// The difference loss needs both subspaces.
    pub fn uses_diff(self) -> bool {
        self.has_shared() && self.has_private()
    }

    /// Reconstruction applies whenever a shared subspace is learned; the
    /// `inv` variant decodes from the shared vector alone.
    pub fn uses_recon(self) -> bool {
        self.has_shared()
    }
}

/// Interaction weights of the composite training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::field(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.3, gamma: 1.0 }
    }
}

/// Architecture dimensions and activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width of every utterance and subspace vector.
    pub d_h: usize,
    /// Attention head count.
    pub n_heads: usize,
    pub activation: Activation,
    pub dropout: f64,
    /// Highest central-moment order matched by the similarity loss.
    pub cmd_k: usize,
    /// Raw feature width per modality.
    pub input_dims: ModalityMap<usize>,
    pub task: TaskKind,
    /// Route language through the pooled-vector projection instead of the
    /// recurrent encoder.
    pub pooled_language: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 128,
            n_heads: 2,
            activation: Activation::Relu,
            dropout: 0.5,
            cmd_k: 5,
            input_dims: ModalityMap::new(16, 8, 8),
            task: TaskKind::Regression { range: (-3.0, 3.0) },
            pooled_language: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_h == 0 {
            return Err(ConfigError::field("d_h", "must be >= 1"));
        }
        if self.n_heads == 0 {
            return Err(ConfigError::field("n_heads", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::field("dropout", "must lie in [0, 1)"));
        }
        if self.cmd_k == 0 {
            return Err(ConfigError::field("cmd_k", "must be >= 1"));
        }
        for m in Modality::ALL {
            if *self.input_dims.get(m) == 0 {
                return Err(ConfigError::field("input_dims", "every modality dim must be >= 1"));
            }
        }
        if let TaskKind::Classification { classes } = self.task {
            if classes < 2 {
                return Err(ConfigError::field("task", "classification needs >= 2 classes"));
            }
        }
        Ok(())
    }
}

/// Optimization-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global-norm gradient clip threshold.
    pub grad_clip: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Multiplicative learning-rate factor applied after each epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub variant: Variant,
    /// Modalities that participate in encoding, fusion, and losses.
    pub active_modalities: Vec<Modality>,
    /// Batches prepared ahead on a worker thread; 1 keeps preparation
    /// inline.
    pub prefetch_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            grad_clip: 1.0,
            patience: 6,
            max_epochs: 40,
            lr_decay: 0.96,
            seed: 0,
            weights: LossWeights::default(),
            variant: Variant::Full,
            active_modalities: Modality::ALL.to_vec(),
            prefetch_batches: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patience == 0 {
            return Err(ConfigError::field("patience", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::field("batch_size", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(ConfigError::field("max_epochs", "must be >= 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(ConfigError::field("lr_decay", "must lie in (0, 1]"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(ConfigError::field("learning_rate", "must be positive"));
        }
        if !self.grad_clip.is_finite() || self.grad_clip <= 0.0 {
            return Err(ConfigError::field("grad_clip", "must be positive"));
        }
        if self.active_modalities.is_empty() {
            return Err(ConfigError::field("active_modalities", "at least one modality required"));
        }
        if self.prefetch_batches == 0 {
            return Err(ConfigError::field("prefetch_batches", "must be >= 1"));
        }
        self.weights.validate()
    }

    /// Active modalities in canonical order, deduplicated.
    pub fn canonical_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.active_modalities.contains(m))
            .collect()
    }
}

/// Named hyper-parameter presets; values are overridable per flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mosi,
    Mosei,
    UrFunny,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mosi" => Some(Preset::Mosi),
            "mosei" => Some(Preset::Mosei),
            "urfunny" | "ur_funny" => Some(Preset::UrFunny),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mosi => "mosi",
            Preset::Mosei => "mosei",
            Preset::UrFunny => "urfunny",
        }
    }

    /// Expands the preset into model and train settings.
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        model.d_h = 128;
        model.cmd_k = 5;
        train.grad_clip = 1.0;
        train.learning_rate = 1e-4;
        train.patience = 6;
        match self {
            Preset::Mosi => {
                model.activation = Activation::Relu;
                model.dropout = 0.5;
                model.task = TaskKind::Regression { range: (-3.0, 3.0) };
                train.batch_size = 64;
                train.weights = LossWeights::new(1.0, 0.3, 1.0);
            }
            Preset::Mosei => {
                model.activation = Activation::LeakyRelu;
                model.dropout = 0.1;
                model.task = TaskKind::Regression { range: (-3.0, 3.0) };
                train.batch_size = 16;
                train.weights = LossWeights::new(0.7, 0.3, 0.7);
            }
            Preset::UrFunny => {
                model.activation = Activation::Tanh;
                model.dropout = 0.1;
                model.task = TaskKind::Classification { classes: 2 };
                train.batch_size = 32;
                train.weights = LossWeights::new(0.7, 1.0, 1.0);
            }
        }
    }
}

/// Configuration validation failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn field(field: &str, message: &str) -> Self {
        Self { field: field.to_string(), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config field {:?}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}
