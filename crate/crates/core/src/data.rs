//! Synthetic multimodal data generation, the dataset interchange format,
//! and deterministic batching.
//!
//! A dataset directory holds `manifest.json` plus one record-per-line file
//! per split (`train.jsonl`, `dev.jsonl`, `test.jsonl`). Each record is a
//! JSON object `{id, label, l: [[f32,..],..], v: [..], a: [..]}` with one
//! row per timestep. Floats are decimal text; reload is exact for f32.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{Modality, ModalityMap, TaskKind};
use crate::seed;

/// One modality's feature sequence: `t_len` timesteps of `dim` features,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSequence {
    pub modality: Modality,
    pub t_len: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl UtteranceSequence {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// One labelled example with all three modality sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    /// Regression score, or the class index as a float.
    pub label: f32,
    pub seqs: ModalityMap<UtteranceSequence>,
}

/// Dataset-level contract every example must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub dims: ModalityMap<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<MultimodalExample>,
    pub dev: Vec<MultimodalExample>,
    pub test: Vec<MultimodalExample>,
    pub manifest: Manifest,
}

impl DatasetSplits {
    pub fn split(&self, name: &str) -> Option<&[MultimodalExample]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Controls for the synthetic latent-factor generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Inclusive timestep range per modality.
    pub t_range: ModalityMap<(usize, usize)>,
    pub dims: ModalityMap<usize>,
    /// How strongly the label-driving latent appears in each modality.
    pub shared_strength: ModalityMap<f32>,
    /// Magnitude of label-independent per-modality style factors.
    pub private_strength: ModalityMap<f32>,
    pub noise_scale: f32,
    /// Per-timestep perturbation around the example's base vector.
    pub jitter_scale: f32,
    pub task: TaskKind,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 256,
            n_dev: 64,
            n_test: 64,
            t_range: ModalityMap::splat((4, 8)),
            dims: ModalityMap::new(12, 10, 10),
            shared_strength: ModalityMap::splat(1.0),
            private_strength: ModalityMap::splat(0.5),
            noise_scale: 0.1,
            jitter_scale: 0.05,
            task: TaskKind::Regression { range: (-3.0, 3.0) },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        for m in Modality::ALL {
            if *self.dims.get(m) == 0 {
                return Err(DataError::BadConfig(format!("dims.{m} must be >= 1")));
            }
            let (lo, hi) = *self.t_range.get(m);
            if lo == 0 || hi < lo {
                return Err(DataError::BadConfig(format!("t_range.{m} must satisfy 1 <= lo <= hi")));
            }
            if *self.shared_strength.get(m) < 0.0 || *self.private_strength.get(m) < 0.0 {
                return Err(DataError::BadConfig(format!("strengths for {m} must be >= 0")));
            }
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(DataError::BadConfig("noise_scale must be >= 0".into()));
        }
        if !self.jitter_scale.is_finite() || self.jitter_scale < 0.0 {
            return Err(DataError::BadConfig("jitter_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { task: self.task, dims: self.dims }
    }
}

/// Errors from generation, loading, and validation.
#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    BadConfig(String),
    BadManifest(String),
    /// Unparseable record; `line` is 1-based within `file`.
    MalformedRecord { file: String, line: usize, message: String },
    DimMismatch { id: String, modality: Modality, got: usize, want: usize },
    EmptySequence { id: String, modality: Modality },
    NonFinite { id: String, modality: Modality },
    DuplicateId { id: String },
    RaggedRows { id: String, modality: Modality },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::BadConfig(m) => write!(f, "bad generator config: {m}"),
            Self::BadManifest(m) => write!(f, "bad manifest: {m}"),
            Self::MalformedRecord { file, line, message } => {
                write!(f, "{file}:{line}: malformed record: {message}")
            }
            Self::DimMismatch { id, modality, got, want } => {
                write!(f, "example {id}: modality {modality} has dim {got}, manifest says {want}")
            }
            Self::EmptySequence { id, modality } => {
                write!(f, "example {id}: modality {modality} has no timesteps")
            }
            Self::NonFinite { id, modality } => {
                write!(f, "example {id}: modality {modality} contains NaN or infinity")
            }
            Self::DuplicateId { id } => write!(f, "duplicate example id {id}"),
            Self::RaggedRows { id, modality } => {
                write!(f, "example {id}: modality {modality} rows differ in length")
            }
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

// ── synthetic generation ────────────────────────────────────────────────

const PRIVATE_FACTORS: usize = 2;

struct ModalityMaps {
    /// Unit direction carrying the shared latent into feature space.
    shared_dir: Vec<f32>,
    /// Unit columns carrying each private factor into feature space.
    private_dirs: Vec<Vec<f32>>,
}

fn unit_gaussian_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Generates disjoint train/dev/test splits from a latent-factor model.
///
/// Each example draws an affect scalar `z` uniform over the label range and
/// per-modality style factors; every timestep is the example's base vector
/// plus fresh jitter. Output is a pure function of the config.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetSplits, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let maps = ModalityMap::new(
        gen_maps(*cfg.dims.get(Modality::Language), &mut rng),
        gen_maps(*cfg.dims.get(Modality::Visual), &mut rng),
        gen_maps(*cfg.dims.get(Modality::Acoustic), &mut rng),
    );

    let make_split = |name: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<MultimodalExample> {
        (0..n).map(|i| gen_example(cfg, &maps, &format!("{name}-{i:05}"), rng)).collect()
    };

    let train = make_split("train", cfg.n_train, &mut rng);
    let dev = make_split("dev", cfg.n_dev, &mut rng);
    let test = make_split("test", cfg.n_test, &mut rng);
    Ok(DatasetSplits { train, dev, test, manifest: cfg.manifest() })
}

fn gen_maps(dim: usize, rng: &mut ChaCha8Rng) -> ModalityMaps {
    ModalityMaps {
        shared_dir: unit_gaussian_vec(dim, rng),
        private_dirs: (0..PRIVATE_FACTORS).map(|_| unit_gaussian_vec(dim, rng)).collect(),
    }
}

fn gen_example(
    cfg: &SynthConfig,
    maps: &ModalityMap<ModalityMaps>,
    id: &str,
    rng: &mut ChaCha8Rng,
) -> MultimodalExample {
    let (z, label) = match cfg.task {
        TaskKind::Regression { range } => {
            let z = rng.random_range(range.0..=range.1);
            (z, z)
        }
        TaskKind::Classification { classes } => {
            let z: f32 = rng.random_range(-1.0..=1.0);
            let cls = if classes == 2 {
                usize::from(z >= 0.0)
            } else {
                // Evenly split [-1, 1] into class bands.
                (((z + 1.0) / 2.0 * classes as f32) as usize).min(classes - 1)
            };
            (z, cls as f32)
        }
    };

    let mut gen_seq = |m: Modality| {
        let dim = *cfg.dims.get(m);
        let map = maps.get(m);
        let shared = *cfg.shared_strength.get(m);
        let private = *cfg.private_strength.get(m);

        let mut base = vec![0.0f32; dim];
        for (b, &p) in base.iter_mut().zip(&map.shared_dir) {
            *b += shared * z * p;
        }
        for dir in &map.private_dirs {
            let s: f32 = StandardNormal.sample(rng);
            for (b, &q) in base.iter_mut().zip(dir) {
                *b += private * s * q;
            }
        }
        if cfg.noise_scale > 0.0 {
            for b in &mut base {
                let e: f32 = StandardNormal.sample(rng);
                *b += cfg.noise_scale * e;
            }
        }

        let (lo, hi) = *cfg.t_range.get(m);
        let t_len = rng.random_range(lo..=hi);
        let mut data = Vec::with_capacity(t_len * dim);
        for _ in 0..t_len {
            for &b in &base {
                let j: f32 = if cfg.jitter_scale > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                data.push(b + cfg.jitter_scale * j);
            }
        }
        UtteranceSequence { modality: m, t_len, dim, data }
    };

    let seqs = ModalityMap::new(
        gen_seq(Modality::Language),
        gen_seq(Modality::Visual),
        gen_seq(Modality::Acoustic),
    );
    MultimodalExample { id: id.to_string(), label, seqs }
}

// ── interchange format ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    label: f32,
    l: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    a: Vec<Vec<f32>>,
}

fn seq_to_rows(seq: &UtteranceSequence) -> Vec<Vec<f32>> {
    (0..seq.t_len).map(|t| seq.row(t).to_vec()).collect()
}

fn rows_to_seq(
    id: &str,
    modality: Modality,
    rows: Vec<Vec<f32>>,
    want_dim: usize,
) -> Result<UtteranceSequence, DataError> {
    if rows.is_empty() {
        return Err(DataError::EmptySequence { id: id.to_string(), modality });
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(DataError::RaggedRows { id: id.to_string(), modality });
    }
    if dim != want_dim {
        return Err(DataError::DimMismatch { id: id.to_string(), modality, got: dim, want: want_dim });
    }
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(DataError::NonFinite { id: id.to_string(), modality });
    }
    Ok(UtteranceSequence { modality, t_len: data.len() / dim, dim, data })
}

/// Writes a dataset directory (manifest plus three split files).
pub fn save_dataset(dir: &Path, splits: &DatasetSplits) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&splits.manifest)
        .map_err(|e| DataError::BadManifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest)?;
    for (name, examples) in
        [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)]
    {
        let mut out = fs::File::create(dir.join(format!("{name}.jsonl")))?;
        for ex in examples {
            let record = RawRecord {
                id: ex.id.clone(),
                label: ex.label,
                l: seq_to_rows(ex.seqs.get(Modality::Language)),
                v: seq_to_rows(ex.seqs.get(Modality::Visual)),
                a: seq_to_rows(ex.seqs.get(Modality::Acoustic)),
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| DataError::BadManifest(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Loads and validates a dataset directory. Every record is checked against
/// the manifest dims, for finiteness, and for id uniqueness across splits.
pub fn load_dataset(dir: &Path) -> Result<DatasetSplits, DataError> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| DataError::BadManifest(e.to_string()))?;

    let mut seen = std::collections::HashSet::new();
    let mut load_split = |name: &str| -> Result<Vec<MultimodalExample>, DataError> {
        let path = dir.join(format!("{name}.jsonl"));
        let file = fs::File::open(&path)?;
        let mut examples = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
                DataError::MalformedRecord {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                }
            })?;
            if !raw.label.is_finite() {
                return Err(DataError::MalformedRecord {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("non-finite label for id {}", raw.id),
                });
            }
            if let TaskKind::Classification { classes } = manifest.task {
                let cls = raw.label;
                if cls.fract() != 0.0 || cls < 0.0 || cls >= classes as f32 {
                    return Err(DataError::MalformedRecord {
                        file: path.display().to_string(),
                        line: lineno + 1,
                        message: format!("label {cls} outside class range [0, {classes}) for id {}", raw.id),
                    });
                }
            }
            if !seen.insert(raw.id.clone()) {
                return Err(DataError::DuplicateId { id: raw.id });
            }
            let seqs = ModalityMap::new(
                rows_to_seq(&raw.id, Modality::Language, raw.l, *manifest.dims.get(Modality::Language))?,
                rows_to_seq(&raw.id, Modality::Visual, raw.v, *manifest.dims.get(Modality::Visual))?,
                rows_to_seq(&raw.id, Modality::Acoustic, raw.a, *manifest.dims.get(Modality::Acoustic))?,
            );
            examples.push(MultimodalExample { id: raw.id, label: raw.label, seqs });
        }
        Ok(examples)
    };

    let train = load_split("train")?;
    let dev = load_split("dev")?;
    let test = load_split("test")?;
    Ok(DatasetSplits { train, dev, test, manifest })
}

// ── batching ────────────────────────────────────────────────────────────

/// One modality of a batch, padded to the batch-max timestep count with
/// zeros. Encoders must consult `lengths` so padding never leaks into
/// end states.
#[derive(Debug, Clone)]
pub struct PaddedModality {
    pub t_max: usize,
    pub dim: usize,
    /// `[n, t_max, dim]` row-major.
    pub data: Vec<f32>,
    pub lengths: Vec<usize>,
}

impl PaddedModality {
    pub fn step(&self, example: usize, t: usize) -> &[f32] {
        let base = (example * self.t_max + t) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// All examples' features at timestep `t` as an `[n, dim]` block.
    pub fn step_matrix(&self, t: usize) -> Vec<f32> {
        let n = self.lengths.len();
        let mut out = Vec::with_capacity(n * self.dim);
        for i in 0..n {
            out.extend_from_slice(self.step(i, t));
        }
        out
    }

    /// 1.0 for rows still inside their true sequence at timestep `t`.
    pub fn mask_at(&self, t: usize) -> Vec<f64> {
        self.lengths.iter().map(|&len| if t < len { 1.0 } else { 0.0 }).collect()
    }
}

/// A batch of examples ready for the encoders.
#[derive(Debug, Clone)]
pub struct UtteranceBatch {
    pub ids: Vec<String>,
    pub labels: Vec<f32>,
    pub modalities: ModalityMap<PaddedModality>,
}

impl UtteranceBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn from_examples(examples: &[&MultimodalExample]) -> Self {
        let pad = |m: Modality| {
            let t_max = examples.iter().map(|e| e.seqs.get(m).t_len).max().unwrap_or(1);
            let dim = examples.first().map(|e| e.seqs.get(m).dim).unwrap_or(0);
            let mut data = vec![0.0f32; examples.len() * t_max * dim];
            let mut lengths = Vec::with_capacity(examples.len());
            for (i, ex) in examples.iter().enumerate() {
                let seq = ex.seqs.get(m);
                lengths.push(seq.t_len);
                for t in 0..seq.t_len {
                    let dst = (i * t_max + t) * dim;
                    data[dst..dst + dim].copy_from_slice(seq.row(t));
                }
            }
            PaddedModality { t_max, dim, data, lengths }
        };
        UtteranceBatch {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            modalities: ModalityMap::new(
                pad(Modality::Language),
                pad(Modality::Visual),
                pad(Modality::Acoustic),
            ),
        }
    }
}

/// Deterministic shuffled batch index plan keyed by `(seed, epoch)`. The
/// final partial chunk is kept.
pub fn batch_plan(n: usize, batch_size: usize, seed_value: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed_value, epoch as u64));
    // Fisher-Yates; rand's shuffle would also work but this pins the
    // algorithm independent of crate versions.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Materializes one planned batch (padding included).
pub fn build_batch(split: &[MultimodalExample], indices: &[usize]) -> UtteranceBatch {
    let refs: Vec<&MultimodalExample> = indices.iter().map(|&i| &split[i]).collect();
    UtteranceBatch::from_examples(&refs)
}

/// Deterministic shuffled batches keyed by `(seed, epoch)`. The final
/// partial batch is kept.
pub fn batch_iter(
    split: &[MultimodalExample],
    batch_size: usize,
    seed_value: u64,
    epoch: usize,
) -> Vec<UtteranceBatch> {
    batch_plan(split.len(), batch_size, seed_value, epoch)
        .iter()
        .map(|chunk| build_batch(split, chunk))
        .collect()
}

/// Batches in stored order, for evaluation and export.
pub fn batch_iter_sequential(split: &[MultimodalExample], batch_size: usize) -> Vec<UtteranceBatch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    split
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&MultimodalExample> = chunk.iter().collect();
            UtteranceBatch::from_examples(&refs)
        })
        .collect()
}
