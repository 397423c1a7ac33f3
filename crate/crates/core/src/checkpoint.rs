//! Versioned binary checkpoints: magic string, config echo, then named
//! parameter tensors as row-major little-endian f32.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::SynthConfig;
use crate::model::{MisaModel, ModelError};

const MAGIC: &[u8; 6] = b"MISAv1";

/// Everything needed to rebuild the model and reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Present when the run used generated data; evaluation regenerates
    /// the identical splits from it.
    pub synth: Option<SynthConfig>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic,
    BadMeta(String),
    Truncated,
    UnknownParam { name: String },
    MissingParam { name: String },
    ShapeMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
    Model(ModelError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::BadMagic => write!(f, "not a MISAv1 checkpoint"),
            Self::BadMeta(m) => write!(f, "bad checkpoint metadata: {m}"),
            Self::Truncated => write!(f, "checkpoint truncated"),
            Self::UnknownParam { name } => write!(f, "checkpoint names unknown parameter {name}"),
            Self::MissingParam { name } => write!(f, "checkpoint is missing parameter {name}"),
            Self::ShapeMismatch { name, got, want } => {
                write!(f, "parameter {name}: checkpoint shape {got:?}, model expects {want:?}")
            }
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// Serializes the model's parameters. The write is atomic: a temp file in
/// the same directory is renamed over the target.
pub fn save(path: &Path, meta: &CheckpointMeta, model: &MisaModel) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, tensor) in model.store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads the metadata and raw tensors without rebuilding a model.
pub fn read(
    path: &Path,
) -> Result<(CheckpointMeta, Vec<(String, Vec<usize>, Vec<f32>)>), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    Ok((meta, tensors))
}

/// Rebuilds the model from the config echo and installs the stored
/// parameters, verifying names and shapes both ways.
pub fn load_model(path: &Path) -> Result<(MisaModel, CheckpointMeta), CheckpointError> {
    let (meta, tensors) = read(path)?;
    let mut model = MisaModel::build(&meta.model, &meta.train)?;
    let mut installed = vec![false; model.store.len()];
    for (name, shape, data) in tensors {
        let Some(pid) = model.store.id_of(&name) else {
            return Err(CheckpointError::UnknownParam { name });
        };
        let tensor = model.store.tensor_mut(pid);
        if tensor.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                got: shape,
                want: tensor.shape().to_vec(),
            });
        }
        tensor.data_mut().copy_from_slice(&data);
        installed[pid.0] = true;
    }
    if let Some(pid) = model.store.ids().find(|p| !installed[p.0]) {
        return Err(CheckpointError::MissingParam { name: model.store.name(pid).to_string() });
    }
    Ok((model, meta))
}
