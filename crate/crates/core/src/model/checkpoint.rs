//! Binary checkpoint: `PFN1`, a `u32` version, length-prefixed JSON
//! metadata, a named-tensor index, then little-endian `f32` blobs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BinStrategy, ModelConfig};
use crate::numcore::Tensor;
use crate::prior::PriorConfig;

pub const MAGIC: &[u8; 4] = b"PFN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    NotACheckpoint,
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("truncated blob for tensor {tensor}: need {needed} bytes, {available} left")]
    TruncatedBlob { tensor: String, needed: usize, available: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub bins: BinStrategy,
    /// In [`ModelConfig::param_specs`] order.
    pub weights: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    prior: PriorConfig,
    bins: BinStrategy,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::CorruptHeader(format!("file ends inside {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl ModelCheckpoint {
    pub fn new(model: ModelConfig, prior: PriorConfig, bins: BinStrategy, weights: Vec<Tensor<f32>>) -> Result<Self, super::ModelError> {
        model.validate()?;
        bins.validate()?;
        model.check_weights(&weights)?;
        Ok(Self { model, prior, bins, weights })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&Metadata { model: self.model, prior: self.prior.clone(), bins: self.bins })
            .expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for ((name, _), w) in self.model.param_specs().iter().zip(&self.weights) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(w.shape().len() as u32).to_le_bytes());
            for &d in w.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for w in &self.weights {
            for v in w.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::NotACheckpoint);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = r.u64("metadata length")? as usize;
        if meta_len > bytes.len() {
            return Err(CheckpointError::CorruptHeader(format!("metadata length {meta_len} exceeds file")));
        }
        let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| CheckpointError::CorruptHeader(format!("metadata: {e}")))?;
        meta.model.validate().map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;

        let specs = meta.model.param_specs();
        let count = r.u32("tensor count")? as usize;
        if count != specs.len() {
            return Err(CheckpointError::CorruptHeader(format!("{count} tensors, config implies {}", specs.len())));
        }
        let mut index = Vec::with_capacity(count);
        for (name, shape) in &specs {
            let len = r.u32("tensor name")? as usize;
            let found = r.take(len, "tensor name")?;
            if found != name.as_bytes() {
                return Err(CheckpointError::CorruptHeader(format!(
                    "expected tensor {name}, found {}",
                    String::from_utf8_lossy(found)
                )));
            }
            let rank = r.u32("tensor rank")? as usize;
            let dims = (0..rank).map(|_| r.u64("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if &dims != shape {
                return Err(CheckpointError::CorruptHeader(format!("{name}: shape {dims:?}, config implies {shape:?}")));
            }
            index.push((name.clone(), dims));
        }

        let mut weights = Vec::with_capacity(count);
        for (name, shape) in index {
            let n: usize = shape.iter().product();
            let available = bytes.len() - r.pos;
            if available < 4 * n {
                return Err(CheckpointError::TruncatedBlob { tensor: name, needed: 4 * n, available });
            }
            let blob = r.take(4 * n, "blob")?;
            let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            weights.push(Tensor::new(shape, data).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::CorruptHeader(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model: meta.model, prior: meta.prior, bins: meta.bins, weights })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp-ckpt");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
