//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "SDMA"
//! u32  format version (1)
//! u32  branch tag (0 = image, 1 = text)
//! u32  depth
//! u32  dim
//! f64  lambda
//! depth times:
//!     u32  activation flag (0/1)
//!     f64  dim*dim frozen weights, row-major
//! u32  adapter count
//! per adapter:
//!     u32  layer index
//!     u32  hidden width
//!     f64  hidden*dim w1, row-major
//!     f64  dim*hidden w2, row-major
//! ```
//!
//! Write/read round-trips are bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_file};
use crate::numeric::LinearMap;

use super::{Branch, EncoderModel, FrozenLayer, ShiftAdapter};

pub(crate) const MAGIC: &[u8; 4] = b"SDMA";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model to its checkpoint byte layout.
pub fn checkpoint_bytes(model: &EncoderModel) -> Vec<u8> {
    let dim = model.dim();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_u32(&mut out, match model.branch() {
        Branch::Image => 0,
        Branch::Text => 1,
    });
    push_u32(&mut out, model.depth() as u32);
    push_u32(&mut out, dim as u32);
    out.extend_from_slice(&model.lambda().to_le_bytes());
    for layer in model.backbone() {
        push_u32(&mut out, u32::from(layer.apply_activation()));
        push_f64s(&mut out, layer.map().values());
    }
    push_u32(&mut out, model.adapters().len() as u32);
    for adapter in model.adapters() {
        push_u32(&mut out, adapter.layer_index() as u32);
        push_u32(&mut out, adapter.hidden_dim() as u32);
        push_f64s(&mut out, adapter.w1().values());
        push_f64s(&mut out, adapter.w2().values());
    }
    out
}

pub fn write_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(model))
}

pub fn read_checkpoint(path: &Path) -> Result<EncoderModel> {
    let bytes = read_file(path)?;
    parse_checkpoint(path, &bytes)
}

fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<EncoderModel> {
    let mut r = ByteReader::new(path, bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let branch = match r.u32()? {
        0 => Branch::Image,
        1 => Branch::Text,
        other => return Err(r.invalid(format!("unknown branch tag {other}"))),
    };
    let depth = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if depth == 0 || dim == 0 {
        return Err(r.invalid(format!("depth {depth} and dim {dim} must be positive")));
    }
    let lambda = r.f64()?;
    let mut backbone = Vec::with_capacity(depth);
    for _ in 0..depth {
        let activation = match r.u32()? {
            0 => false,
            1 => true,
            other => return Err(r.invalid(format!("bad activation flag {other}"))),
        };
        let values = r.f64s(dim * dim)?;
        let map = LinearMap::new(dim, dim, values).map_err(|e| r.invalid(e.to_string()))?;
        backbone.push(FrozenLayer::new(map, activation).map_err(|e| r.invalid(e.to_string()))?);
    }
    let adapter_count = r.u32()? as usize;
    let mut adapters = Vec::with_capacity(adapter_count);
    for _ in 0..adapter_count {
        let layer_index = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        if hidden == 0 {
            return Err(r.invalid("adapter hidden width must be positive".into()));
        }
        let w1 = LinearMap::new(hidden, dim, r.f64s(hidden * dim)?)
            .map_err(|e| r.invalid(e.to_string()))?;
        let w2 = LinearMap::new(dim, hidden, r.f64s(dim * hidden)?)
            .map_err(|e| r.invalid(e.to_string()))?;
        adapters.push(
            ShiftAdapter::new(layer_index, w1, w2).map_err(|e| r.invalid(e.to_string()))?,
        );
    }
    r.finish()?;
    EncoderModel::new(backbone, adapters, lambda, branch).map_err(|e| Error::FormatInvalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer producing `Truncated` errors with context.
pub(crate) struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            pos: 0,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let b = self.take(count.checked_mul(8).ok_or_else(|| Error::FormatInvalid {
            path: self.path.to_path_buf(),
            reason: "payload length overflows".into(),
        })?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::FormatInvalid {
                path: self.path.to_path_buf(),
                reason: format!(
                    "{} trailing bytes after payload",
                    self.bytes.len() - self.pos
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn invalid(&self, reason: String) -> Error {
        Error::FormatInvalid {
            path: self.path.to_path_buf(),
            reason,
        }
    }
}
