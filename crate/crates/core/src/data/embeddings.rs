//! Binary embedding files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "SDMA"
//! u32  format version (1)
//! u32  record count
//! u32  dim (0 permitted only when count is 0)
//! f64  count*dim payload, row-major
//! ```
//!
//! Write/read round-trips are byte-identical.

use std::path::Path;

use crate::encoder::checkpoint::{ByteReader, MAGIC};
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, read_file};
use crate::numeric::FeatureVector;

const EMBEDDING_VERSION: u32 = 1;

pub fn embedding_bytes(records: &[FeatureVector]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, FeatureVector::dim);
    for r in records {
        if r.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: r.dim(),
            });
        }
    }
    let mut out = Vec::with_capacity(16 + records.len() * dim * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        for v in r.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, records: &[FeatureVector]) -> Result<()> {
    atomic_write(path, &embedding_bytes(records)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<FeatureVector>> {
    let bytes = read_file(path)?;
    parse_embedding_bytes(path, &bytes)
}

pub fn parse_embedding_bytes(path: &Path, bytes: &[u8]) -> Result<Vec<FeatureVector>> {
    let mut r = ByteReader::new(path, bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if count > 0 && dim == 0 {
        return Err(r.invalid(format!("count {count} with dim 0")));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let values = r.f64s(dim)?;
        records.push(FeatureVector::new(values).map_err(|e| {
            r.invalid(format!("record {i}: {e}"))
        })?);
    }
    r.finish()?;
    Ok(records)
}
