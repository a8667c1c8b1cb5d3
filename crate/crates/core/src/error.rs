//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector passed to {op}")]
    ZeroNorm { op: &'static str },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("forward tape is stale: the model changed after encode")]
    StaleTape,

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("prompt index {index} out of range for category `{category}`")]
    UnknownPrompt { category: String, index: usize },

    #[error("operation requires at least two categories")]
    SingleCategoryBank,

    #[error("AUROC undefined: labels contain a single class")]
    SingleClassLabels,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at epoch {epoch} ({term})")]
    NonFiniteLoss { epoch: usize, term: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, not an SDMA file")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated file: needed {needed} bytes, got {got}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        got: usize,
    },

    #[error("{path}: invalid contents: {reason}")]
    FormatInvalid { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(
        "rejection sampling gave up after {attempts} attempts; \
         increase dim or raise the similarity cap"
    )]
    RejectionSampling { attempts: usize },
}
