//! Deterministic numeric kernel: vectors, matrices, cosine geometry, and a
//! seedable random stream.
//!
//! Everything here is 64-bit: gradient checks against finite differences
//! need headroom that 32-bit floats cannot give.

mod matrix;
mod rng;
mod vector;

pub use matrix::LinearMap;
pub use rng::{sample_gaussian, RngState};
pub use vector::{cosine_distance, cosine_similarity, l2_normalize, FeatureVector};

pub(crate) use vector::{dot_slices, norm_slice};
