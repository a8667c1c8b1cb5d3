//! Few-shot multi-anomaly detection over embedding vectors.
//!
//! The pipeline has two stages. Training attaches small trainable shift
//! adapters to frozen image/text encoder stand-ins and fits them with an
//! image-text alignment loss plus an anchor hinge loss, so that each anomaly
//! category's sign prompts land closer to its images than the normal-prompt
//! anchor, and every other category's prompts land farther. Inference then
//! filters outlier sign prompts per category (nearest-neighbor distance
//! against the cross-category margin), scores test images against the kept
//! prompts, and evaluates with image-level AUROC, category-wise AUROC,
//! Hamming score, and subset accuracy.
//!
//! Everything is deterministic under a fixed seed, and every file format
//! round-trips bit-exactly.

pub mod data;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod scoring;
pub mod selection;
pub mod trainer;

mod io_util;

pub use error::{Error, Result};
pub use numeric::{
    cosine_distance, cosine_similarity, l2_normalize, sample_gaussian, FeatureVector, LinearMap,
    RngState,
};
