//! Dataset I/O and the synthetic benchmark generator.

mod embeddings;
mod manifest;
mod synth;

pub use embeddings::{embedding_bytes, read_embeddings, write_embeddings};
pub use manifest::{
    load_manifest, load_truth, save_generated, DatasetPaths, LoadedData, MANIFEST_FILE,
    TRUTH_FILE,
};
pub use synth::{
    generate, selection_recovery, Generated, GroundTruth, PromptProvenance, SelectionRecovery,
    SyntheticSpec, TestSet,
};
