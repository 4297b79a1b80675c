//! The example data format with batch compression, and two demo servable
//! formats: an affine model and a byte-string lookup table.

mod affine;
mod example;
mod loaders;
mod lookup;

pub use affine::{softmax, AffineModel, Classification};
pub use example::{
    compress_batch, decode_batch_json, decompress_batch, encode_batch_json, naive_batch_json,
    CompressedBatch, Example, FeatureValue,
};
pub use loaders::{AffineLoader, AutoLoader, LookupTableLoader, ModelFormat};
pub use lookup::{KeyNotFound, LookupTable};

/// File name of an affine model inside a version directory.
pub const AFFINE_MODEL_FILE: &str = "model.json";
/// File name of a lookup table inside a version directory.
pub const LOOKUP_TABLE_FILE: &str = "table.tsv";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: row {row} has width {got}, expected {expected}")]
    ShapeMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("missing feature {0:?}")]
    MissingFeature(String),
    #[error("feature {0:?} must be a single number")]
    InvalidFeature(String),
    #[error("model has no class labels")]
    NotAClassifier,
    #[error("model output dimension is {0}, regression needs 1")]
    NotARegressor(usize),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
}
