//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes surfaced
/// at the CLI (config/parameter, data, checkpoint, I/O).
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two tensors do not line up.
    #[error("dimension mismatch: {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    /// A parameter is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Mask construction failed (degenerate hull, out-of-frame ellipse, ...).
    #[error("mask error: {0}")]
    Mask(String),

    /// A metric is undefined for the given inputs (empty region, zero-norm
    /// embedding, image smaller than the window).
    #[error("metric error: {0}")]
    Metric(String),

    /// Dataset-level failure (empty directory, too few samples, imbalance).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint archive is missing, corrupt, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss).
    #[error("training error: {0}")]
    Train(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialisation error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
