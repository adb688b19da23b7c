//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by embedding, decoding, training and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The framed payload does not fit the configured bit capacity.
    #[error("payload too long: {needed} bits needed, capacity is {capacity}")]
    PayloadTooLong { needed: usize, capacity: usize },

    /// BCH decoding could not correct the received word.
    #[error("error correction failed: more than {t} bit errors")]
    EccFailure { t: usize },

    /// The payload frame (length header / padding / UTF-8) is inconsistent.
    #[error("inconsistent payload framing: {0}")]
    FramingError(String),

    /// An input tensor or grid has the wrong dimensions.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// The broadcast matrix is numerically singular or too ill-conditioned.
    #[error("broadcast matrix not invertible (condition proxy {cond:.3e} exceeds cap {cap:.3e})")]
    SingularMatrix { cond: f64, cap: f64 },

    /// The decoded anchor estimate carries no usable structure.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Crop parameters describe an unusable rectangle.
    #[error("invalid crop parameters: {0}")]
    InvalidParams(String),

    /// The texture corpus for mask simulation is empty.
    #[error("texture corpus is empty")]
    EmptyCorpus,

    /// An image file could not be read or has an unsupported format.
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    /// Training loss became non-finite.
    #[error("training diverged at iteration {iteration} (loss not finite)")]
    Divergence { iteration: usize },

    /// A configuration file failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
