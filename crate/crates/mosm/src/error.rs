//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by kernel construction, inference, training and data handling.
#[derive(Debug, Error)]
pub enum Error {
    /// A hyperparameter is outside its admissible domain.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Channel index outside `0..channels`.
    #[error("channel index {index} out of range for {channels} channels")]
    ChannelOutOfRange { index: usize, channels: usize },

    /// Cholesky factorization failed even at the largest jitter level.
    #[error("matrix is not positive definite even with jitter {max_jitter:.3e}")]
    IllConditioned { max_jitter: f64 },

    /// Every optimization restart failed with an ill-conditioned model.
    #[error("training failed: all {restarts} restarts were ill-conditioned")]
    FitFailed { restarts: usize },

    /// Malformed observation file.
    #[error("csv error at line {line}: {reason}")]
    Csv { line: usize, reason: String },

    /// A channel with fewer than two distinct values cannot be standardized.
    #[error("channel {channel} has constant values; cannot normalize")]
    ConstantChannel { channel: usize },

    /// Dataset-level validation failure (empty splits, bad subsample sizes, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Model (de)serialization failure.
    #[error("model serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
