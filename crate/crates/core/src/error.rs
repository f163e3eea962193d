//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for tensor ops, model construction, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A training run failed to satisfy its convergence contract.
    #[error("training failed: {0}")]
    TrainingFailed(String),

    /// Attempted to mutate parameters that are frozen at this phase.
    #[error("frozen parameters: {0}")]
    Frozen(String),

    /// Configuration file or key could not be parsed.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint payload is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Convenience constructor for shape errors.
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, details: details.into() }
    }

    /// Convenience constructor for invalid-argument errors.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Convenience constructor for training failures.
    pub fn training(msg: impl Into<String>) -> Self {
        Error::TrainingFailed(msg.into())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
