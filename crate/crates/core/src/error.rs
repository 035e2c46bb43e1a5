//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor-op shape or index violation. Carries the op name and what went wrong.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller-supplied argument was unusable.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A configuration value was out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset loading, generation, or validation failed.
    #[error("data error: {0}")]
    Data(String),

    /// A training run could not produce a usable model.
    #[error("training failed: {0}")]
    Training(String),

    /// An optimizer step saw NaN or infinite gradients.
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),

    /// No training epoch satisfied the divergence constraint.
    #[error("divergence constraint unmet: best validation divergence {best:.6} exceeds {allowed:.6}")]
    ConstraintUnmet { best: f64, allowed: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 for configuration problems, 3 when a
    /// divergence constraint cannot be met, 4 for any other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) | Error::Config(_) => 2,
            Error::ConstraintUnmet { .. } => 3,
            _ => 4,
        }
    }
}
