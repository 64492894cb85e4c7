//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the numerical kernels and model operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("SVD failed to converge after {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error("symmetric eigendecomposition failed to converge after {sweeps} sweeps")]
    EigNoConvergence { sweeps: usize },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("optimization produced a non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Error {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
