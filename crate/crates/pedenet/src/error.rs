//! Error type shared across the crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Covariance (or other SPD matrix) stayed non-positive-definite after
    /// all jitter attempts. `component` identifies the mixture component
    /// (or 0 for standalone factorizations).
    #[error("singular matrix for component {component}: not positive definite after jitter")]
    SingularMatrix { component: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 for usage/input problems, 2 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularMatrix { .. } => 2,
            _ => 1,
        }
    }
}
