use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("dimension mismatch in {what}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch { what: String, expected: (usize, usize), actual: (usize, usize) },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {field}: {reason}")]
    Bundle { path: PathBuf, field: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn bundle(path: impl Into<PathBuf>, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Bundle { path: path.into(), field: field.into(), reason: reason.into() }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::DimensionMismatch { what: what.into(), expected, actual }
    }
}
