use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate mean vector (norm {norm:e} below 1e-9)")]
    Degenerate { norm: f64 },

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("vector is not unit-norm (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated file {path}: missing {missing} bytes")]
    Truncated { path: PathBuf, missing: usize },

    #[error("provenance mismatch: {0} hash differs from the index build")]
    Provenance(&'static str),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
