use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector is not unit length (norm {norm})")]
    NotUnit { norm: f64 },

    #[error("matrix is not a proper rotation: {0}")]
    NotRotation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("hdr parse error at byte {offset}: {message}")]
    HdrParse { offset: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("mask has no observed pixels")]
    EmptyMask,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },

    #[error("value is not connected to the recorded graph: {0}")]
    Detached(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
