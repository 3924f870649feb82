use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the quantization, training, indexing and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("shape mismatch: expected dimension {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Divergence { epoch: usize, step: usize, msg: String },
    #[error("point {index}: {source}")]
    AtPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::Shape { expected, actual })
        }
    }
}
