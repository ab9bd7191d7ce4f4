use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MocError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step} in term {term}")]
    NonFinite { step: usize, term: String },

    #[error("untaped node {0}")]
    UntapedNode(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MocError>;

impl MocError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MocError::Io {
            path: path.into(),
            source,
        }
    }
}
