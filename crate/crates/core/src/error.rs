use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("prompt build error: {0}")]
    Prompt(String),

    #[error("assembly error: expected {expected}, got {actual}")]
    Assembly { expected: String, actual: String },

    #[error("encoding failed at item {index}: {message}")]
    Encoding { index: usize, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Behavior(#[from] crate::behavior::BehaviorError),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}
