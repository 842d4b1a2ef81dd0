use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{0}")]
    IoBare(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// A malformed corpus record; `line` is 1-based.
    #[error("corpus line {line}: {field}: {message}")]
    Corpus {
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid document: {0}")]
    Document(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient check failed: {0}")]
    GradientMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface: 2 for data
    /// problems, 3 for numeric failures. Usage errors (1) are raised by
    /// the argument parser before any of these can occur.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::NonFinite(_) | Error::GradientMismatch(_) => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
