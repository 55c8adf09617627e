use std::path::PathBuf;
use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate embedding (zero norm): {0}")]
    DegenerateEmbedding(String),

    #[error("embedding not unit-norm: {0}")]
    NotNormalized(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("non-finite loss at step {step}; offending locations: {locations:?}")]
    NonFiniteLoss { step: usize, locations: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
