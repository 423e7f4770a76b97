use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid availability condition: {0}")]
    InvalidCondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("modality index {index} out of range (M = {m})")]
    IndexOutOfRange { index: usize, m: usize },

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("checkpoint integrity failure in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch} iter {iter}: non-finite {term}")]
    Divergence {
        epoch: usize,
        iter: usize,
        term: String,
    },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
