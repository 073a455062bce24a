use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss {loss} at step {step}: {diagnostics}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        diagnostics: String,
    },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
