use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodaError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid strategy: {0}")]
    Strategy(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("zero-flagged vector passed to contrastive loss")]
    ZeroVector,

    #[error("non-finite loss at step {step}, batch {batch_index}: {detail}")]
    NonFiniteLoss {
        step: u64,
        batch_index: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl CodaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CodaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CodaError>;
