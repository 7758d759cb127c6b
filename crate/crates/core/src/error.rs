use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = StellarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum StellarError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("probe error: {0}")]
    Probe(String),

    #[error("write failed at step {step}: {source}")]
    Write {
        step: u64,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StellarError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        StellarError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        StellarError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
