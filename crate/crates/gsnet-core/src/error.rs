//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GsError {
    /// Shape or extent mismatch between tensors.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// Invalid argument value (out-of-range label, non-scalar loss, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration violates one of its invariants.
    #[error("invalid config: {0}")]
    Config(String),
    /// Optimizer state is inconsistent with the parameter list.
    #[error("optimizer state: {0}")]
    State(String),
    /// Checkpoint file is malformed or does not match the model.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    /// 2 = config/usage, 3 = I/O, 4 = divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            GsError::Io { .. } => 3,
            GsError::Diverged(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, GsError>;
