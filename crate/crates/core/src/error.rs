use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NqmError>;

#[derive(Debug, Error)]
pub enum NqmError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A variance went negative beyond rounding tolerance. Usually means the
    /// learning rate is far outside the stable regime.
    #[error("numerical instability at step {step}, dimension {dim}: {detail}")]
    Instability {
        step: usize,
        dim: usize,
        detail: String,
    },

    #[error("degenerate state: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl NqmError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        NqmError::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NqmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Re-tags an instability error with the rollout step where it happened.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            NqmError::Instability { dim, detail, .. } => NqmError::Instability { step, dim, detail },
            other => other,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NqmError::DimensionMismatch { expected, got })
    }
}
