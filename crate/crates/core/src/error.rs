use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

/// Crate-wide error. The CLI maps variants onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("compacted model deviates from masked model by {deviation:.3e} (bound {bound:.0e})")]
    Equivalence { deviation: f64, bound: f64 },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ckpt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Checkpoint {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
