use std::path::PathBuf;

use hero_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeroError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: schema version {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("non-finite loss {value} at step {step}")]
    Divergence { step: usize, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HeroError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HeroError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        HeroError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = HeroError> = std::result::Result<T, E>;
