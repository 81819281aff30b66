//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EvilError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EvilError {
    /// Input data violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset file could not be ingested.
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss: {0}")]
    NonFinite(String),
}

impl EvilError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EvilError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        EvilError::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::EvilError::$variant(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;
