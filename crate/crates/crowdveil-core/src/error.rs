//! Crate-wide error type with a coarse category used for CLI exit codes.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, dimensions, paths that
    /// must be set, unknown keys, missing model layers.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent data on disk (images, annotations,
    /// checkpoints) or annotations violating image bounds.
    #[error("data error: {0}")]
    Data(String),

    /// Caller misuse of an API contract: paradigm mismatch, shape mismatch,
    /// empty inputs where non-empty is required.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical failure: non-finite losses or activations.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// I/O failure with the offending path attached.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error categories; the CLI maps these to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Other,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorCategory::Config,
            Error::Data(_) => ErrorCategory::Data,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Io { .. } => ErrorCategory::Other,
        }
    }
}
