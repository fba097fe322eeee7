use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the frame selection pipeline.
///
/// The variants split along the lines the CLI cares about: domain errors
/// (bad inputs to an operation) map to exit code 1, configuration errors
/// map to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("backend error (retryable={retryable}): {message}")]
    Backend { message: String, retryable: bool },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: corrupt record at byte offset {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: format {found} is not readable by this version (expected {expected}); migrate the file first")]
    Version {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { retryable: true, .. })
    }

    /// True for errors that stem from configuration rather than inputs.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Version { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
