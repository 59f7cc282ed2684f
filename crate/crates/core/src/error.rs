use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the distillation pipeline.
///
/// Each variant belongs to one [`ErrorCategory`], which the command-line
/// front end maps onto a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("data error at element {index}: {message}")]
    Data { index: usize, message: String },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("planning error: {0}")]
    Planning(String),
    #[error("insufficient samples: need more than {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Precondition(_) | Error::Planning(_) => ErrorCategory::Config,
            Error::Io { .. } | Error::Format(_) | Error::Data { .. } | Error::Shape { .. } => {
                ErrorCategory::Data
            }
            Error::Numerical(_) | Error::InsufficientSamples { .. } => ErrorCategory::Numerical,
        }
    }
}
