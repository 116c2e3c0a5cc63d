//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor math, model assembly, data handling, and I/O.
#[derive(Debug, Error)]
pub enum PmnError {
    /// Incompatible tensor shapes for an operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Mathematically invalid input (empty reduction, zero vector for cosine, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad data fed to an operation (out-of-range label, malformed record, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value appeared where the computation requires finite numbers.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Checkpoint or dataset file does not match the expected format/version.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PmnError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PmnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PmnError>;
