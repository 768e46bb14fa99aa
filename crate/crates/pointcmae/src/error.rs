//! Crate-wide error type.
//!
//! Everything fallible returns [`Result`]. Variants are grouped by what went
//! wrong rather than by module, so callers (and the CLI exit-code mapping)
//! can match on intent: bad arguments vs. broken state vs. I/O.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between tensors or between a tensor and an operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its documented domain (ratios, counts, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An index refers outside the container it indexes.
    #[error("index out of range: {0}")]
    Index(String),

    /// An API was used against its contract (e.g. backward on a non-scalar,
    /// or a second backward pass on the same tape).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration failed validation before any work started.
    #[error("invalid config: {0}")]
    Config(String),

    /// A numeric value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A checkpoint file is unreadable: bad magic, version, truncation or
    /// checksum mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A cloud or config file failed to parse; includes file and line.
    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
