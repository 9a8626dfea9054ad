//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinity. Never silent.
    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Argument outside the operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// API contract violation (non-scalar loss, consumed tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint format/IO problems: bad magic, version, checksum, truncation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed report or metrics file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
