//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any charblend operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// An index was outside the valid range of its container.
    #[error("index {index} out of range for {what} (size {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    /// A documented precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A character has no id in the alphabet.
    #[error("character {ch:?} is not in the alphabet")]
    Encoding { ch: char },

    /// An input record was rejected during loading.
    #[error("record rejected: {0}")]
    RejectedRecord(String),

    /// Incompatible strategy/model/flag combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A model file could not be parsed or failed validation.
    #[error("model file error: {0}")]
    ModelFormat(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
