//! Error types shared by every module of the codec.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CcqError {
    /// An encoding configuration, family, or group size outside the supported set.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside the domain of an operation (code too large, negative scale, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A state sequence that does not obey the overlap rule of its configuration.
    #[error("not a valid transition sequence: {0}")]
    Transition(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A value that does not fit the packed layout it is written into.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Malformed container bytes. `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A broken internal invariant, e.g. a cluster reconstruction outside the code space.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CcqError {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        CcqError::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CcqError>;
