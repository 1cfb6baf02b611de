//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Extent/shape disagreement between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration; the message names the offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// NaN/Inf produced, zero norm, or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Unknown word or sequence overflow while tokenizing.
    #[error("tokenizer error: {0}")]
    Tokenize(String),

    /// Checkpoint container magic does not match.
    #[error("checkpoint magic mismatch: expected \"PMPO\", found {found:02x?}")]
    BadMagic { found: [u8; 4] },

    /// Whole-file checksum of a checkpoint does not match its trailer.
    #[error("checkpoint file checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    FileChecksum { stored: u64, computed: u64 },

    /// Tuned artifact was produced against a different backbone.
    #[error("backbone checksum mismatch: artifact expects {expected:#018x}, backbone is {found:#018x}")]
    BackboneMismatch { expected: u64, found: u64 },

    /// Structurally corrupt checkpoint; `offset` is the byte where parsing failed.
    #[error("corrupt checkpoint at byte {offset}: {message}")]
    Corrupt { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
