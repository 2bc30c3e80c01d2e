use std::io;

use thiserror::Error;

/// Errors produced by the correspondence engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic {found:?}, expected \"FTN1\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported dtype code {0} (expected 1 = f32 or 2 = u32)")]
    UnsupportedDtype(u8),

    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("tensor file has {extra} trailing bytes after the payload")]
    TrailingBytes { extra: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("failed to allocate {bytes} bytes")]
    Allocation { bytes: usize },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
