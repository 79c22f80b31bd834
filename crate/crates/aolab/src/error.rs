//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("not a permutation: {0}")]
    InvalidPermutation(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Overlength { len: usize, max: usize },

    #[error("kv cache full: capacity {capacity}")]
    CacheFull { capacity: usize },

    #[error("rotation position {pos} outside cached range {max}")]
    PositionOutOfCache { pos: usize, max: usize },

    #[error("invalid corpus byte 0x{byte:02x} at offset {offset}")]
    InvalidCorpusByte { byte: u8, offset: usize },

    #[error("invalid token id {0} for text decoding")]
    InvalidTokenId(usize),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
