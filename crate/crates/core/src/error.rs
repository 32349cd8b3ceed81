use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        got: Shape,
    },

    #[error("{op}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: output would be empty ({h}x{w})")]
    EmptyOutput { op: &'static str, h: isize, w: isize },

    #[error("{op}: expected {expected} fusion parameter sets, got {got}")]
    ParamCountMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("image {h}x{w} is smaller than the required {min}x{min}")]
    ImageTooSmall { h: usize, w: usize, min: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("non-finite loss at iteration {iter}; parameters restored to iteration {restored}")]
    Diverged { iter: usize, restored: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated file")]
    Truncated,
    #[error("malformed payload: {0}")]
    Malformed(String),
}
