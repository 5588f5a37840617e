use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SarError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: rating {rating} outside [1, 5]")]
    RatingOutOfRange { line: usize, rating: i64 },

    #[error("line {line}: duplicate (user {user}, item {item}) pair")]
    DuplicatePair { line: usize, user: u64, item: u64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument `{name}`: {msg}")]
    InvalidArgument { name: &'static str, msg: String },

    #[error("{kind} index {index} out of range (len {len})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SarError>;

pub(crate) fn invalid(name: &'static str, msg: impl Into<String>) -> SarError {
    SarError::InvalidArgument { name, msg: msg.into() }
}

pub(crate) fn check_index(kind: &'static str, index: usize, len: usize) -> Result<()> {
    if index < len {
        Ok(())
    } else {
        Err(SarError::IndexOutOfRange { kind, index, len })
    }
}
