use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("mesh has zero total surface area")]
    ZeroArea,

    #[error("missing class directory {0}")]
    MissingClass(PathBuf),

    #[error("classes without samples: {}", .0.join(", "))]
    EmptyClasses(Vec<String>),

    #[error("cache version mismatch: file has version {found}, expected {expected}")]
    CacheVersion { found: u32, expected: u32 },

    #[error("cache truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    CacheTruncated {
        offset: usize,
        needed: usize,
        len: usize,
    },

    #[error("corrupt cache: {0}")]
    CacheCorrupt(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
