use std::path::PathBuf;

use thiserror::Error;

use crate::compat::CompatReport;
use crate::tensorstore::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The bytes on disk do not form a valid container.
    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("no shard index found in {0}")]
    NoShardIndex(PathBuf),

    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("short read for tensor {name:?}: expected {expected} bytes")]
    ShortRead { name: String, expected: u64 },

    #[error("dtype {0} is not a float type; integer and bool tensors are copy-through only")]
    NonFloatDType(DType),

    #[error("tensor {name:?} is {size} bytes, larger than max_shard_bytes {max}")]
    TensorTooLarge { name: String, size: u64, max: u64 },

    #[error("incompatible inputs: {}", .0.summary())]
    Incompatible(Box<CompatReport>),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("recipe error: {0}")]
    Recipe(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("step {index} ({op}): {source}")]
    Step {
        index: usize,
        op: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// The innermost error, looking through step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
