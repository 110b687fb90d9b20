use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
///
/// Variants are grouped by how a driver should react: usage errors come
/// from bad arguments or mismatched shapes, format errors from on-disk
/// data, numerical errors from non-finite values.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{0}")]
    Idx(#[from] IdxError),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape(_) | Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::NonFinite(_) => ErrorClass::Numerical,
            Error::Checkpoint(_) | Error::Idx(_) | Error::Io { .. } | Error::Json { .. } => {
                ErrorClass::Data
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint")]
    NotACheckpoint,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("corrupt directory: {0}")]
    CorruptDirectory(String),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("not IDX: magic {0:#010x}")]
    NotIdx(u32),
    #[error("label/image count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("corrupt IDX: {0}")]
    Corrupt(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}

pub(crate) use invalid;
pub(crate) use shape_err;
