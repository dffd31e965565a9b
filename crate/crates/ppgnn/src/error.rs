//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Malformed text input (edge lists, meta files), with file and line context.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Invalid configuration, rejected before any work starts.
    #[error("config error: {0}")]
    Config(String),

    /// Binary file failed validation (bad magic, version, or size).
    #[error("invalid data in {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    /// Dimension or index mismatch between in-memory objects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// I/O failure with path context.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure during a training or benchmark run.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
