use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument falls outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's contract (mismatched collections, missing cells).
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed text input, with the 1-based line it came from.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A malformed binary file.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An evaluation oracle could not score an architecture.
    #[error("oracle failure for depths [{depths}]: {msg}")]
    Oracle { depths: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
