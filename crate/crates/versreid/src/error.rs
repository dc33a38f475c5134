use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary input (PPM or checkpoint) at a byte offset.
    #[error("{}: byte {offset}: {msg}", path.display())]
    Parse { path: PathBuf, offset: usize, msg: String },

    /// Malformed text input (config or manifest) at a 1-based line.
    #[error("{}:{line}: {msg}", path.display())]
    Line { path: PathBuf, line: usize, msg: String },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] versreid_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for numerical failure, 2 for everything else
    /// (usage errors are reported by the argument parser with 1).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(versreid_core::Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}
