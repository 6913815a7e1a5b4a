use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation was called outside its contract (bad label, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in {path}: {msg} (at byte offset {offset})")]
    Format { path: PathBuf, offset: u64, msg: String },

    /// Class split or checkpoint/protocol mismatch.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Protocol(_) => 5,
            Error::Dimension(_) | Error::Usage(_) => 6,
            Error::Io { .. } => 7,
        }
    }
}
