use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Process exit code for the command-line front end:
    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Numeric(_) | Error::Degenerate(_) | Error::Dimension(_) => 3,
            Error::Data(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } => 2,
        }
    }
}
