use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("sampling diverged{}: {reason}", clip.map(|c| format!(" at clip {c}")).unwrap_or_default())]
    SamplingDiverged { clip: Option<usize>, reason: String },

    #[error("error bank grid is empty: {0}")]
    EmptyBank(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
