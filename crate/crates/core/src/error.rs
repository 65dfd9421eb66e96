use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AdError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { context: context.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code: 2 config/input error, 3 numeric failure,
    /// 4 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Autodiff(AdError::NonFinite { .. }) | Error::Numeric(_) => 3,
            Error::Missing(_) => 4,
            Error::Autodiff(_) | Error::Invalid(_) | Error::Config { .. } | Error::Format { .. } => 2,
            Error::Io { .. } => 4,
        }
    }
}
