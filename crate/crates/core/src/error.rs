use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Array/shape mismatch between inputs or against a manifest.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument to an operation.
    #[error("invalid input: {0}")]
    Input(String),

    /// A loss or tensor produced a non-finite value; names the component.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// I/O failure, annotated with the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not what the format promises.
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
