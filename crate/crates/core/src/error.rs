use std::path::PathBuf;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The caller broke a precondition (shape mismatch, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// A configuration cannot be satisfied by the data it is applied to.
    #[error("configuration error: {0}")]
    Config(String),
    /// A file on disk does not match the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced a non-finite or undefined value.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Training diverged; `iteration` is the optimizer step that failed.
    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
