use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor or image shapes.
    #[error("dimension error: {0}")]
    Shape(String),
    /// A caller violated an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Input data outside its declared domain.
    #[error("data error: {0}")]
    Data(String),
    /// NaN, infinity or divergence.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Malformed file contents.
    #[error("failed to load {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
