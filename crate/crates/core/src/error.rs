use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument, unknown id, or violated precondition.
    #[error("input error: {0}")]
    Input(String),
    /// Mathematical domain violation (zero mass where a ratio is needed, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// An exact oracle was asked to enumerate more than its budget.
    #[error("enumeration budget exceeded: {needed} triples > budget {budget}")]
    Budget { needed: usize, budget: usize },
    /// A non-finite value appeared during training or estimation.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
