use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("index {idx} out of bounds for split of length {len}")]
    Bounds { idx: usize, len: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable class name, used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dataset { .. } => "dataset",
            Error::Bounds { .. } => "bounds",
            Error::Shape(_) => "shape",
            Error::Evaluation(_) => "evaluation",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
