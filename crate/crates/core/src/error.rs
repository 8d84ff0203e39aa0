use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the gait continual-learning pipeline.
#[derive(Debug, Error)]
pub enum GaitError {
    /// Malformed input: bad shapes, labels out of range, inconsistent batches.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value that cannot be honored.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// A non-finite value appeared in a forward pass or a loss component.
    #[error("numerical failure in {component}: {detail}")]
    Numerical { component: String, detail: String },

    /// Problems with on-disk or generated datasets.
    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl GaitError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GaitError::InvalidInput(msg.into())
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        GaitError::Config { key: key.into(), reason: reason.into() }
    }

    pub fn numerical(component: impl Into<String>, detail: impl Into<String>) -> Self {
        GaitError::Numerical { component: component.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GaitError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, GaitError>;
