use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("cannot generate `{kind}` structure: {reason}")]
    Generation { kind: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("corrupt checkpoint: {0}")]
    Integrity(String),

    #[error("training diverged: {loss} is not finite at epoch {epoch}")]
    Divergence { loss: String, epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
