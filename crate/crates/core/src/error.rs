use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with operands violating its shape or value contract.
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid config key `{key}`: {reason}")]
    ConfigKey { key: String, reason: String },

    #[error("Fock truncation: retained norm {norm:.6} below 1 - {tolerance:e}")]
    Truncation { norm: f64, tolerance: f64 },

    #[error("environment error: {0}")]
    Env(String),

    #[error("non-finite loss during update {update}: {diagnostics}")]
    NonFiniteLoss { update: usize, diagnostics: String },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("output directory {0} already exists (pass --overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
