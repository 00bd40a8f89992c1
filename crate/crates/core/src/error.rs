use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("sampling error at step {step}: {detail}")]
    Sampling { step: usize, detail: String },

    #[error("ensemble error for trajectory seed {seed}: {source}")]
    Ensemble {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {detail}")]
    Ingestion {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("fingerprint mismatch: config {config} vs checkpoint {checkpoint}")]
    Fingerprint { config: String, checkpoint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Fingerprint { .. })
    }
}
