use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidCorpusSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("mode {mode} is not supported by model family {family}")]
    UnsupportedMode { family: String, mode: String },

    #[error("sgdet requires a pre-trained detector stub")]
    DetectorNotTrained,

    #[error("K must be positive, got {0}")]
    InvalidK(i64),

    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("sample {sample_id} failed validation: {violations:?}")]
    InvalidSample { sample_id: u64, violations: Vec<String> },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
