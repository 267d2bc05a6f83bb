use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{0} is empty")]
    EmptyInput(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("infeasible template partition: {0}")]
    InfeasiblePartition(String),

    #[error("category {category} has {count} members, at least 3 are required for a split")]
    CategoryTooSmall { category: String, count: usize },

    #[error("position {position} out of range for sentence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("model mode mismatch: expected {expected}, found {found}")]
    ModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("vocabulary is missing tokens: {0:?}")]
    VocabularyMismatch(Vec<String>),

    #[error("missing association records: {0:?}")]
    MissingRecords(Vec<String>),

    #[error("mixed-category batch: {0}")]
    MixedBatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("tape is malformed: {0}")]
    Tape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
