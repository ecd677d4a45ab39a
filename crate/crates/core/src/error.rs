use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown source `{0}`")]
    UnknownSource(String),

    #[error("invalid sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("zero-norm vector has no cosine similarity")]
    ZeroVector,

    #[error("embedding header error: {0}")]
    Header(String),

    #[error("missing feature row for `{0}`")]
    MissingFeature(String),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("missing answer for `{0}`")]
    MissingAnswer(String),

    #[error("no samples to score")]
    EmptyDataset,

    #[error("backend transport error: {0}")]
    Transport(String),

    #[error("backend returned status {status}: {message}")]
    Backend { status: u16, message: String },

    #[error("query `{query}` routed {route} (m2 similarity {sim}) failed: {source}")]
    Inference {
        query: String,
        route: &'static str,
        sim: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("stale artifact {path}: built for config {found}, current config is {expected}")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
