use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed JSON: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: schema violation in field `{field}`: {message}")]
    Schema {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{path}:{line}: duplicate id `{id}`")]
    Duplicate {
        path: String,
        line: usize,
        id: String,
    },

    #[error("dangling reference: records {record_ids:?} point at unknown documents")]
    DanglingReference { record_ids: Vec<String> },

    #[error("records {record_ids:?} have no `{variant}` rewrite")]
    MissingVariant {
        variant: String,
        record_ids: Vec<String>,
    },

    #[error("no entity annotation for record `{record_id}` field `{field}`")]
    MissingEntities { record_id: String, field: String },

    #[error("invalid prompt template: {0}")]
    Template(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("text has no content to embed")]
    ZeroContent,

    #[error("zero vector: {0}")]
    ZeroVector(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("token id {id} is outside the vocabulary (size {size})")]
    OutOfVocab { id: usize, size: usize },

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
