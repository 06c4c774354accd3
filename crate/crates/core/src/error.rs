use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("decode error at {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("ingestion error at row {row}: {msg}")]
    Ingestion { row: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown node id: {0}")]
    UnknownNode(String),
    #[error("duplicate image id: {0}")]
    DuplicateId(String),
    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),
    #[error("non-finite loss at step {step} (batch: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
