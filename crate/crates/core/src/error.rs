use crate::types::NodeRef;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("build error: {0}")]
    Build(String),

    #[error("unknown node {0}")]
    UnknownNode(NodeRef),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("mixed-task batch: {0}")]
    MixedTask(String),

    #[error("degenerate embedding for {node} at t={timestamp} (norm {norm:e})")]
    DegenerateEmbedding {
        node: NodeRef,
        timestamp: f64,
        norm: f64,
    },

    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },

    #[error("mining error: {0}")]
    Mining(String),

    #[error("generation error on day {day}: {reason}")]
    Generation { day: usize, reason: String },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
