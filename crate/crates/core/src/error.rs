use std::path::PathBuf;

/// Errors surfaced by the pipeline's fallible entry points.
///
/// Shape mismatches inside the differentiable graph are programming errors
/// and panic with a message naming the op and both shapes instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error at {path}: {msg}")]
    Png { path: PathBuf, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
