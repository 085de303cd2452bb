use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid schema at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("no schema node at path `{0}`")]
    NotFound(String),

    #[error("schema node `{0}` is a leaf")]
    LeafNode(String),

    #[error("malformed model output: {0}")]
    MalformedOutput(String),

    #[error("model output violates the response format: {0}")]
    SchemaViolation(String),

    #[error("no object literal found in model output")]
    Unrepairable,

    #[error("backend error{}: {cause}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Backend { status: Option<u16>, cause: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm embedding vector at position {0}")]
    ZeroVector(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn backend(cause: impl Into<String>) -> Self {
        Error::Backend { status: None, cause: cause.into() }
    }

    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { path: path.into(), message: message.into() }
    }
}
