use thiserror::Error;

/// Errors surfaced by every layer of the pipeline.
#[derive(Debug, Error)]
pub enum DvtError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape in {op}: {details}")]
    InvalidShape { op: &'static str, details: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("attention requires at least one key row")]
    EmptyKeys,

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{path}: {details}")]
    Format { path: String, details: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DvtError>;
