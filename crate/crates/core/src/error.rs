use thiserror::Error;

/// Errors raised anywhere in the prediction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown agent id {0}")]
    UnknownAgent(i64),

    #[error("agent {0} has no valid current state")]
    InvalidCurrentState(i64),

    #[error("invalid scene `{scene}`: {reason}")]
    InvalidScene { scene: String, reason: String },

    #[error("cannot vectorize scene `{scene}`: {reason}")]
    Vectorize { scene: String, reason: String },

    #[error("invalid generator spec: {0}")]
    GeneratorSpec(String),

    #[error("line {line}: malformed record at `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("invalid GMM parameters: {0}")]
    InvalidGmm(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite {what} at decoder layer {layer}")]
    NonFinite { what: String, layer: usize },

    #[error("mismatched scenes: expected `{expected}`, found `{found}`")]
    SceneMismatch { expected: String, found: String },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
