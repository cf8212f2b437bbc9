use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },
    #[error("optimizer state: {0}")]
    State(String),
    #[error("no exemplar available for intent {0}")]
    NoExemplar(String),
    #[error("invalid intent: {0}")]
    InvalidIntent(String),
    #[error("input too long: {len} tokens exceeds the limit of {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
