use std::fmt;

use crate::vocab::Band;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where a token-sequence parse went wrong.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub position: usize,
    pub expected: String,
    pub message: String,
}

impl ParseError {
    pub fn new(position: usize, expected: impl Into<String>, message: impl Into<String>) -> Self {
        Self { position, expected: expected.into(), message: message.into() }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at token {}: expected {}: {}", self.position, self.expected, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid vocabulary layout: {0}")]
    Layout(String),
    #[error("local index {index} out of range for {band} band (size {bound})")]
    OutOfBand { band: Band, index: usize, bound: usize },
    #[error("token id {id} outside vocabulary of size {total}")]
    IdOutOfRange { id: usize, total: usize },
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("parse error {0}")]
    Parse(#[from] ParseError),
    #[error("codec: {0}")]
    Codec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{what} has {len} tokens, cap is {cap}; re-chunk before building")]
    Truncation { what: String, len: usize, cap: usize },
    #[error("task: {0}")]
    Task(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
