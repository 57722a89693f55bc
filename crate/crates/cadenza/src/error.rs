//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Data failed validation against a vocabulary or schema. `line` is the
    /// 1-based manifest line when the failure is line-addressable.
    #[error("validation error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Validation { line: Option<usize>, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// External chat-completion service failed after retries, or returned
    /// an unusable completion.
    #[error("chat service error: {0}")]
    Chain(String),

    #[error("judge response parse error: {0}")]
    JudgeParse(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation { line: None, msg: msg.into() }
    }

    pub fn validation_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Validation { line: Some(line), msg: msg.into() }
    }

    /// Process exit code for the CLI: 0 success, 2 config/validation,
    /// 3 runtime/numeric, 4 external-service failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Shape(_)
            | Error::Validation { .. }
            | Error::Parse(_)
            | Error::Config(_) => 2,
            Error::Chain(_) => 4,
            _ => 3,
        }
    }
}
