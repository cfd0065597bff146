//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("MIDI parse error at byte {offset}: {message}")]
    MidiParse { offset: usize, message: String },

    #[error("score contains no notes")]
    EmptyScore,

    #[error("invalid score: {0}")]
    InvalidScore(String),

    #[error("token grammar violation at index {index}: {message}")]
    Grammar { index: usize, message: String },

    #[error("token text parse error at line {line}: {message}")]
    TokenText { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("generation did not reach EOS within {max_tokens} tokens")]
    Truncated {
        max_tokens: usize,
        partial: Box<crate::generate::GenerationOutput>,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
