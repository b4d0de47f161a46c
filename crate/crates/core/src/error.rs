use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("character index {0} is outside the 128-symbol alphabet")]
    IndexOutOfRange(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("text too short: need at least {needed} characters, got {got}")]
    TextTooShort { needed: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
    #[error("active models carry no weight; generation paused")]
    ZeroActiveWeight,
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
