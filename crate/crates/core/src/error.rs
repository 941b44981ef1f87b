use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("query row {row} has no visible key")]
    MaskedRow { row: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("context overflow: {needed} tokens exceed context length {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
