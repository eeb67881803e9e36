//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("token id {id} out of range for vocab size {vocab}")]
    Vocab { id: u32, vocab: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("inverted span: start {start} > end {end}")]
    InvertedSpan { start: usize, end: usize },
    #[error("corpus generation error: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
