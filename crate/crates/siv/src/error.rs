use thiserror::Error;

/// Errors surfaced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum SivError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SivError>;
