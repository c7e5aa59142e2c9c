use thiserror::Error;

/// Error type shared by all engine modules.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("index out of bounds: {0}")]
    Index(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("empty scene: no instances found")]
    EmptyScene,

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
