use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("state space mismatch: {left} vs {right}")]
    SpaceMismatch { left: String, right: String },

    /// A distribution or kernel failed its normalization / sign checks.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Conditioning on a state that carries zero probability.
    #[error("conditioning on zero-probability state: {0}")]
    Conditioning(String),

    /// A forward process reached a state from which the requested transition is undefined.
    #[error("degenerate state: {0}")]
    Degenerate(String),

    /// The generator form does not support the requested operation.
    #[error("unsupported operation: {0}")]
    Capability(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("training diverged after {iterations} iterations: objective {objective} vs initial {initial}")]
    Diverged {
        iterations: usize,
        objective: f64,
        initial: f64,
    },

    #[error("malformed model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
