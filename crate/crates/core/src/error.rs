use thiserror::Error;

#[derive(Debug, Error)]
pub enum LaocError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid safety parameters: {0}")]
    InvalidSafety(String),

    /// The safe action set came out empty. Only reachable when the previous
    /// action was taken outside its own safe set.
    #[error("safe action set is empty at round {round}: {detail}")]
    EmptySet { round: usize, detail: String },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LaocError>;

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(LaocError::InvalidInput(format!("{name} is not finite ({value})")))
    }
}
