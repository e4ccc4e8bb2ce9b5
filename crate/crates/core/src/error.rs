use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("improper transfer function: {0}")]
    ImproperTransferFunction(String),

    #[error("pole on the imaginary axis at omega = {omega}")]
    PoleHit { omega: f64 },

    #[error("matrix is not Hurwitz: {0}")]
    NotHurwitz(String),

    #[error("Riccati solve failed after {iterations} iterations (residual {residual:e}): {reason}")]
    Riccati {
        iterations: usize,
        residual: f64,
        reason: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unstable nominal loop: {0}")]
    UnstableLoop(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    #[error("training diverged at episode {episode}, step {step}: {reason}")]
    Divergence {
        episode: usize,
        step: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
