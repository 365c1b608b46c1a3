use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("invalid history: {0}")]
    InvalidHistory(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("zero observation probability at step {step} (z={z} -> z'={z_next}, a={action})")]
    ZeroObservationProbability {
        step: usize,
        z: usize,
        z_next: usize,
        action: usize,
    },

    #[error("iteration limit reached after {iterations} sweeps (residual {residual:e})")]
    MaxIterExceeded { iterations: usize, residual: f64 },

    #[error("objective is not finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("{0}")]
    Undefined(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("data unavailable: {0}")]
    DataUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
