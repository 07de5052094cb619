use thiserror::Error;

/// Errors raised across the solver and its checks.
#[derive(Debug, Error)]
pub enum KbError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration failed: {0}")]
    IntegrationFailure(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("near-vacuum smallness violated: norm {norm:e} exceeds threshold 1/(4k) = {threshold:e}")]
    SmallnessViolated { norm: f64, threshold: f64 },

    #[error("barrier amplitude blows up at t = {critical_t:e} (boundedness margin {margin:e} <= 1)")]
    BlowUp { critical_t: f64, margin: f64 },

    #[error("inequality violated: ratio {ratio:e} at {location}")]
    InequalityViolated { ratio: f64, location: String },

    #[error("monotone iteration order violated at iteration {iteration}: {detail}")]
    IterationOrder { iteration: usize, detail: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, KbError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(KbError::Domain(msg.into()))
}
