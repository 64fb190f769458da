use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {msg} (residual {residual:e})")]
    Numerical { msg: String, residual: f64 },

    #[error("forward trace is stale: recorded for parameter version {trace}, network is at {network}")]
    StaleTrace { trace: u64, network: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated data: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
