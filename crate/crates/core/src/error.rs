use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("delay index {index} outside the delay grid of size {grid}")]
    InvalidDelaySample { index: usize, grid: usize },

    #[error("factor is rank deficient (smallest singular value {sigma_min:e} <= {threshold:e})")]
    SingularPoint { sigma_min: f64, threshold: f64 },

    #[error("retraction produced a rank-deficient factor (step {step:e})")]
    DegenerateStep { step: f64 },

    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("operator norm estimation failed: {0}")]
    LipschitzEstimate(String),

    #[error("dense operator needs {required} entries, budget is {budget}")]
    DenseBudget { required: usize, budget: usize },

    #[error("alignment search did not converge (residual {residual:e})")]
    AlignmentFailed { residual: f64 },

    #[error("overlapping or incomplete block partition: {0}")]
    BadPartition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
