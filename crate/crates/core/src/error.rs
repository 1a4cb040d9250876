use thiserror::Error;

pub type Result<T> = std::result::Result<T, DamsError>;

#[derive(Debug, Error)]
pub enum DamsError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("table has no rows")]
    EmptyTable,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("missingness rate for feature {feature} is 1; the corruption map is not invertible")]
    NonInvertibleRates { feature: usize },

    #[error("recovered probability {value:.3e} at support point {index} is negative beyond tolerance")]
    NegativeMass { index: usize, value: f64 },

    #[error("feature {feature} is never nonzero in the source domain; relative missingness is undefined")]
    NeverObserved { feature: usize },

    #[error("normal matrix is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error(
        "relative missingness r[{feature}] = {r:.6} is negative; this algorithm is not applicable"
    )]
    NotApplicable { feature: usize, r: f64 },

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
