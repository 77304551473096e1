use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid schedule `{input}`: {reason}")]
    Schedule { input: String, reason: String },

    #[error("operator is not positive definite: curvature {curvature:e} at CG iteration {iteration}")]
    NotPositiveDefinite { curvature: f64, iteration: u64 },

    #[error("problem not admissible: {0}")]
    Inadmissible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("horizon {horizon} exceeds the configured cap {cap}")]
    HorizonTooLarge { horizon: u64, cap: u64 },

    #[error("non-finite hypergradient at outer iteration {0}")]
    NonFinite(usize),

    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
