use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("element {0} does not belong to the group")]
    SpecMismatch(String),
    #[error("invalid group spec: {0}")]
    InvalidSpec(String),
    #[error("homogeneous dimension is undefined for free products")]
    UndefinedDimension,
    #[error("cannot parse group element {0:?}")]
    Parse(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("measures live on different groups: {0} vs {1}")]
    SpecMismatch(String, String),
    #[error("weights must be finite and positive, got {0}")]
    BadWeight(f64),
    #[error("measure is not symmetric")]
    NotSymmetric,
    #[error("measure is not a probability measure (mass {0})")]
    NotProbability(f64),
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("support budget of {budget} entries exceeded after {rows} rows")]
    Resource { budget: usize, rows: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("series diverges at r = {r} (r * rho_up = {product})")]
    Diverges { r: f64, product: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("pruning defect dominates the signal at n = {0}")]
    DefectDominates(usize),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Group(#[from] GroupError),
}
