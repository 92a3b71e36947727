use thiserror::Error;

/// Errors raised by the scoring library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("covariate is degenerate (max == min), cannot discretize")]
    DegenerateCovariate,
    #[error("sampling constraint infeasible: {0}")]
    InfeasibleConstraint(String),
    #[error("sampled cell {0:?} has no population members")]
    CellMismatch(Vec<Vec<usize>>),
    #[error("unknown level {level} for variable {variable}")]
    UnknownLevel { variable: usize, level: usize },
    #[error("cell set is empty or has zero population weight")]
    EmptySet,
    #[error("cells without sample observations: {0:?}")]
    UnobservedCell(Vec<usize>),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("missing truth for cell {0}")]
    MissingTruth(usize),
    #[error("tail too small for generalized Pareto fit ({0} excesses)")]
    TailTooSmall(usize),
    #[error("all resampling weights are zero")]
    AllZeroWeights,
    #[error("observed/unobserved sets do not partition the table: {0}")]
    BadPartition(String),
    #[error("missing score for level {0}")]
    MissingLevel(usize),
    #[error("unknown model label {0:?}")]
    UnknownModel(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
