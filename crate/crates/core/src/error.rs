use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // data validation
    #[error("unit {row} ({id}) is in the study sample but has no outcome")]
    MissingOutcome { row: usize, id: String },
    #[error("study sample has no {arm} units")]
    EmptyArm { arm: &'static str },
    #[error("column `{column}` row {row}: expected 0 or 1, got {value}")]
    NonBinaryIndicator {
        column: &'static str,
        row: usize,
        value: f64,
    },
    #[error("covariate {col} of row {row} is not finite")]
    NonFiniteCovariate { row: usize, col: usize },
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("csv: {0}")]
    Csv(String),

    // estimands
    #[error("estimand {0} needs a propensity vector")]
    MissingPropensity(&'static str),
    #[error("estimand {0} needs a sampling-probability vector")]
    MissingSamplingModel(&'static str),
    #[error("target weights are empty: {0}")]
    EmptyTarget(String),
    #[error("subset size {size} is invalid for a study sample of {available} units")]
    InvalidSubsetSize { size: usize, available: usize },

    // linear algebra
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    AsymmetricInput(f64),
    #[error("matrix is not positive definite within a jitter budget of {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("sample covariance is degenerate even after ridging")]
    DegenerateCovariance,

    // tuning / models
    #[error("arm {arm} has {size} units, at least {required} are needed")]
    ArmTooSmall {
        arm: u8,
        size: usize,
        required: usize,
    },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // optimization
    #[error("invalid quadratic program: {0}")]
    InvalidProblem(String),
    #[error("every kernel in the fallback ladder failed: {}", format_ladder(.0))]
    AllDegreesFailed(Vec<crate::kom::LadderAttempt>),

    // estimation
    #[error("weights violate the arm-sum constraint: {0}")]
    WeightConstraintViolated(String),
}

fn format_ladder(attempts: &[crate::kom::LadderAttempt]) -> String {
    attempts
        .iter()
        .map(|a| format!("{} -> {}", a.kernel, a.outcome))
        .collect::<Vec<_>>()
        .join("; ")
}
