use thiserror::Error;

use crate::assignment::Assignment;

/// Errors raised while building designs or computing randomization p-values.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrtError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("assignment mechanism must be positive everywhere: {0}")]
    Positivity(String),

    #[error(
        "restriction is infeasible: no assignment has balance <= {threshold} (minimum is {min_balance})"
    )]
    InfeasibleRestriction { threshold: f64, min_balance: f64 },

    #[error("space has {size} assignments, above the enumeration limit {limit}; use Monte Carlo mode")]
    EnumerationLimit { size: u128, limit: u128 },

    #[error("assignment space cannot be enumerated (sampling-only model)")]
    NotEnumerable,

    #[error("assignment {0:?} is not in the assignment space")]
    NotInSpace(Assignment),

    #[error("unit {unit} is not imputable")]
    UndefinedOutcome { unit: usize },

    #[error("statistic read unit {unit}, which is not imputable between {observed:?} and {candidate:?}")]
    Imputability {
        unit: usize,
        observed: Assignment,
        candidate: Assignment,
    },

    #[error("unsupported null hypothesis: {0}")]
    UnsupportedNull(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate statistic: {0}")]
    DegenerateStatistic(String),

    #[error("design matrix is rank deficient; collinear columns: {}", .columns.join(", "))]
    Collinear { columns: Vec<String> },

    #[error("conditioning set sampler is impractical: acceptance rate {rate:e} over {probes} proposals; use exact mode or a coarser partition")]
    ImpracticalConditioning { rate: f64, probes: usize },

    #[error("conditioning value {0:?} has zero probability")]
    UnreachableConditioningValue(Vec<i64>),

    #[error("statistic registry: {0}")]
    Registry(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("model fit failed: {0}")]
    Fit(String),
}

pub type Result<T, E = CrtError> = std::result::Result<T, E>;
