//! Classical procedures expressed as (quasi-)randomization tests.

pub mod conformal;
pub mod fisher;
pub mod independence;

pub use conformal::{
    conformal_p_value, prediction_set, weighted_conformal_p_value, weighted_conformal_weights,
    ConformalProblem, LeastSquaresResiduals, PredictionSet, ScoreProcedure,
};
pub use fisher::{fisher_exact, n11_statistic, Side, TwoByTwoTable};
pub use independence::{
    cond_independence_test, correlation_statistic, independence_permutation_test, ConditionalLaw,
};
