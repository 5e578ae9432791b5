//! Full conformal prediction, with density-ratio weights for covariate shift.
//!
//! The order of the observations plays the role of the treatment: under
//! exchangeability every ordering is equally likely, so the rank of the test
//! point's residual among all `N` residuals is a randomization p-value for
//! `H0: Y_N = y`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{CrtError, Result};
use crate::exec;
use crate::statistics::ols_fit;

/// Nonconformity scores for all rows, computed by a procedure that is
/// symmetric in its input rows.
pub trait ScoreProcedure: Send + Sync {
    fn scores(&self, x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>>;
}

/// Absolute residuals of a least-squares fit of `y` on an intercept and `x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LeastSquaresResiduals;

impl ScoreProcedure for LeastSquaresResiduals {
    fn scores(&self, x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
        let n = y.len();
        let p = x.first().map_or(0, Vec::len);
        let design = DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { x[r][c - 1] });
        let columns: Vec<String> = std::iter::once("intercept".to_string())
            .chain((0..p).map(|j| format!("x{j}")))
            .collect();
        let fit = ols_fit(&design, &columns, &DVector::from_column_slice(y))
            .map_err(|e| CrtError::Fit(e.to_string()))?;
        Ok(fit.residuals.iter().map(|r| r.abs()).collect())
    }
}

pub type Density = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `N − 1` labelled points and one test covariate row, the last row of `x`.
#[derive(Clone)]
pub struct ConformalProblem {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    score: Arc<dyn ScoreProcedure>,
    /// Test-point density and reference density of the training covariates.
    shift: Option<(Density, Density)>,
}

impl fmt::Debug for ConformalProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConformalProblem")
            .field("n", &self.x.len())
            .field("shifted", &self.shift.is_some())
            .finish()
    }
}

impl ConformalProblem {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, score: Arc<dyn ScoreProcedure>) -> Result<Self> {
        if x.len() != y.len() + 1 {
            return Err(CrtError::Data(format!(
                "expected one more covariate row than outcomes, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        Ok(ConformalProblem {
            x,
            y,
            score,
            shift: None,
        })
    }

    /// Test covariates drawn from `target`, training covariates from `reference`.
    pub fn with_shift(mut self, target: Density, reference: Density) -> Self {
        self.shift = Some((target, reference));
        self
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn observed_outcomes(&self) -> &[f64] {
        &self.y
    }

    /// Scores of all `N` rows with the candidate value in the last row.
    pub fn scores(&self, y_candidate: f64) -> Result<Vec<f64>> {
        let mut y = self.y.clone();
        y.push(y_candidate);
        let s = self.score.scores(&self.x, &y)?;
        if s.len() != self.n() {
            return Err(CrtError::Fit(format!(
                "score procedure returned {} values for {} rows",
                s.len(),
                self.n()
            )));
        }
        Ok(s)
    }
}

/// `#{i : r_i ≥ r_N} / N`; the candidate counts itself, so `p ≥ 1/N`.
pub fn conformal_p_value(problem: &ConformalProblem, y_candidate: f64) -> Result<f64> {
    let r = problem.scores(y_candidate)?;
    let last = r[r.len() - 1];
    Ok(r.iter().filter(|&&v| v >= last).count() as f64 / r.len() as f64)
}

/// `w_i = ρ(x_i) / Σ_j ρ(x_j)` with `ρ = target / reference`; uniform without shift.
pub fn weighted_conformal_weights(problem: &ConformalProblem) -> Result<Vec<f64>> {
    let n = problem.n();
    let Some((target, reference)) = &problem.shift else {
        return Ok(vec![1.0 / n as f64; n]);
    };
    let mut ratios = Vec::with_capacity(n);
    for (i, row) in problem.x.iter().enumerate() {
        let base = reference(row);
        if !(base > 0.0) {
            return Err(CrtError::Positivity(format!(
                "reference density is {base} at row {i}"
            )));
        }
        let top = target(row);
        if !(top >= 0.0) {
            return Err(CrtError::Positivity(format!(
                "target density is {top} at row {i}"
            )));
        }
        ratios.push(top / base);
    }
    let total: f64 = ratios.iter().sum();
    if !(total > 0.0) {
        return Err(CrtError::Positivity(
            "target density vanishes on every row".into(),
        ));
    }
    Ok(ratios.into_iter().map(|r| r / total).collect())
}

/// `Σ_i w_i 1{r_i ≥ r_N}` under weighted exchangeability.
pub fn weighted_conformal_p_value(problem: &ConformalProblem, y_candidate: f64) -> Result<f64> {
    let w = weighted_conformal_weights(problem)?;
    let r = problem.scores(y_candidate)?;
    let last = r[r.len() - 1];
    Ok(r.iter()
        .zip(&w)
        .filter(|(&v, _)| v >= last)
        .map(|(_, &wi)| wi)
        .sum())
}

pub const DEFAULT_CANDIDATE_POINTS: usize = 513;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub grid: Vec<f64>,
    pub p_values: Vec<f64>,
    pub included: Vec<bool>,
    pub alpha: f64,
}

impl PredictionSet {
    /// Smallest and largest included candidate.
    pub fn hull(&self) -> Option<(f64, f64)> {
        let mut kept = self.grid.iter().zip(&self.included).filter(|(_, &k)| k);
        let first = *kept.next()?.0;
        let last = kept.next_back().map_or(first, |(&t, _)| t);
        Some((first, last))
    }
}

/// Candidate grid over the observed outcome range widened by three standard deviations.
pub fn default_candidate_grid(y: &[f64], points: usize) -> Vec<f64> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * sd;
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * sd;
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// `{y : p(y) > α}` on a candidate grid.
pub fn prediction_set(
    problem: &ConformalProblem,
    alpha: f64,
    grid: Option<Vec<f64>>,
    weighted: bool,
) -> Result<PredictionSet> {
    let grid = grid.unwrap_or_else(|| default_candidate_grid(&problem.y, DEFAULT_CANDIDATE_POINTS));
    let p_values = exec::try_map_slice(&grid, |&y| {
        if weighted {
            weighted_conformal_p_value(problem, y)
        } else {
            conformal_p_value(problem, y)
        }
    })?;
    let included = p_values.iter().map(|&p| p > alpha).collect();
    Ok(PredictionSet {
        grid,
        p_values,
        included,
        alpha,
    })
}
