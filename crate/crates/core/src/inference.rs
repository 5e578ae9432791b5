//! Confidence intervals for a constant effect by inverting one-sided tests.
//!
//! For each `τ` on a grid the outcomes are shifted to `Y − D(Z)τ` and the sharp
//! null of no effect is tested in both directions. `τ` is retained when neither
//! one-sided p-value falls to `(1 − level) / 2`.

use crate::assignment::{AssignmentModel, ObservedData};
use crate::conditioning::Partition;
use crate::engine::{imputed_statistic, Mode, Orientation, ReferenceSet, Statistic};
use crate::error::{CrtError, Result};
use crate::exec;
use crate::hypothesis::{ExposureMap, NullHypothesis};

pub const DEFAULT_GRID_POINTS: usize = 201;
pub const DEFAULT_GRID_HALF_WIDTH_SDS: f64 = 5.0;
/// Times the default grid is doubled while a retained point sits on its edge.
pub const MAX_GRID_WIDENINGS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub grid: Vec<f64>,
    /// p-values against effects larger than `τ`; small values exclude `τ` from below.
    pub p_lower: Vec<f64>,
    /// p-values against effects smaller than `τ`; small values exclude `τ` from above.
    pub p_upper: Vec<f64>,
    pub retained: Vec<bool>,
    /// Hull of the retained grid points; `None` when nothing is retained.
    pub interval: Option<(f64, f64)>,
    pub level: f64,
    pub one_sided_alpha: f64,
    /// Observed statistic on unshifted outcomes.
    pub estimate: f64,
    pub contiguous: bool,
    /// Grid indices `i` where a p-value profile moves the wrong way between
    /// `i` and `i + 1` (`p_lower` decreasing or `p_upper` increasing).
    pub monotonicity_violations: Vec<usize>,
    pub mode: Mode,
    pub seed: u64,
}

impl InversionResult {
    pub fn retained_points(&self) -> Vec<f64> {
        self.grid
            .iter()
            .zip(&self.retained)
            .filter(|(_, &r)| r)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// `points` evenly spaced values spanning `center ± half_width`.
pub fn symmetric_grid(center: f64, half_width: f64, points: usize) -> Vec<f64> {
    let step = 2.0 * half_width / (points - 1) as f64;
    (0..points)
        .map(|i| center - half_width + step * i as f64)
        .collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 3 {
        return Err(CrtError::Argument(
            "inversion grid needs at least 3 points".into(),
        ));
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CrtError::Argument(
            "inversion grid must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Inverts the two one-sided tests of `Y_i(z) = Y_i(0) + τ D_i(z)` over `grid`.
///
/// Without a grid, [`DEFAULT_GRID_POINTS`] points span the observed statistic
/// plus or minus [`DEFAULT_GRID_HALF_WIDTH_SDS`] standard deviations of its
/// randomization distribution, doubled while an end point is retained. Every grid point uses the same reference
/// assignments, so Monte Carlo profiles share their draws.
#[allow(clippy::too_many_arguments)]
pub fn invert_constant_effect(
    model: &AssignmentModel,
    partition: &Partition,
    exposure: &ExposureMap,
    statistic: &Statistic,
    observed: &ObservedData,
    grid: Option<&[f64]>,
    level: f64,
    mode: Mode,
    seed: u64,
) -> Result<InversionResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CrtError::Argument(format!("level {level} outside (0, 1)")));
    }
    if let Some(g) = grid {
        check_grid(g)?;
    }
    let n = observed.n_units();
    let null = NullHypothesis::fisher_sharp(n);
    let reference = ReferenceSet::build(model, partition, &observed.assignment, mode, seed)?;
    let d_obs = exposure.profile_f64(&observed.assignment);
    let key = &reference.cell;

    let evaluate_all = |data: &ObservedData| -> Result<(f64, Vec<f64>)> {
        let t_obs = imputed_statistic(&null, statistic, data, key, &data.assignment)?;
        let values = exec::try_map_slice(&reference.assignments, |z| {
            imputed_statistic(&null, statistic, data, key, z)
        })?;
        Ok((t_obs, values))
    };
    let shifted = |tau: f64| {
        let mut data = observed.clone();
        for (y, d) in data.outcomes.iter_mut().zip(&d_obs) {
            *y -= tau * d;
        }
        data
    };

    let (estimate, base_values) = evaluate_all(observed)?;
    // statistic of the observed exposure vector, for linear statistics
    let slope = if statistic.is_linear() {
        let mut data = observed.clone();
        data.outcomes = d_obs.clone();
        Some(evaluate_all(&data)?)
    } else {
        None
    };

    let one_sided_alpha = (1.0 - level) / 2.0;
    let profile_on = |grid: &[f64]| -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
        let profile = exec::try_map_slice(grid, |&tau| -> Result<(f64, f64)> {
            let (t_obs, values) = match &slope {
                Some((b_obs, b)) => (
                    estimate - tau * b_obs,
                    base_values
                        .iter()
                        .zip(b)
                        .map(|(a, b)| a - tau * b)
                        .collect::<Vec<_>>(),
                ),
                None if tau == 0.0 => (estimate, base_values.clone()),
                None => evaluate_all(&shifted(tau))?,
            };
            Ok((
                reference.p_value(Orientation::LargeIsExtreme, t_obs, &values),
                reference.p_value(Orientation::SmallIsExtreme, t_obs, &values),
            ))
        })?;
        let (p_lower, p_upper): (Vec<f64>, Vec<f64>) = profile.into_iter().unzip();
        let retained = p_lower
            .iter()
            .zip(&p_upper)
            .map(|(&lo, &up)| lo > one_sided_alpha && up > one_sided_alpha)
            .collect();
        Ok((p_lower, p_upper, retained))
    };

    let (grid, (p_lower, p_upper, retained)) = match grid {
        Some(g) => (g.to_vec(), profile_on(g)?),
        None => {
            let (_, sd) = reference.moments(&base_values);
            let mut half = if sd.is_finite() && sd > 0.0 {
                DEFAULT_GRID_HALF_WIDTH_SDS * sd
            } else {
                1.0
            };
            let mut widenings = 0;
            loop {
                let g = symmetric_grid(estimate, half, DEFAULT_GRID_POINTS);
                let profile = profile_on(&g)?;
                let at_edge = profile.2[0] || profile.2[g.len() - 1];
                if !at_edge || widenings == MAX_GRID_WIDENINGS {
                    break (g, profile);
                }
                half *= 2.0;
                widenings += 1;
            }
        }
    };
    let kept: Vec<usize> = (0..grid.len()).filter(|&i| retained[i]).collect();
    let interval = match (kept.first(), kept.last()) {
        (Some(&a), Some(&b)) => Some((grid[a], grid[b])),
        _ => None,
    };
    let contiguous = kept.windows(2).all(|w| w[1] == w[0] + 1);
    let monotonicity_violations = (0..grid.len() - 1)
        .filter(|&i| p_lower[i + 1] < p_lower[i] || p_upper[i + 1] > p_upper[i])
        .collect();
    Ok(InversionResult {
        grid,
        p_lower,
        p_upper,
        retained,
        interval,
        level,
        one_sided_alpha,
        estimate,
        contiguous,
        monotonicity_violations,
        mode,
        seed,
    })
}
