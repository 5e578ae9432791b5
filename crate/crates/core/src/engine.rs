//! Conditional randomization test p-values.
//!
//! The p-value of a CRT compares the observed statistic with its distribution
//! over the observed assignment's conditioning cell:
//!
//! ```text
//! p = Σ_{z* ∈ S} π(z*) 1{T(z*) ◁ T(Z)} / Σ_{z* ∈ S} π(z*)
//! ```
//!
//! where `◁` is `≤` for [`Orientation::SmallIsExtreme`] and `≥` otherwise,
//! with ties counted. Candidate statistics are computed from imputed outcomes,
//! so a statistic that reads a non-imputable unit fails loudly instead of
//! silently using an unknown potential outcome.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::assignment::{stream_rng, Assignment, AssignmentModel, CrtRng, ObservedData, OutcomeSchedule};
use crate::conditioning::{
    bayes_conditional_density, CellKey, ConditioningVariable, Partition, PartitionKind,
};
use crate::error::{CrtError, Result};
use crate::exec;
use crate::hypothesis::{NullHypothesis, PartialOutcomes};

/// Maximum number of statistic values carried in a report.
pub const DISTRIBUTION_SAMPLE_CAP: usize = 10_000;

/// Proposals drawn to estimate the acceptance rate of a rejection sampler.
pub const REJECTION_PROBE: usize = 100_000;

/// Below this acceptance rate Monte Carlo conditioning by rejection is refused.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-4;

// Stream ids reserved outside the per-resample range.
const PROBE_STREAM: u64 = u64::MAX;
const G_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    /// Small statistics are evidence against the null (`T(z*) ≤ T(Z)` counts).
    #[default]
    SmallIsExtreme,
    /// Large statistics are evidence against the null (`T(z*) ≥ T(Z)` counts).
    LargeIsExtreme,
}

impl Orientation {
    /// Whether `candidate` is at least as extreme as `observed`.
    pub fn at_least_as_extreme(self, candidate: f64, observed: f64) -> bool {
        match self {
            Orientation::SmallIsExtreme => candidate <= observed,
            Orientation::LargeIsExtreme => candidate >= observed,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Orientation::SmallIsExtreme => Orientation::LargeIsExtreme,
            Orientation::LargeIsExtreme => Orientation::SmallIsExtreme,
        }
    }
}

/// What a statistic sees for one candidate assignment.
pub struct StatInput<'a> {
    /// Conditioning cell key (or post-randomized value `g`).
    pub cell: &'a CellKey,
    pub assignment: &'a Assignment,
    pub outcomes: &'a PartialOutcomes,
    pub covariates: Option<&'a [Vec<f64>]>,
}

type StatFn = Arc<dyn Fn(&StatInput<'_>) -> Result<f64> + Send + Sync>;

/// A test statistic `T_m(z*, ·)` with its orientation.
///
/// The same function is used for every assignment of a cell; it may depend on
/// the cell through [`StatInput::cell`].
#[derive(Clone)]
pub struct Statistic {
    name: String,
    f: StatFn,
    orientation: Orientation,
    linear: bool,
}

impl fmt::Debug for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Statistic")
            .field("name", &self.name)
            .field("orientation", &self.orientation)
            .finish()
    }
}

impl Statistic {
    pub fn new<F>(name: impl Into<String>, orientation: Orientation, f: F) -> Self
    where
        F: Fn(&StatInput<'_>) -> Result<f64> + Send + Sync + 'static,
    {
        Statistic {
            name: name.into(),
            f: Arc::new(f),
            orientation,
            linear: false,
        }
    }

    /// Declares the statistic linear in the outcome values for a fixed
    /// assignment and defined-unit mask. Test inversion uses this to avoid
    /// re-evaluating the statistic at every grid point.
    pub fn declare_linear(mut self) -> Self {
        self.linear = true;
        self
    }

    pub fn is_linear(&self) -> bool {
        self.linear
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    /// `-T` with the opposite orientation; yields identical p-values.
    pub fn negated(&self) -> Statistic {
        let f = self.f.clone();
        Statistic {
            name: format!("-{}", self.name),
            f: Arc::new(move |input| f(input).map(|t| -t)),
            orientation: self.orientation.flipped(),
            linear: self.linear,
        }
    }

    pub fn evaluate(&self, input: &StatInput<'_>) -> Result<f64> {
        let t = (self.f)(input)?;
        if t.is_nan() {
            return Err(CrtError::DegenerateStatistic(format!(
                "{} evaluated to NaN at {:?}",
                self.name, input.assignment
            )));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Exact,
    MonteCarlo { resamples: usize },
}

/// Result of one conditional randomization test.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueReport {
    pub p: f64,
    /// Key of the conditioning cell, or the realized `g` for post-randomized tests.
    pub cell: CellKey,
    /// Dense cell id when the partition is enumerated.
    pub cell_id: Option<usize>,
    pub cell_size: Option<u128>,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub observed_stat: f64,
    /// Statistic values of the randomization distribution, at most
    /// [`DISTRIBUTION_SAMPLE_CAP`], in enumeration or resampling order.
    pub distribution: Vec<f64>,
}

fn with_pair(err: CrtError, observed: &Assignment, candidate: &Assignment) -> CrtError {
    match err {
        CrtError::UndefinedOutcome { unit } => CrtError::Imputability {
            unit,
            observed: observed.clone(),
            candidate: candidate.clone(),
        },
        other => other,
    }
}

/// Statistic at `candidate`, computed from outcomes imputed under `null`.
pub fn imputed_statistic(
    null: &NullHypothesis,
    statistic: &Statistic,
    observed: &ObservedData,
    cell: &CellKey,
    candidate: &Assignment,
) -> Result<f64> {
    let outcomes = null.impute(observed, candidate)?;
    statistic
        .evaluate(&StatInput {
            cell,
            assignment: candidate,
            outcomes: &outcomes,
            covariates: observed.covariates.as_deref(),
        })
        .map_err(|e| with_pair(e, &observed.assignment, candidate))
}

// Uniform designs count hits so the p-value is a correctly rounded ratio of integers.
fn weighted_p(orientation: Orientation, observed: f64, values: &[(f64, f64)], uniform: bool) -> f64 {
    if uniform {
        let hits = values
            .iter()
            .filter(|&&(_, t)| orientation.at_least_as_extreme(t, observed))
            .count();
        return hits as f64 / values.len() as f64;
    }
    let mut total = 0.0;
    let mut hit = 0.0;
    for &(w, t) in values {
        total += w;
        if orientation.at_least_as_extreme(t, observed) {
            hit += w;
        }
    }
    hit / total
}

fn cap(values: impl Iterator<Item = f64>) -> Vec<f64> {
    values.take(DISTRIBUTION_SAMPLE_CAP).collect()
}

fn check_member(model: &AssignmentModel, observed: &ObservedData) -> Result<()> {
    if model.contains(&observed.assignment) {
        Ok(())
    } else {
        Err(CrtError::NotInSpace(observed.assignment.clone()))
    }
}

/// Exact p-value by enumerating the observed assignment's cell.
pub fn exact_p_value(
    model: &AssignmentModel,
    partition: &Partition,
    null: &NullHypothesis,
    statistic: &Statistic,
    observed: &ObservedData,
) -> Result<PValueReport> {
    exact_with(model, partition, statistic, observed, |cell, z| {
        imputed_statistic(null, statistic, observed, cell, z)
    })
}

fn exact_with<F>(
    model: &AssignmentModel,
    partition: &Partition,
    statistic: &Statistic,
    observed: &ObservedData,
    eval: F,
) -> Result<PValueReport>
where
    F: Fn(&CellKey, &Assignment) -> Result<f64> + Sync + Send,
{
    check_member(model, observed)?;
    let z_obs = &observed.assignment;
    let id = partition.cell_id(z_obs)?;
    let key = partition.key(z_obs);
    let members = partition.cell_members(id)?;
    let t_obs = eval(&key, z_obs)?;
    let values = exec::try_map_range(members.len(), |j| {
        let i = members[j] as usize;
        let z = model.get(i);
        Ok::<_, CrtError>((model.density_at(i), eval(&key, &z)?))
    })?;
    let p = weighted_p(statistic.orientation(), t_obs, &values, model.is_uniform());
    Ok(PValueReport {
        p,
        cell: key,
        cell_id: Some(id),
        cell_size: Some(members.len() as u128),
        mode: Mode::Exact,
        seed: None,
        observed_stat: t_obs,
        distribution: cap(values.iter().map(|&(_, t)| t)),
    })
}

enum CellSampler<'a> {
    Model,
    Shuffle(&'a Assignment),
    Table {
        members: &'a [u32],
        cumulative: Vec<f64>,
    },
    Rejection(CellKey),
}

// Rejection attempts per draw before giving up; far beyond what the probe admits.
const MAX_REJECTIONS: usize = 100_000_000;

impl CellSampler<'_> {
    fn draw(&self, model: &AssignmentModel, partition: &Partition, rng: &mut CrtRng) -> Result<Assignment> {
        match self {
            CellSampler::Model => Ok(model.sample(rng)),
            CellSampler::Shuffle(z) => {
                let mut labels = z.labels().to_vec();
                labels.shuffle(rng);
                Ok(Assignment::new(labels))
            }
            CellSampler::Table { members, cumulative } => {
                let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                let j = cumulative.partition_point(|&c| c <= u).min(members.len() - 1);
                Ok(model.get(members[j] as usize))
            }
            CellSampler::Rejection(key) => {
                for _ in 0..MAX_REJECTIONS {
                    let z = model.sample(rng);
                    if partition.key(&z) == *key {
                        return Ok(z);
                    }
                }
                Err(CrtError::ImpracticalConditioning {
                    rate: 0.0,
                    probes: MAX_REJECTIONS,
                })
            }
        }
    }
}

fn multinomial_rearrangements(z: &Assignment) -> Option<u128> {
    let sorted = z.sorted_labels();
    let mut count: u128 = 1;
    let mut run = 0u128;
    for (i, l) in sorted.iter().enumerate() {
        run = if i > 0 && sorted[i - 1] == *l { run + 1 } else { 1 };
        // running product n! / Π k_j! built as Π (i+1)/run
        count = count.checked_mul(i as u128 + 1)? / run;
    }
    Some(count)
}

fn cell_sampler<'a>(
    model: &'a AssignmentModel,
    partition: &'a Partition,
    observed: &'a Assignment,
    seed: u64,
) -> Result<(CellSampler<'a>, Option<u128>, Option<usize>)> {
    match partition.kind() {
        PartitionKind::Unconditional => return Ok((CellSampler::Model, model.size(), Some(0))),
        PartitionKind::OrderStatistics if model.is_exchangeable() => {
            return Ok((
                CellSampler::Shuffle(observed),
                multinomial_rearrangements(observed),
                None,
            ));
        }
        _ => {}
    }
    if model.enumerable_len().is_ok() {
        let id = partition.cell_id(observed)?;
        let members = partition.cell_members(id)?;
        let mut acc = 0.0;
        let cumulative = members
            .iter()
            .map(|&i| {
                acc += model.density_at(i as usize);
                acc
            })
            .collect();
        return Ok((
            CellSampler::Table { members, cumulative },
            Some(members.len() as u128),
            Some(id),
        ));
    }
    let key = partition.key(observed);
    let mut rng = stream_rng(seed, PROBE_STREAM);
    let accepted = (0..REJECTION_PROBE)
        .filter(|_| partition.key(&model.sample(&mut rng)) == key)
        .count();
    let rate = accepted as f64 / REJECTION_PROBE as f64;
    if rate < MIN_ACCEPTANCE_RATE {
        return Err(CrtError::ImpracticalConditioning {
            rate,
            probes: REJECTION_PROBE,
        });
    }
    Ok((CellSampler::Rejection(key), None, None))
}

/// Monte Carlo p-value `(1 + #{b : T(z*_b) ◁ T(Z)}) / (B + 1)` with `B` draws
/// from `π(· | S_Z)`.
///
/// Draw `b` uses its own generator stream derived from `seed`, so the result
/// does not depend on the thread count.
pub fn mc_p_value(
    model: &AssignmentModel,
    partition: &Partition,
    null: &NullHypothesis,
    statistic: &Statistic,
    observed: &ObservedData,
    resamples: usize,
    seed: u64,
) -> Result<PValueReport> {
    check_member(model, observed)?;
    let z_obs = &observed.assignment;
    let key = partition.key(z_obs);
    let t_obs = imputed_statistic(null, statistic, observed, &key, z_obs)?;
    let (sampler, cell_size, cell_id) = if resamples == 0 {
        (CellSampler::Model, None, None)
    } else {
        cell_sampler(model, partition, z_obs, seed)?
    };
    let values = exec::try_map_range(resamples, |b| {
        let mut rng = stream_rng(seed, b as u64);
        let z = sampler.draw(model, partition, &mut rng)?;
        imputed_statistic(null, statistic, observed, &key, &z)
    })?;
    let hits = values
        .iter()
        .filter(|&&t| statistic.orientation().at_least_as_extreme(t, t_obs))
        .count();
    Ok(PValueReport {
        p: (1 + hits) as f64 / (resamples + 1) as f64,
        cell: key,
        cell_id,
        cell_size,
        mode: Mode::MonteCarlo { resamples },
        seed: Some(seed),
        observed_stat: t_obs,
        distribution: cap(values.into_iter()),
    })
}

/// The assignments a test compares against: the enumerated cell with its
/// densities (exact mode) or resampled cell members (Monte Carlo mode).
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub cell: CellKey,
    pub cell_id: Option<usize>,
    pub cell_size: Option<u128>,
    pub mode: Mode,
    pub assignments: Vec<Assignment>,
    /// Densities aligned with `assignments` in exact mode.
    pub weights: Option<Vec<f64>>,
    uniform: bool,
}

impl ReferenceSet {
    pub fn build(
        model: &AssignmentModel,
        partition: &Partition,
        observed: &Assignment,
        mode: Mode,
        seed: u64,
    ) -> Result<ReferenceSet> {
        if !model.contains(observed) {
            return Err(CrtError::NotInSpace(observed.clone()));
        }
        let cell = partition.key(observed);
        match mode {
            Mode::Exact => {
                let id = partition.cell_id(observed)?;
                let members = partition.cell_members(id)?;
                Ok(ReferenceSet {
                    cell,
                    cell_id: Some(id),
                    cell_size: Some(members.len() as u128),
                    mode,
                    assignments: members.iter().map(|&i| model.get(i as usize)).collect(),
                    weights: Some(members.iter().map(|&i| model.density_at(i as usize)).collect()),
                    uniform: model.is_uniform(),
                })
            }
            Mode::MonteCarlo { resamples } => {
                let (sampler, cell_size, cell_id) = if resamples == 0 {
                    (CellSampler::Model, None, None)
                } else {
                    cell_sampler(model, partition, observed, seed)?
                };
                let assignments = exec::try_map_range(resamples, |b| {
                    sampler.draw(model, partition, &mut stream_rng(seed, b as u64))
                })?;
                Ok(ReferenceSet {
                    cell,
                    cell_id,
                    cell_size,
                    mode,
                    assignments,
                    weights: None,
                    uniform: true,
                })
            }
        }
    }

    /// p-value of `observed` against statistic values aligned with `assignments`.
    pub fn p_value(&self, orientation: Orientation, observed: f64, values: &[f64]) -> f64 {
        match &self.weights {
            Some(w) => {
                let pairs: Vec<(f64, f64)> = w.iter().copied().zip(values.iter().copied()).collect();
                weighted_p(orientation, observed, &pairs, self.uniform)
            }
            None => {
                let hits = values
                    .iter()
                    .filter(|&&t| orientation.at_least_as_extreme(t, observed))
                    .count();
                (1 + hits) as f64 / (values.len() + 1) as f64
            }
        }
    }

    /// Mean and standard deviation of `values` under the reference weights.
    pub fn moments(&self, values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let w = |i: usize| self.weights.as_ref().map_or(1.0 / n, |w| w[i]);
        let total: f64 = (0..values.len()).map(w).sum();
        let mean = (0..values.len()).map(|i| w(i) * values[i]).sum::<f64>() / total;
        let var = (0..values.len())
            .map(|i| w(i) * (values[i] - mean).powi(2))
            .sum::<f64>()
            / total;
        (mean, var.sqrt())
    }
}

/// Exact or Monte Carlo p-value according to `mode`.
pub fn p_value(
    model: &AssignmentModel,
    partition: &Partition,
    null: &NullHypothesis,
    statistic: &Statistic,
    observed: &ObservedData,
    mode: Mode,
    seed: u64,
) -> Result<PValueReport> {
    match mode {
        Mode::Exact => exact_p_value(model, partition, null, statistic, observed),
        Mode::MonteCarlo { resamples } => {
            mc_p_value(model, partition, null, statistic, observed, resamples, seed)
        }
    }
}

/// Checks that the p-value computed from `(Z, Y)` through the null's
/// imputation rule equals the p-value computed from the full schedule.
///
/// `Z` is drawn from the model with `seed`. Both routes give the statistic the
/// same imputable units `H(Z, z*)`; only the source of their values differs.
/// Equality is exact and is only guaranteed when `schedule` satisfies `null`.
pub fn imputation_equivalence_check(
    model: &AssignmentModel,
    partition: &Partition,
    null: &NullHypothesis,
    statistic: &Statistic,
    schedule: &OutcomeSchedule,
    seed: u64,
) -> Result<bool> {
    let z = model.sample_seeded(seed);
    let observed = ObservedData::from_schedule(schedule, z);
    let imputed = exact_p_value(model, partition, null, statistic, &observed)?;
    let full = exact_with(model, partition, statistic, &observed, |cell, candidate| {
        let outcomes = PartialOutcomes::masked(
            schedule.evaluate(candidate),
            null.imputable(&observed.assignment, candidate),
        );
        statistic
            .evaluate(&StatInput {
                cell,
                assignment: candidate,
                outcomes: &outcomes,
                covariates: observed.covariates.as_deref(),
            })
            .map_err(|e| with_pair(e, &observed.assignment, candidate))
    })?;
    Ok(imputed.p == full.p)
}

/// Post-randomized CRT: draws `G` from its kernel at the observed assignment
/// and tests under `π(· | G)` with the statistic indexed by `G`.
pub fn post_randomized_p_value(
    model: &AssignmentModel,
    variable: &dyn ConditioningVariable,
    null: &NullHypothesis,
    statistic: &Statistic,
    observed: &ObservedData,
    seed: u64,
    mode: Mode,
) -> Result<PValueReport> {
    check_member(model, observed)?;
    let z_obs = &observed.assignment;
    let g = variable.draw(z_obs, &mut stream_rng(seed, G_STREAM));
    let weights = bayes_conditional_density(model, variable, &g)?;
    let t_obs = imputed_statistic(null, statistic, observed, &g, z_obs)?;
    let support: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    let orientation = statistic.orientation();
    let (p, distribution) = match mode {
        Mode::Exact => {
            let values = exec::try_map_slice(&support, |&i| {
                let t = imputed_statistic(null, statistic, observed, &g, &model.get(i))?;
                Ok::<_, CrtError>((weights[i], t))
            })?;
            (
                weighted_p(orientation, t_obs, &values, false),
                cap(values.iter().map(|&(_, t)| t)),
            )
        }
        Mode::MonteCarlo { resamples } => {
            let mut acc = 0.0;
            let cumulative: Vec<f64> = support
                .iter()
                .map(|&i| {
                    acc += weights[i];
                    acc
                })
                .collect();
            let values = exec::try_map_range(resamples, |b| {
                let mut rng = stream_rng(seed, b as u64);
                let u: f64 = rng.random::<f64>() * acc;
                let j = cumulative.partition_point(|&c| c <= u).min(support.len() - 1);
                imputed_statistic(null, statistic, observed, &g, &model.get(support[j]))
            })?;
            let hits = values
                .iter()
                .filter(|&&t| orientation.at_least_as_extreme(t, t_obs))
                .count();
            (
                (1 + hits) as f64 / (resamples + 1) as f64,
                cap(values.into_iter()),
            )
        }
    };
    Ok(PValueReport {
        p,
        cell: g,
        cell_id: None,
        cell_size: Some(support.len() as u128),
        mode,
        seed: Some(seed),
        observed_stat: t_obs,
        distribution,
    })
}

/// Mean of p-values from independent draws of the conditioning variable.
///
/// The mean is valid up to a factor of two: rejecting when it is at most `α`
/// bounds the type I error by `2α`, so [`AveragedPValue::rejects`] compares it
/// with `α / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragedPValue {
    pub mean: f64,
    pub count: usize,
}

impl AveragedPValue {
    /// Threshold on the mean that yields a level-`alpha` test.
    pub fn threshold(alpha: f64) -> f64 {
        alpha / 2.0
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.mean <= Self::threshold(alpha)
    }
}

pub fn averaged_p_value(reports: &[PValueReport]) -> Result<AveragedPValue> {
    if reports.is_empty() {
        return Err(CrtError::Argument("no p-values to average".into()));
    }
    let mean = reports.iter().map(|r| r.p).sum::<f64>() / reports.len() as f64;
    Ok(AveragedPValue {
        mean,
        count: reports.len(),
    })
}
