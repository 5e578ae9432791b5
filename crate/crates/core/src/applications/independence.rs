//! Permutation tests of independence and conditional independence.
//!
//! Treating the labels `Z` as the randomized variable and setting `Y(z) = Y`
//! turns a test of `Z ⫫ Y` into a randomization test of the sharp null;
//! conditioning on the order statistics of `Z` gives the usual permutation test.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::assignment::{stream_rng, Assignment, AssignmentModel, CrtRng, Label, ObservedData};
use crate::conditioning::Partition;
use crate::engine::{mc_p_value, Mode, PValueReport, StatInput, Statistic, DISTRIBUTION_SAMPLE_CAP};
use crate::error::{CrtError, Result};
use crate::exec;
use crate::hypothesis::{NullHypothesis, PartialOutcomes};

/// Largest sample for which all `N!` permutations are enumerated.
pub const MAX_EXACT_PERMUTATION_UNITS: usize = 8;

/// Pearson correlation of labels and outcomes (zero when either is constant).
pub fn correlation_statistic() -> Statistic {
    Statistic::new("correlation", Default::default(), |inp| {
        let y = inp.outcomes.as_full()?;
        let z: Vec<f64> = inp.assignment.iter().map(|&l| l as f64).collect();
        Ok(pearson(&z, y))
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn check_lengths(z: &[Label], y: &[f64]) -> Result<()> {
    if z.len() != y.len() || z.is_empty() {
        return Err(CrtError::Data(format!(
            "{} labels for {} outcomes",
            z.len(),
            y.len()
        )));
    }
    Ok(())
}

fn evaluate(statistic: &Statistic, z: &Assignment, y: &PartialOutcomes) -> Result<f64> {
    statistic.evaluate(&StatInput {
        cell: &Vec::new(),
        assignment: z,
        outcomes: y,
        covariates: None,
    })
}

fn permuted(z: &[Label], g: &[Label]) -> Assignment {
    Assignment::new(g.iter().map(|&j| z[j as usize]).collect())
}

fn report(
    p: f64,
    mode: Mode,
    seed: Option<u64>,
    observed_stat: f64,
    values: Vec<f64>,
    cell_size: Option<u128>,
) -> PValueReport {
    PValueReport {
        p,
        cell: Vec::new(),
        cell_id: None,
        cell_size,
        mode,
        seed,
        observed_stat,
        distribution: values.into_iter().take(DISTRIBUTION_SAMPLE_CAP).collect(),
    }
}

/// `(1/N!) Σ_g 1{T(Z_g, Y) ◁ T(Z, Y)}` over all permutations `g` (exact mode,
/// `N ≤ 8`), or its add-one Monte Carlo estimate from uniform permutations.
pub fn independence_permutation_test(
    z: &[Label],
    y: &[f64],
    statistic: &Statistic,
    mode: Mode,
    seed: u64,
) -> Result<PValueReport> {
    check_lengths(z, y)?;
    let n = z.len();
    let outcomes = PartialOutcomes::full(y.to_vec());
    let z_obs = Assignment::new(z.to_vec());
    let t_obs = evaluate(statistic, &z_obs, &outcomes)?;
    let orientation = statistic.orientation();
    match mode {
        Mode::Exact => {
            if n > MAX_EXACT_PERMUTATION_UNITS {
                return Err(CrtError::Argument(format!(
                    "exact permutation test enumerates N! orderings and is limited to N <= {MAX_EXACT_PERMUTATION_UNITS}; use Monte Carlo mode"
                )));
            }
            let perms = AssignmentModel::uniform_permutations(n)?;
            let len = perms.enumerable_len()?;
            let values = exec::try_map_range(len, |i| {
                evaluate(statistic, &permuted(z, &perms.get(i)), &outcomes)
            })?;
            let hits = values
                .iter()
                .filter(|&&t| orientation.at_least_as_extreme(t, t_obs))
                .count();
            Ok(report(
                hits as f64 / len as f64,
                mode,
                None,
                t_obs,
                values,
                Some(len as u128),
            ))
        }
        Mode::MonteCarlo { resamples } => {
            let values = exec::try_map_range(resamples, |b| {
                let mut labels = z.to_vec();
                labels.shuffle(&mut stream_rng(seed, b as u64));
                evaluate(statistic, &Assignment::new(labels), &outcomes)
            })?;
            let hits = values
                .iter()
                .filter(|&&t| orientation.at_least_as_extreme(t, t_obs))
                .count();
            Ok(report(
                (1 + hits) as f64 / (resamples + 1) as f64,
                mode,
                Some(seed),
                t_obs,
                values,
                None,
            ))
        }
    }
}

/// Law of one unit's label given its covariate row, as probabilities over
/// labels `0, 1, ..`.
pub type ConditionalLaw = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Sweeps of pairwise swaps per conditional permutation draw.
pub const SWAP_SWEEPS: usize = 50;

const HUB_STREAM: u64 = u64::MAX - 2;

fn draw_label(probs: &[f64], rng: &mut CrtRng) -> Label {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (l, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return l as Label;
        }
    }
    (probs.len() - 1) as Label
}

// Label probabilities, looked up as probs[unit][label].
fn label_table(x: &[Vec<f64>], law: &ConditionalLaw) -> Result<Vec<Vec<f64>>> {
    let table: Vec<Vec<f64>> = x.iter().map(|row| law(row)).collect();
    for (i, p) in table.iter().enumerate() {
        if p.is_empty() || p.iter().any(|&q| !(q >= 0.0)) || !(p.iter().sum::<f64>() > 0.0) {
            return Err(CrtError::Positivity(format!(
                "unit {i}: conditional law must be a nonnegative, nonzero vector"
            )));
        }
    }
    Ok(table)
}

// One sweep: pair units at random and resample each pair's labels from
// their conditional law given the pair's label multiset.
fn swap_sweep(labels: &mut [Label], probs: &[Vec<f64>], rng: &mut CrtRng) {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    for pair in order.chunks_exact(2) {
        let (i, j) = (pair[0], pair[1]);
        let (a, b) = (labels[i] as usize, labels[j] as usize);
        if a == b {
            continue;
        }
        let p_i = |l: usize| probs[i].get(l).copied().unwrap_or(0.0);
        let p_j = |l: usize| probs[j].get(l).copied().unwrap_or(0.0);
        let keep = p_i(a) * p_j(b);
        let swap = p_i(b) * p_j(a);
        if rng.random::<f64>() * (keep + swap) < swap {
            labels.swap(i, j);
        }
    }
}

/// Conditional independence test of `Z ⫫ Y | X` with a known law of `Z | X`.
///
/// Without order-statistics conditioning each label is redrawn independently
/// from its law. With it, draws are rearrangements of `Z` with probability
/// proportional to `Π_i law(x_i)[z_i]`, generated by pairwise-swap chains run
/// from a common hub so that the observed and resampled labels are
/// exchangeable.
#[allow(clippy::too_many_arguments)]
pub fn cond_independence_test(
    z: &[Label],
    y: &[f64],
    x: &[Vec<f64>],
    law: ConditionalLaw,
    statistic: &Statistic,
    resamples: usize,
    seed: u64,
    order_statistics: bool,
) -> Result<PValueReport> {
    check_lengths(z, y)?;
    if x.len() != z.len() {
        return Err(CrtError::Data(format!(
            "{} covariate rows for {} units",
            x.len(),
            z.len()
        )));
    }
    let probs = label_table(x, &law)?;
    let observed = ObservedData::new(Assignment::new(z.to_vec()), y.to_vec()).with_covariates(x.to_vec())?;
    let null = NullHypothesis::fisher_sharp(z.len());
    if !order_statistics {
        let model = AssignmentModel::sampling_only(z.len(), move |rng| {
            Assignment::new(probs.iter().map(|p| draw_label(p, rng)).collect())
        });
        return mc_p_value(
            &model,
            &Partition::unconditional(&model),
            &null,
            statistic,
            &observed,
            resamples,
            seed,
        );
    }
    let outcomes = PartialOutcomes::full(y.to_vec());
    let covariates = Some(x);
    let key: Vec<i64> = observed
        .assignment
        .sorted_labels()
        .iter()
        .map(|&l| l as i64)
        .collect();
    let eval = |labels: &Assignment| {
        statistic.evaluate(&StatInput {
            cell: &key,
            assignment: labels,
            outcomes: &outcomes,
            covariates,
        })
    };
    let t_obs = eval(&observed.assignment)?;
    let mut hub = z.to_vec();
    let mut rng = stream_rng(seed, HUB_STREAM);
    for _ in 0..SWAP_SWEEPS {
        swap_sweep(&mut hub, &probs, &mut rng);
    }
    let values = exec::try_map_range(resamples, |b| {
        let mut labels = hub.clone();
        let mut rng = stream_rng(seed, b as u64);
        for _ in 0..SWAP_SWEEPS {
            swap_sweep(&mut labels, &probs, &mut rng);
        }
        eval(&Assignment::new(labels))
    })?;
    let orientation = statistic.orientation();
    let hits = values
        .iter()
        .filter(|&&t| orientation.at_least_as_extreme(t, t_obs))
        .count();
    Ok(PValueReport {
        p: (1 + hits) as f64 / (resamples + 1) as f64,
        cell: key,
        cell_id: None,
        cell_size: None,
        mode: Mode::MonteCarlo { resamples },
        seed: Some(seed),
        observed_stat: t_obs,
        distribution: values.into_iter().take(DISTRIBUTION_SAMPLE_CAP).collect(),
    })
}
