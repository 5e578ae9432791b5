//! Finite assignment spaces and known assignment mechanisms.
//!
//! An [`AssignmentModel`] is a finite space of label sequences together with
//! a strictly positive density and a seeded generator. Spaces are indexed:
//! every member has a rank in a fixed enumeration order, which is what cell
//! ids, graph exports and parallel enumeration are keyed on. Nothing is
//! materialized unless a caller asks for it.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CrtError, Result};

pub type Label = i32;

/// Generator type used for every random draw in the crate.
pub type CrtRng = ChaCha8Rng;

/// Largest space that may be enumerated lazily (2^24 assignments).
pub const ENUMERATION_LIMIT: u128 = 1 << 24;

/// Largest space that [`AssignmentModel::members`] will collect into memory.
pub const MATERIALIZE_LIMIT: u128 = 1 << 16;

/// Most units a binary design may have while staying enumerable.
pub const MAX_ENUMERABLE_UNITS: usize = 24;

/// A seeded generator on its own stream.
///
/// Resample `b` of a Monte Carlo run uses stream `b`, so draws do not depend on
/// how work is split across threads.
pub fn stream_rng(seed: u64, stream: u64) -> CrtRng {
    let mut rng = CrtRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One realization of the treatment: a fixed-length sequence of integer labels.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment(Vec<Label>);

impl Assignment {
    pub fn new(labels: Vec<Label>) -> Self {
        Assignment(labels)
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn into_labels(self) -> Vec<Label> {
        self.0
    }

    /// Number of nonzero labels.
    pub fn count_nonzero(&self) -> usize {
        self.0.iter().filter(|&&l| l != 0).count()
    }

    pub fn sorted_labels(&self) -> Vec<Label> {
        let mut v = self.0.clone();
        v.sort_unstable();
        v
    }
}

impl Deref for Assignment {
    type Target = [Label];
    fn deref(&self) -> &[Label] {
        &self.0
    }
}

impl From<Vec<Label>> for Assignment {
    fn from(v: Vec<Label>) -> Self {
        Assignment(v)
    }
}

impl From<&[Label]> for Assignment {
    fn from(v: &[Label]) -> Self {
        Assignment(v.to_vec())
    }
}

impl fmt::Debug for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

type ScheduleFn = Arc<dyn Fn(&Assignment) -> Vec<f64> + Send + Sync>;

/// Full table of potential outcomes: the outcome vector under every assignment.
///
/// Only simulators and test oracles can hold one.
#[derive(Clone)]
pub struct OutcomeSchedule {
    n_units: usize,
    eval: ScheduleFn,
}

impl OutcomeSchedule {
    pub fn new<F>(n_units: usize, eval: F) -> Self
    where
        F: Fn(&Assignment) -> Vec<f64> + Send + Sync + 'static,
    {
        OutcomeSchedule {
            n_units,
            eval: Arc::new(eval),
        }
    }

    /// Schedule with no effect of any kind: `Y(z) = y` for every `z`.
    pub fn constant(y: Vec<f64>) -> Self {
        let n = y.len();
        OutcomeSchedule::new(n, move |_| y.clone())
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn evaluate(&self, z: &Assignment) -> Vec<f64> {
        let y = (self.eval)(z);
        debug_assert_eq!(y.len(), self.n_units);
        y
    }
}

impl fmt::Debug for OutcomeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OutcomeSchedule")
            .field("n_units", &self.n_units)
            .finish()
    }
}

/// Realized assignment, outcomes and (fixed) covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedData {
    pub assignment: Assignment,
    pub outcomes: Vec<f64>,
    pub covariates: Option<Vec<Vec<f64>>>,
}

impl ObservedData {
    pub fn new(assignment: Assignment, outcomes: Vec<f64>) -> Self {
        ObservedData {
            assignment,
            outcomes,
            covariates: None,
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<Vec<f64>>) -> Result<Self> {
        if covariates.len() != self.outcomes.len() {
            return Err(CrtError::Data(format!(
                "{} covariate rows for {} units",
                covariates.len(),
                self.outcomes.len()
            )));
        }
        self.covariates = Some(covariates);
        Ok(self)
    }

    /// Observed data generated by `schedule` under `z`.
    pub fn from_schedule(schedule: &OutcomeSchedule, z: Assignment) -> Self {
        let outcomes = schedule.evaluate(&z);
        ObservedData::new(z, outcomes)
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.len()
    }
}

type Sampler = Arc<dyn Fn(&mut CrtRng) -> Assignment + Send + Sync>;
type Balance = Arc<dyn Fn(&Assignment) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Density {
    Uniform,
    /// Independent Bernoulli(p) per coordinate; binary product spaces only.
    Bernoulli(f64),
}

#[derive(Clone)]
enum Space {
    /// All label vectors in `{0, .., k-1}^n`, lexicographic order.
    Product {
        n: usize,
        k: u32,
        density: Density,
    },
    /// Binary vectors with exactly `ones` ones, lexicographic order, uniform.
    FixedCount {
        n: usize,
        ones: usize,
    },
    /// Permutations of `0..n`, lexicographic order, uniform.
    Permutations {
        n: usize,
    },
    Restricted(Arc<Restricted>),
    /// A space too large to index, known only through its sampler.
    Lazy {
        n: usize,
        sampler: Sampler,
    },
}

struct Restricted {
    parent: AssignmentModel,
    balance: Balance,
    threshold: f64,
    members: Vec<Assignment>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    lookup: HashMap<Assignment, usize>,
    /// Parent mass of the acceptance region.
    acceptance: f64,
}

// Below this acceptance rate the restricted generator draws from the
// renormalized table instead of rejecting; both have the same law.
const MIN_REJECTION_RATE: f64 = 1e-4;

/// Finite assignment space with a known, strictly positive density.
///
/// Cheap to clone; safe to share across threads.
#[derive(Clone)]
pub struct AssignmentModel {
    space: Space,
}

impl fmt::Debug for AssignmentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.space {
            Space::Product { n, k, density } => {
                write!(f, "Product(n={n}, k={k}, {density:?})")
            }
            Space::FixedCount { n, ones } => write!(f, "CompleteRandomization(n={n}, treated={ones})"),
            Space::Permutations { n } => write!(f, "Permutations(n={n})"),
            Space::Restricted(r) => write!(
                f,
                "Restricted(size={}, threshold={}, parent={:?})",
                r.members.len(),
                r.threshold,
                r.parent
            ),
            Space::Lazy { n, .. } => write!(f, "Lazy(n={n})"),
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128)
        .try_fold(1u128, |acc, i| acc.checked_mul(i))
        .unwrap_or(u128::MAX)
}

fn check_units(n_units: usize) -> Result<()> {
    if n_units > MAX_ENUMERABLE_UNITS {
        return Err(CrtError::Config(format!(
            "{n_units} units exceeds the enumeration limit of {MAX_ENUMERABLE_UNITS} units (2^24 assignments); use the lazy constructor for Monte Carlo"
        )));
    }
    Ok(())
}

impl AssignmentModel {
    /// Completely randomized design: exactly `n_treated` of `n_units` treated, uniformly.
    pub fn complete_randomization(n_units: usize, n_treated: usize) -> Result<Self> {
        check_units(n_units)?;
        Self::complete_randomization_lazy(n_units, n_treated)
    }

    /// As [`Self::complete_randomization`] without the unit bound; enumeration
    /// is refused later if the space is too large.
    pub fn complete_randomization_lazy(n_units: usize, n_treated: usize) -> Result<Self> {
        if n_treated > n_units {
            return Err(CrtError::Config(format!(
                "n_treated = {n_treated} exceeds n_units = {n_units}"
            )));
        }
        Ok(AssignmentModel {
            space: Space::FixedCount {
                n: n_units,
                ones: n_treated,
            },
        })
    }

    /// Independent Bernoulli(`prob`) treatment for each unit.
    pub fn bernoulli(n_units: usize, prob: f64) -> Result<Self> {
        check_units(n_units)?;
        Self::bernoulli_lazy(n_units, prob)
    }

    pub fn bernoulli_lazy(n_units: usize, prob: f64) -> Result<Self> {
        if !(prob > 0.0 && prob < 1.0) {
            return Err(CrtError::Positivity(format!(
                "Bernoulli probability must lie strictly in (0, 1), got {prob}"
            )));
        }
        Ok(AssignmentModel {
            space: Space::Product {
                n: n_units,
                k: 2,
                density: Density::Bernoulli(prob),
            },
        })
    }

    /// Uniformly random crossover order of `n_clusters` clusters (stepped-wedge).
    ///
    /// An assignment lists clusters in the order they cross over.
    pub fn crossover_orders(n_clusters: usize) -> Result<Self> {
        if !(2..=8).contains(&n_clusters) {
            return Err(CrtError::Config(format!(
                "crossover designs need 2..=8 clusters, got {n_clusters}"
            )));
        }
        Ok(AssignmentModel {
            space: Space::Permutations { n: n_clusters },
        })
    }

    /// Uniform over permutations of `0..n`; enumerable only while `n!` is within the limit.
    pub fn uniform_permutations(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CrtError::Config("permutations of an empty set".into()));
        }
        Ok(AssignmentModel {
            space: Space::Permutations { n },
        })
    }

    /// Uniform over `{0, .., n_labels-1}^n_units` (an exchangeable product design).
    pub fn uniform_labels(n_units: usize, n_labels: u32) -> Result<Self> {
        if n_labels == 0 {
            return Err(CrtError::Config("label alphabet is empty".into()));
        }
        Ok(AssignmentModel {
            space: Space::Product {
                n: n_units,
                k: n_labels,
                density: Density::Uniform,
            },
        })
    }

    /// Sampling-only model whose law is that of `sampler`.
    pub fn sampling_only<F>(n_labels: usize, sampler: F) -> Self
    where
        F: Fn(&mut CrtRng) -> Assignment + Send + Sync + 'static,
    {
        AssignmentModel {
            space: Space::Lazy {
                n: n_labels,
                sampler: Arc::new(sampler),
            },
        }
    }

    /// Length of every assignment in the space.
    pub fn label_len(&self) -> usize {
        match &self.space {
            Space::Product { n, .. } | Space::FixedCount { n, .. } | Space::Permutations { n } => *n,
            Space::Restricted(r) => r.parent.label_len(),
            Space::Lazy { n, .. } => *n,
        }
    }

    /// Number of assignments; `None` for sampling-only models.
    pub fn size(&self) -> Option<u128> {
        match &self.space {
            Space::Product { n, k, .. } => Some(
                (0..*n)
                    .try_fold(1u128, |acc, _| acc.checked_mul(*k as u128))
                    .unwrap_or(u128::MAX),
            ),
            Space::FixedCount { n, ones } => Some(binomial(*n, *ones)),
            Space::Permutations { n } => Some(factorial(*n)),
            Space::Restricted(r) => Some(r.members.len() as u128),
            Space::Lazy { .. } => None,
        }
    }

    /// Size as a `usize`, or an error if the space may not be enumerated.
    pub fn enumerable_len(&self) -> Result<usize> {
        match self.size() {
            None => Err(CrtError::NotEnumerable),
            Some(s) if s > ENUMERATION_LIMIT => Err(CrtError::EnumerationLimit {
                size: s,
                limit: ENUMERATION_LIMIT,
            }),
            Some(s) => Ok(s as usize),
        }
    }

    /// Whether the density is invariant under permuting coordinates.
    pub fn is_exchangeable(&self) -> bool {
        matches!(
            self.space,
            Space::Product { .. } | Space::FixedCount { .. } | Space::Permutations { .. }
        )
    }

    pub fn is_uniform(&self) -> bool {
        match &self.space {
            Space::Product { density, .. } => *density == Density::Uniform,
            Space::FixedCount { .. } | Space::Permutations { .. } => true,
            Space::Restricted(r) => r.parent.is_uniform(),
            Space::Lazy { .. } => false,
        }
    }

    /// The assignment at position `index` of the enumeration order.
    ///
    /// Panics if `index` is out of range or the model is sampling-only.
    pub fn get(&self, index: usize) -> Assignment {
        match &self.space {
            Space::Product { n, k, .. } => {
                let k = *k as usize;
                let mut labels = vec![0; *n];
                let mut rest = index;
                for slot in labels.iter_mut().rev() {
                    *slot = (rest % k) as Label;
                    rest /= k;
                }
                assert!(rest == 0, "index {index} out of range");
                Assignment(labels)
            }
            Space::FixedCount { n, ones } => {
                let mut labels = vec![0; *n];
                let mut rest = index as u128;
                let mut left = *ones;
                for (i, slot) in labels.iter_mut().enumerate() {
                    if left == 0 {
                        break;
                    }
                    let with_zero = binomial(n - i - 1, left);
                    if rest >= with_zero {
                        rest -= with_zero;
                        *slot = 1;
                        left -= 1;
                    }
                }
                assert!(rest == 0 && left == 0, "index {index} out of range");
                Assignment(labels)
            }
            Space::Permutations { n } => {
                let mut pool: Vec<Label> = (0..*n as Label).collect();
                let mut labels = Vec::with_capacity(*n);
                let mut rest = index as u128;
                for i in (0..*n).rev() {
                    let f = factorial(i);
                    let pos = (rest / f) as usize;
                    rest %= f;
                    labels.push(pool.remove(pos));
                }
                Assignment(labels)
            }
            Space::Restricted(r) => r.members[index].clone(),
            Space::Lazy { .. } => panic!("sampling-only model cannot be indexed"),
        }
    }

    /// Position of `z` in the enumeration order, or `None` if `z` is not in the space.
    pub fn rank(&self, z: &Assignment) -> Option<usize> {
        if z.len() != self.label_len() {
            return None;
        }
        match &self.space {
            Space::Product { k, .. } => {
                let mut idx: u128 = 0;
                for &l in z.iter() {
                    if l < 0 || l as u32 >= *k {
                        return None;
                    }
                    idx = idx.checked_mul(*k as u128)? + l as u128;
                }
                usize::try_from(idx).ok()
            }
            Space::FixedCount { n, ones } => {
                if z.iter().any(|&l| l != 0 && l != 1) || z.count_nonzero() != *ones {
                    return None;
                }
                let mut idx: u128 = 0;
                let mut left = *ones;
                for (i, &l) in z.iter().enumerate() {
                    if l == 1 {
                        idx = idx.checked_add(binomial(n - i - 1, left))?;
                        left -= 1;
                    }
                }
                usize::try_from(idx).ok()
            }
            Space::Permutations { n } => {
                let mut seen = vec![false; *n];
                let mut idx: u128 = 0;
                for (i, &l) in z.iter().enumerate() {
                    if l < 0 || l as usize >= *n || seen[l as usize] {
                        return None;
                    }
                    let smaller_unused = (0..l as usize).filter(|&j| !seen[j]).count();
                    idx = idx.checked_add((smaller_unused as u128).checked_mul(factorial(n - 1 - i))?)?;
                    seen[l as usize] = true;
                }
                usize::try_from(idx).ok()
            }
            Space::Restricted(r) => r.lookup.get(z).copied(),
            Space::Lazy { .. } => None,
        }
    }

    /// Membership in the support, checked structurally so it also holds for
    /// spaces too large to rank.
    pub fn contains(&self, z: &Assignment) -> bool {
        if z.len() != self.label_len() {
            return false;
        }
        match &self.space {
            Space::Product { k, .. } => z.iter().all(|&l| l >= 0 && (l as u32) < *k),
            Space::FixedCount { ones, .. } => {
                z.iter().all(|&l| l == 0 || l == 1) && z.count_nonzero() == *ones
            }
            Space::Permutations { n } => {
                let mut seen = vec![false; *n];
                z.iter().all(|&l| {
                    let ok = l >= 0 && (l as usize) < *n && !seen[l as usize];
                    if ok {
                        seen[l as usize] = true;
                    }
                    ok
                })
            }
            Space::Restricted(r) => r.lookup.contains_key(z),
            Space::Lazy { .. } => true,
        }
    }

    /// Probability mass of `z` (zero outside the space).
    pub fn density(&self, z: &Assignment) -> f64 {
        match &self.space {
            Space::Product { density, .. } => {
                if !self.contains(z) {
                    return 0.0;
                }
                self.product_mass(z, *density)
            }
            Space::Restricted(r) => r.lookup.get(z).map_or(0.0, |&i| r.weights[i]),
            Space::Lazy { .. } => f64::NAN,
            _ => {
                if self.contains(z) {
                    self.uniform_mass()
                } else {
                    0.0
                }
            }
        }
    }

    /// Probability mass of the assignment at `index`.
    pub fn density_at(&self, index: usize) -> f64 {
        match &self.space {
            Space::Product {
                density: Density::Bernoulli(_),
                ..
            } => self.density(&self.get(index)),
            Space::Restricted(r) => r.weights[index],
            _ => self.uniform_mass(),
        }
    }

    fn uniform_mass(&self) -> f64 {
        match self.size() {
            Some(s) => 1.0 / s as f64,
            None => f64::NAN,
        }
    }

    fn product_mass(&self, z: &Assignment, density: Density) -> f64 {
        match density {
            Density::Uniform => self.uniform_mass(),
            Density::Bernoulli(p) => {
                let ones = z.count_nonzero() as i32;
                let zeros = z.len() as i32 - ones;
                p.powi(ones) * (1.0 - p).powi(zeros)
            }
        }
    }

    /// Lazy iterator over the whole space in enumeration order.
    pub fn iter(&self) -> Result<impl Iterator<Item = Assignment> + '_> {
        let len = self.enumerable_len()?;
        Ok((0..len).map(move |i| self.get(i)))
    }

    /// Collects the space into memory; refused above [`MATERIALIZE_LIMIT`].
    pub fn members(&self) -> Result<Vec<Assignment>> {
        match self.size() {
            None => Err(CrtError::NotEnumerable),
            Some(s) if s > MATERIALIZE_LIMIT => Err(CrtError::EnumerationLimit {
                size: s,
                limit: MATERIALIZE_LIMIT,
            }),
            Some(_) => Ok(self.iter()?.collect()),
        }
    }

    /// One draw from the assignment mechanism.
    pub fn sample(&self, rng: &mut CrtRng) -> Assignment {
        match &self.space {
            Space::Product { n, k, density } => {
                let labels = (0..*n)
                    .map(|_| match density {
                        Density::Uniform => rng.random_range(0..*k) as Label,
                        Density::Bernoulli(p) => rng.random_bool(*p) as Label,
                    })
                    .collect();
                Assignment(labels)
            }
            Space::FixedCount { n, ones } => {
                let mut labels = vec![0; *n];
                for i in rand::seq::index::sample(rng, *n, *ones) {
                    labels[i] = 1;
                }
                Assignment(labels)
            }
            Space::Permutations { n } => {
                let mut labels: Vec<Label> = (0..*n as Label).collect();
                labels.shuffle(rng);
                Assignment(labels)
            }
            Space::Restricted(r) => {
                if r.acceptance >= MIN_REJECTION_RATE {
                    loop {
                        let z = r.parent.sample(rng);
                        if (r.balance)(&z) <= r.threshold {
                            return z;
                        }
                    }
                }
                let u: f64 = rng.random();
                let i = r.cumulative.partition_point(|&c| c <= u).min(r.members.len() - 1);
                r.members[i].clone()
            }
            Space::Lazy { sampler, .. } => sampler(rng),
        }
    }

    /// One draw from a fresh generator seeded with `seed`.
    pub fn sample_seeded(&self, seed: u64) -> Assignment {
        self.sample(&mut CrtRng::seed_from_u64(seed))
    }

    /// Restricts the design to `{z : balance(z) <= threshold}` (rerandomization).
    ///
    /// The density is the parent's, renormalized on the acceptance region;
    /// the generator rejects parent draws outside it.
    pub fn restrict<F>(&self, balance: F, threshold: f64) -> Result<Self>
    where
        F: Fn(&Assignment) -> f64 + Send + Sync + 'static,
    {
        let len = self.enumerable_len()?;
        let balance: Balance = Arc::new(balance);
        let mut members = Vec::new();
        let mut weights = Vec::new();
        let mut min_balance = f64::INFINITY;
        for i in 0..len {
            let z = self.get(i);
            let b = balance(&z);
            min_balance = min_balance.min(b);
            if b <= threshold {
                weights.push(self.density_at(i));
                members.push(z);
            }
        }
        if members.is_empty() {
            return Err(CrtError::InfeasibleRestriction {
                threshold,
                min_balance,
            });
        }
        let acceptance: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= acceptance;
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        let lookup = members.iter().enumerate().map(|(i, z)| (z.clone(), i)).collect();
        Ok(AssignmentModel {
            space: Space::Restricted(Arc::new(Restricted {
                parent: self.clone(),
                balance,
                threshold,
                members,
                weights,
                cumulative,
                lookup,
                acceptance,
            })),
        })
    }

    /// Sum of the density over the space (should be 1).
    pub fn total_mass(&self) -> Result<f64> {
        let len = self.enumerable_len()?;
        Ok((0..len).map(|i| self.density_at(i)).sum())
    }
}
