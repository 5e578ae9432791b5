//! Partially sharp null hypotheses.
//!
//! A null is an imputability mapping `H(z, z*)` (which units' outcomes under
//! `z*` can be reconstructed from outcomes under `z`) paired with the rule
//! that reconstructs them. Imputed outcomes come back as [`PartialOutcomes`]:
//! units outside the imputable set are undefined and reading them is an error.

use std::fmt;
use std::sync::Arc;

use fixedbitset::FixedBitSet;

use crate::assignment::{Assignment, ObservedData};
use crate::error::{CrtError, Result};

/// A set of unit indices `⊆ [N]`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct UnitSet(FixedBitSet);

impl UnitSet {
    pub fn empty(n_units: usize) -> Self {
        UnitSet(FixedBitSet::with_capacity(n_units))
    }

    pub fn full(n_units: usize) -> Self {
        let mut b = FixedBitSet::with_capacity(n_units);
        b.insert_range(..);
        UnitSet(b)
    }

    pub fn from_indices(n_units: usize, units: impl IntoIterator<Item = usize>) -> Self {
        let mut s = UnitSet::empty(n_units);
        for i in units {
            s.insert(i);
        }
        s
    }

    pub fn from_fn(n_units: usize, f: impl Fn(usize) -> bool) -> Self {
        UnitSet::from_indices(n_units, (0..n_units).filter(|&i| f(i)))
    }

    /// Size of the universe `[N]`.
    pub fn universe(&self) -> usize {
        self.0.len()
    }

    pub fn insert(&mut self, i: usize) {
        self.0.insert(i);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(i)
    }

    pub fn len(&self) -> usize {
        self.0.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_clear()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.universe()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.ones()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn intersect_with(&mut self, other: &UnitSet) {
        self.0.intersect_with(&other.0);
    }

    pub fn intersection(&self, other: &UnitSet) -> UnitSet {
        let mut s = self.clone();
        s.intersect_with(other);
        s
    }

    pub fn is_subset(&self, other: &UnitSet) -> bool {
        self.0.is_subset(&other.0)
    }
}

impl fmt::Debug for UnitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Outcome vector in which only imputable units carry a value.
#[derive(Clone, PartialEq)]
pub struct PartialOutcomes {
    values: Vec<f64>,
    defined: UnitSet,
}

impl PartialOutcomes {
    pub fn full(values: Vec<f64>) -> Self {
        let defined = UnitSet::full(values.len());
        PartialOutcomes { values, defined }
    }

    pub fn masked(values: Vec<f64>, defined: UnitSet) -> Self {
        assert_eq!(values.len(), defined.universe());
        PartialOutcomes { values, defined }
    }

    pub fn n_units(&self) -> usize {
        self.values.len()
    }

    /// Value for unit `i`; an error if `i` is not imputable.
    pub fn get(&self, i: usize) -> Result<f64> {
        if self.defined.contains(i) {
            Ok(self.values[i])
        } else {
            Err(CrtError::UndefinedOutcome { unit: i })
        }
    }

    pub fn is_defined(&self, i: usize) -> bool {
        self.defined.contains(i)
    }

    pub fn defined(&self) -> &UnitSet {
        &self.defined
    }

    /// `(unit, value)` for every defined unit, in unit order.
    pub fn iter_defined(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.defined.iter().map(|i| (i, self.values[i]))
    }

    /// All values, if every unit is defined.
    pub fn as_full(&self) -> Result<&[f64]> {
        match (0..self.n_units()).find(|&i| !self.defined.contains(i)) {
            Some(unit) => Err(CrtError::UndefinedOutcome { unit }),
            None => Ok(&self.values),
        }
    }

    /// Keeps only units in `units` defined.
    pub fn restricted_to(&self, units: &UnitSet) -> PartialOutcomes {
        PartialOutcomes {
            values: self.values.clone(),
            defined: self.defined.intersection(units),
        }
    }
}

impl fmt::Debug for PartialOutcomes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown: Vec<Option<f64>> = (0..self.n_units()).map(|i| self.get(i).ok()).collect();
        write!(f, "{shown:?}")
    }
}

pub type Exposure = i64;

type ExposureFn = Arc<dyn Fn(usize, &Assignment) -> Exposure + Send + Sync>;

/// Unit-level exposure functions `D_i(z)` over a countable alphabet.
#[derive(Clone)]
pub struct ExposureMap {
    n_units: usize,
    alphabet: Vec<Exposure>,
    f: ExposureFn,
}

impl fmt::Debug for ExposureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExposureMap")
            .field("n_units", &self.n_units)
            .field("alphabet", &self.alphabet)
            .finish()
    }
}

impl ExposureMap {
    /// `alphabet` lists every value `f` may return.
    pub fn new<F>(n_units: usize, mut alphabet: Vec<Exposure>, f: F) -> Self
    where
        F: Fn(usize, &Assignment) -> Exposure + Send + Sync + 'static,
    {
        alphabet.sort_unstable();
        alphabet.dedup();
        ExposureMap {
            n_units,
            alphabet,
            f: Arc::new(f),
        }
    }

    /// `D_i(z) = z_i` for binary unit-level designs.
    pub fn own_treatment(n_units: usize) -> Self {
        ExposureMap::new(n_units, vec![0, 1], |i, z| z[i] as Exposure)
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn alphabet(&self) -> &[Exposure] {
        &self.alphabet
    }

    pub fn expose(&self, unit: usize, z: &Assignment) -> Exposure {
        (self.f)(unit, z)
    }

    /// `(D_1(z), .., D_N(z))`.
    pub fn profile(&self, z: &Assignment) -> Vec<Exposure> {
        (0..self.n_units).map(|i| self.expose(i, z)).collect()
    }

    /// Exposure vector as reals, for regression designs.
    pub fn profile_f64(&self, z: &Assignment) -> Vec<f64> {
        (0..self.n_units).map(|i| self.expose(i, z) as f64).collect()
    }
}

/// Position and timing of one unit in a stepped-wedge trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnitMeta {
    pub cluster: usize,
    pub period: usize,
}

/// Binary exposure in a stepped-wedge design over crossover orders.
///
/// The cluster at position `k` of the order crosses over at period `k + 1`;
/// period 0 is all-control. A unit is exposed iff its cluster has crossed over
/// by the unit's period.
pub fn stepped_wedge_exposure(
    n_clusters: usize,
    n_periods: usize,
    unit_meta: &[UnitMeta],
) -> Result<ExposureMap> {
    for (i, m) in unit_meta.iter().enumerate() {
        if m.cluster >= n_clusters || m.period >= n_periods {
            return Err(CrtError::Data(format!(
                "unit {i}: cluster {} / period {} outside {n_clusters} clusters x {n_periods} periods",
                m.cluster, m.period
            )));
        }
    }
    let meta = unit_meta.to_vec();
    Ok(ExposureMap::new(meta.len(), vec![0, 1], move |i, z| {
        let m = meta[i];
        let position = z
            .iter()
            .position(|&c| c as usize == m.cluster)
            .expect("crossover order must contain every cluster");
        (m.period > position) as Exposure
    }))
}

type MappingFn = Arc<dyn Fn(&Assignment, &Assignment) -> UnitSet + Send + Sync>;
type ImputeFn = Arc<dyn Fn(&ObservedData, &Assignment) -> Result<PartialOutcomes> + Send + Sync>;

/// The set-valued map `(z, z*) ↦ H(z, z*) ⊆ [N]`.
#[derive(Clone)]
pub enum ImputabilityMapping {
    /// `H(z, z*) = [N]`.
    Full {
        n_units: usize,
    },
    /// `H(z, z*) = {i : D_i(z) = D_i(z*)}`.
    LevelSet(ExposureMap),
    /// `H(z, z*) = {i : D_i(z) = D_i(z*) = 0}`.
    NullLevel(ExposureMap),
    Custom {
        n_units: usize,
        f: MappingFn,
    },
}

impl ImputabilityMapping {
    pub fn n_units(&self) -> usize {
        match self {
            ImputabilityMapping::Full { n_units } | ImputabilityMapping::Custom { n_units, .. } => *n_units,
            ImputabilityMapping::LevelSet(e) | ImputabilityMapping::NullLevel(e) => e.n_units(),
        }
    }

    pub fn imputable(&self, z: &Assignment, z_star: &Assignment) -> UnitSet {
        match self {
            ImputabilityMapping::Full { n_units } => UnitSet::full(*n_units),
            ImputabilityMapping::LevelSet(e) => {
                UnitSet::from_fn(e.n_units(), |i| e.expose(i, z) == e.expose(i, z_star))
            }
            ImputabilityMapping::NullLevel(e) => {
                UnitSet::from_fn(e.n_units(), |i| e.expose(i, z) == 0 && e.expose(i, z_star) == 0)
            }
            ImputabilityMapping::Custom { f, .. } => f(z, z_star),
        }
    }

    /// Exposure functions behind a level-set mapping.
    pub fn exposure(&self) -> Option<&ExposureMap> {
        match self {
            ImputabilityMapping::LevelSet(e) | ImputabilityMapping::NullLevel(e) => Some(e),
            _ => None,
        }
    }
}

impl fmt::Debug for ImputabilityMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImputabilityMapping::Full { n_units } => write!(f, "Full(n={n_units})"),
            ImputabilityMapping::LevelSet(e) => write!(f, "LevelSet({e:?})"),
            ImputabilityMapping::NullLevel(e) => write!(f, "NullLevel({e:?})"),
            ImputabilityMapping::Custom { n_units, .. } => write!(f, "Custom(n={n_units})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NullKind {
    FullySharp,
    ConstantEffect(f64),
    Spillover,
    ExposureLevels,
    Custom,
}

#[derive(Clone)]
enum Imputer {
    /// Imputable outcomes equal the observed ones.
    Identity,
    /// `Y_i(z*) = Y_i + (D_i(z*) - D_i(Z)) τ`.
    Shift {
        exposure: ExposureMap,
        tau: f64,
    },
    Custom(ImputeFn),
}

/// Partially sharp null: imputability mapping plus imputation rule.
#[derive(Clone)]
pub struct NullHypothesis {
    mapping: ImputabilityMapping,
    imputer: Imputer,
    kind: NullKind,
}

impl fmt::Debug for NullHypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NullHypothesis")
            .field("kind", &self.kind)
            .field("mapping", &self.mapping)
            .finish()
    }
}

impl NullHypothesis {
    /// No treatment effect whatsoever: every outcome is imputable and equals the observed one.
    pub fn fisher_sharp(n_units: usize) -> Self {
        NullHypothesis {
            mapping: ImputabilityMapping::Full { n_units },
            imputer: Imputer::Identity,
            kind: NullKind::FullySharp,
        }
    }

    /// Constant effect `τ` of a binary exposure: `Y_i(1) - Y_i(0) = τ` for all units.
    pub fn constant_effect(exposure: ExposureMap, tau: f64) -> Result<Self> {
        if exposure.alphabet().iter().any(|&d| d != 0 && d != 1) {
            return Err(CrtError::UnsupportedNull(format!(
                "constant-effect null needs a binary exposure alphabet, got {:?}",
                exposure.alphabet()
            )));
        }
        Ok(NullHypothesis {
            mapping: ImputabilityMapping::Full {
                n_units: exposure.n_units(),
            },
            imputer: Imputer::Shift { exposure, tau },
            kind: NullKind::ConstantEffect(tau),
        })
    }

    /// No spillover: outcomes agree across assignments that keep a unit at exposure 0.
    pub fn spillover(exposure: ExposureMap) -> Result<Self> {
        if !exposure.alphabet().contains(&0) {
            return Err(CrtError::Config(format!(
                "spillover null needs exposure level 0 in the alphabet {:?}",
                exposure.alphabet()
            )));
        }
        Ok(NullHypothesis {
            mapping: ImputabilityMapping::NullLevel(exposure),
            imputer: Imputer::Identity,
            kind: NullKind::Spillover,
        })
    }

    /// Outcomes depend on the assignment only through the exposure level.
    pub fn exposure_levels(exposure: ExposureMap) -> Self {
        NullHypothesis {
            mapping: ImputabilityMapping::LevelSet(exposure),
            imputer: Imputer::Identity,
            kind: NullKind::ExposureLevels,
        }
    }

    /// User-supplied mapping and imputation rule. Their consistency is the caller's claim;
    /// imputed values are masked to the mapping.
    pub fn custom<M, I>(n_units: usize, mapping: M, impute: I) -> Self
    where
        M: Fn(&Assignment, &Assignment) -> UnitSet + Send + Sync + 'static,
        I: Fn(&ObservedData, &Assignment) -> Result<PartialOutcomes> + Send + Sync + 'static,
    {
        NullHypothesis {
            mapping: ImputabilityMapping::Custom {
                n_units,
                f: Arc::new(mapping),
            },
            imputer: Imputer::Custom(Arc::new(impute)),
            kind: NullKind::Custom,
        }
    }

    pub fn kind(&self) -> NullKind {
        self.kind
    }

    pub fn mapping(&self) -> &ImputabilityMapping {
        &self.mapping
    }

    pub fn n_units(&self) -> usize {
        self.mapping.n_units()
    }

    pub fn imputable(&self, z: &Assignment, z_star: &Assignment) -> UnitSet {
        self.mapping.imputable(z, z_star)
    }

    /// Outcomes under `target`, defined exactly on `H(Z_obs, target)`.
    pub fn impute(&self, observed: &ObservedData, target: &Assignment) -> Result<PartialOutcomes> {
        if observed.n_units() != self.n_units() {
            return Err(CrtError::Data(format!(
                "null is over {} units, data has {}",
                self.n_units(),
                observed.n_units()
            )));
        }
        let defined = self.mapping.imputable(&observed.assignment, target);
        match &self.imputer {
            Imputer::Identity => Ok(PartialOutcomes::masked(observed.outcomes.clone(), defined)),
            Imputer::Shift { exposure, tau } => {
                let values = observed
                    .outcomes
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let d_target = exposure.expose(i, target);
                        let d_obs = exposure.expose(i, &observed.assignment);
                        if d_target == d_obs {
                            y
                        } else {
                            y + (d_target - d_obs) as f64 * tau
                        }
                    })
                    .collect();
                Ok(PartialOutcomes::masked(values, defined))
            }
            Imputer::Custom(f) => {
                let imputed = f(observed, target)?;
                Ok(imputed.restricted_to(&defined))
            }
        }
    }
}
