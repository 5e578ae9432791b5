//! Conditioning structures: partitions of the assignment space.
//!
//! A [`Partition`] is defined by a cell key function on assignments. Two
//! assignments share a cell iff their keys are equal, so reflexivity and
//! invariance of conditioning sets hold by construction. Dense cell ids
//! (first-encounter order in the enumeration) and member lists are built on
//! first use and cached.

mod graph;
mod post;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

pub use graph::{biclique_decomposition, Biclique, NullExposureGraph, EXACT_BICLIQUE_LIMIT};
pub use post::{
    bayes_conditional_density, ConditioningVariable, DeterministicVariable, IndependentVariable,
    RandomizedPartitionChoice,
};

use crate::assignment::{Assignment, AssignmentModel, MATERIALIZE_LIMIT};
use crate::error::{CrtError, Result};
use crate::exec;
use crate::hypothesis::{ExposureMap, ImputabilityMapping, NullHypothesis, UnitSet};

/// Identifies a cell independently of enumeration (for example the value of `g(z)`).
pub type CellKey = Vec<i64>;

type KeyFn = Arc<dyn Fn(&Assignment) -> CellKey + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    /// One cell: the whole space.
    Unconditional,
    Function,
    OrderStatistics,
    FocalUnits,
    /// Cells listed explicitly by space index.
    Explicit,
}

struct CellTable {
    ids: HashMap<CellKey, usize>,
    keys: Vec<CellKey>,
    members: Vec<Vec<u32>>,
}

/// Partition `R = {S_m}` of an assignment space.
#[derive(Clone)]
pub struct Partition {
    model: AssignmentModel,
    key: KeyFn,
    kind: PartitionKind,
    table: Arc<OnceLock<std::result::Result<CellTable, CrtError>>>,
}

impl fmt::Debug for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Partition")
            .field("kind", &self.kind)
            .field("model", &self.model)
            .finish()
    }
}

impl Partition {
    fn with_key(model: &AssignmentModel, kind: PartitionKind, key: KeyFn) -> Self {
        Partition {
            model: model.clone(),
            key,
            kind,
            table: Arc::new(OnceLock::new()),
        }
    }

    /// The trivial partition `{Z}`.
    pub fn unconditional(model: &AssignmentModel) -> Self {
        Self::with_key(model, PartitionKind::Unconditional, Arc::new(|_| Vec::new()))
    }

    /// Cells are the level sets of an arbitrary key function.
    pub fn by_key<F>(model: &AssignmentModel, key: F) -> Self
    where
        F: Fn(&Assignment) -> CellKey + Send + Sync + 'static,
    {
        Self::with_key(model, PartitionKind::Function, Arc::new(key))
    }

    /// Cells listed explicitly: `cell_of[i]` is the cell of the assignment with rank `i`.
    ///
    /// Cell ids are renumbered densely in first-encounter order.
    pub fn from_cell_labels(model: &AssignmentModel, cell_of: Vec<usize>) -> Result<Self> {
        let len = model.enumerable_len()?;
        if cell_of.len() != len {
            return Err(CrtError::Argument(format!(
                "{} cell labels for a space of {len} assignments",
                cell_of.len()
            )));
        }
        let labels = Arc::new(cell_of);
        let m = model.clone();
        Ok(Self::with_key(
            model,
            PartitionKind::Explicit,
            Arc::new(move |z| {
                let r = m.rank(z).expect("assignment outside the partitioned space");
                vec![labels[r] as i64]
            }),
        ))
    }

    pub fn kind(&self) -> PartitionKind {
        self.kind
    }

    pub fn model(&self) -> &AssignmentModel {
        &self.model
    }

    /// Key of the cell containing `z`.
    pub fn key(&self, z: &Assignment) -> CellKey {
        (self.key)(z)
    }

    pub fn same_cell(&self, a: &Assignment, b: &Assignment) -> bool {
        self.key(a) == self.key(b)
    }

    fn table(&self) -> Result<&CellTable> {
        self.table
            .get_or_init(|| {
                let len = self.model.enumerable_len()?;
                let keys: Vec<CellKey> = exec::map_range(len, |i| self.key(&self.model.get(i)));
                let mut ids = HashMap::new();
                let mut ordered = Vec::new();
                let mut members: Vec<Vec<u32>> = Vec::new();
                for (i, k) in keys.into_iter().enumerate() {
                    let id = *ids.entry(k.clone()).or_insert_with(|| {
                        ordered.push(k);
                        members.push(Vec::new());
                        members.len() - 1
                    });
                    members[id].push(i as u32);
                }
                Ok(CellTable {
                    ids,
                    keys: ordered,
                    members,
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn n_cells(&self) -> Result<usize> {
        Ok(self.table()?.members.len())
    }

    /// Dense id of the cell containing `z`.
    pub fn cell_id(&self, z: &Assignment) -> Result<usize> {
        if !self.model.contains(z) {
            return Err(CrtError::NotInSpace(z.clone()));
        }
        let key = self.key(z);
        Ok(self.table()?.ids[&key])
    }

    pub fn cell_key(&self, id: usize) -> Result<&CellKey> {
        self.table()?
            .keys
            .get(id)
            .ok_or_else(|| CrtError::Argument(format!("no cell {id}")))
    }

    /// Space indices of the members of cell `id`, ascending.
    pub fn cell_members(&self, id: usize) -> Result<&[u32]> {
        self.table()?
            .members
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| CrtError::Argument(format!("no cell {id}")))
    }

    pub fn cell_assignments(&self, id: usize) -> Result<Vec<Assignment>> {
        Ok(self
            .cell_members(id)?
            .iter()
            .map(|&i| self.model.get(i as usize))
            .collect())
    }

    pub fn cell_sizes(&self) -> Result<Vec<usize>> {
        Ok(self.table()?.members.iter().map(Vec::len).collect())
    }
}

/// Conditions on `g(Z)`: cells are the level sets of `g`.
pub fn partition_by_function<F>(model: &AssignmentModel, g: F) -> Partition
where
    F: Fn(&Assignment) -> i64 + Send + Sync + 'static,
{
    Partition::by_key(model, move |z| vec![g(z)])
}

/// Conditions on the order statistics of `Z`: cells are coordinate rearrangements.
pub fn partition_by_order_statistics(model: &AssignmentModel) -> Partition {
    Partition::with_key(
        model,
        PartitionKind::OrderStatistics,
        Arc::new(|z| z.sorted_labels().into_iter().map(i64::from).collect()),
    )
}

/// Conditions on the exposures of the focal units: `S_z = {z* : D_I(z*) = D_I(z)}`.
pub fn partition_by_focal_units(
    model: &AssignmentModel,
    exposure: &ExposureMap,
    focal: &[usize],
) -> Result<Partition> {
    if focal.is_empty() {
        return Err(CrtError::Argument("focal unit set is empty".into()));
    }
    if let Some(&bad) = focal.iter().find(|&&i| i >= exposure.n_units()) {
        return Err(CrtError::Argument(format!("focal unit {bad} out of range")));
    }
    let exposure = exposure.clone();
    let focal = focal.to_vec();
    Ok(Partition::with_key(
        model,
        PartitionKind::FocalUnits,
        Arc::new(move |z| focal.iter().map(|&i| exposure.expose(i, z)).collect()),
    ))
}

/// Why a proposed conditioning map is not a partition.
#[derive(Debug, Clone, PartialEq)]
pub enum RejectionReason {
    /// `z ∉ proposal(z)`.
    NotReflexive,
    /// `z* ∈ proposal(z)` but `proposal(z*) ≠ proposal(z)`.
    NotInvariant,
}

/// A violating pair `(z, z*)`; for reflexivity failures `z* = z`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapRejection {
    pub z: Assignment,
    pub z_star: Assignment,
    pub reason: RejectionReason,
}

#[derive(Debug)]
pub enum MapValidation {
    Accepted(Partition),
    Rejected(MapRejection),
}

impl MapValidation {
    pub fn is_accepted(&self) -> bool {
        matches!(self, MapValidation::Accepted(_))
    }

    pub fn rejection(&self) -> Option<&MapRejection> {
        match self {
            MapValidation::Rejected(r) => Some(r),
            MapValidation::Accepted(_) => None,
        }
    }
}

/// Checks that `proposal` assigns reflexive, invariant conditioning sets
/// (`z ∈ S_z`, and `z* ∈ S_z ⟹ S_{z*} = S_z`).
///
/// Assignments are scanned in enumeration order, reflexivity before invariance,
/// so the reported witness is the first violation in that order.
pub fn validate_conditioning_map<F>(model: &AssignmentModel, proposal: F) -> Result<MapValidation>
where
    F: Fn(&Assignment) -> Vec<Assignment> + Send + Sync,
{
    let len = model.enumerable_len()?;
    if len as u128 > MATERIALIZE_LIMIT {
        return Err(CrtError::EnumerationLimit {
            size: len as u128,
            limit: MATERIALIZE_LIMIT,
        });
    }
    let sets: Vec<Result<Vec<usize>>> = exec::map_range(len, |i| {
        let mut s = proposal(&model.get(i))
            .into_iter()
            .map(|z| model.rank(&z).ok_or(CrtError::NotInSpace(z)))
            .collect::<Result<Vec<usize>>>()?;
        s.sort_unstable();
        s.dedup();
        Ok(s)
    });
    let sets = sets.into_iter().collect::<Result<Vec<_>>>()?;

    for (i, set) in sets.iter().enumerate() {
        if set.binary_search(&i).is_err() {
            let z = model.get(i);
            return Ok(MapValidation::Rejected(MapRejection {
                z: z.clone(),
                z_star: z,
                reason: RejectionReason::NotReflexive,
            }));
        }
        if let Some(&j) = set.iter().find(|&&j| sets[j] != *set) {
            return Ok(MapValidation::Rejected(MapRejection {
                z: model.get(i),
                z_star: model.get(j),
                reason: RejectionReason::NotInvariant,
            }));
        }
    }
    let cell_of = sets.iter().map(|s| s[0]).collect();
    Ok(MapValidation::Accepted(Partition::from_cell_labels(
        model, cell_of,
    )?))
}

/// Units imputable between every pair of assignments in a cell:
/// `H_m = ∩_{z, z* ∈ S_m} H(z, z*)`.
pub fn intersection_units(partition: &Partition, null: &NullHypothesis, cell: usize) -> Result<UnitSet> {
    let members = partition.cell_assignments(cell)?;
    let n = null.n_units();
    Ok(match null.mapping() {
        ImputabilityMapping::Full { .. } => UnitSet::full(n),
        ImputabilityMapping::LevelSet(e) => {
            let first = e.profile(&members[0]);
            UnitSet::from_fn(n, |i| members.iter().all(|z| e.expose(i, z) == first[i]))
        }
        ImputabilityMapping::NullLevel(e) => {
            UnitSet::from_fn(n, |i| members.iter().all(|z| e.expose(i, z) == 0))
        }
        ImputabilityMapping::Custom { .. } => {
            let mut h = UnitSet::full(n);
            for a in &members {
                for b in &members {
                    h.intersect_with(&null.imputable(a, b));
                    if h.is_empty() {
                        return Ok(h);
                    }
                }
            }
            h
        }
    })
}
