//! Post-randomized conditioning variables `G = g(Z, V)`.

use rand::Rng;

use crate::assignment::{Assignment, AssignmentModel, CrtRng};
use crate::error::{CrtError, Result};
use crate::exec;

use super::{CellKey, Partition};

/// A conditioning variable with known kernel `P(G = g | Z = z)` and countable support.
pub trait ConditioningVariable: Send + Sync {
    /// Values with positive probability given `z`, with their probabilities.
    fn kernel(&self, z: &Assignment) -> Vec<(CellKey, f64)>;

    fn probability(&self, g: &CellKey, z: &Assignment) -> f64 {
        self.kernel(z)
            .into_iter()
            .filter(|(v, _)| v == g)
            .map(|(_, p)| p)
            .sum()
    }

    /// Draws `G` given `Z = z`.
    fn draw(&self, z: &Assignment, rng: &mut CrtRng) -> CellKey {
        let kernel = self.kernel(z);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (g, p) in &kernel {
            acc += p;
            if u < acc {
                return g.clone();
            }
        }
        kernel.last().expect("kernel has empty support").0.clone()
    }

    /// Every value reachable from some assignment of `model`, sorted.
    fn support(&self, model: &AssignmentModel) -> Result<Vec<CellKey>> {
        let mut all: Vec<CellKey> = model
            .iter()?
            .flat_map(|z| self.kernel(&z).into_iter().map(|(g, _)| g))
            .collect();
        all.sort();
        all.dedup();
        Ok(all)
    }
}

/// `G = key(Z)` for a fixed partition.
pub struct DeterministicVariable {
    pub partition: Partition,
}

impl ConditioningVariable for DeterministicVariable {
    fn kernel(&self, z: &Assignment) -> Vec<(CellKey, f64)> {
        vec![(self.partition.key(z), 1.0)]
    }
}

/// Analyst draws `V` with the given weights and conditions on the cell of `Z`
/// in partition `V`: `G = (V, S_Z(V))`.
pub struct RandomizedPartitionChoice {
    partitions: Vec<Partition>,
    weights: Vec<f64>,
}

impl RandomizedPartitionChoice {
    pub fn new(partitions: Vec<Partition>, weights: Vec<f64>) -> Result<Self> {
        if partitions.is_empty() || partitions.len() != weights.len() {
            return Err(CrtError::Argument(
                "need one positive weight per partition".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(CrtError::Argument("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        Ok(RandomizedPartitionChoice {
            partitions,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn partition(&self, v: usize) -> &Partition {
        &self.partitions[v]
    }
}

impl ConditioningVariable for RandomizedPartitionChoice {
    fn kernel(&self, z: &Assignment) -> Vec<(CellKey, f64)> {
        self.partitions
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(v, (p, &w))| {
                let mut g = vec![v as i64];
                g.extend(p.key(z));
                (g, w)
            })
            .collect()
    }
}

/// `G` drawn independently of `Z` from a fixed distribution.
pub struct IndependentVariable {
    values: Vec<(CellKey, f64)>,
}

impl IndependentVariable {
    pub fn new(values: Vec<(CellKey, f64)>) -> Result<Self> {
        let total: f64 = values.iter().map(|(_, p)| p).sum();
        if values.is_empty() || (total - 1.0).abs() > 1e-9 || values.iter().any(|(_, p)| *p < 0.0) {
            return Err(CrtError::Argument(
                "probabilities must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(IndependentVariable { values })
    }
}

impl ConditioningVariable for IndependentVariable {
    fn kernel(&self, _z: &Assignment) -> Vec<(CellKey, f64)> {
        self.values.clone()
    }
}

/// `π(z | g) ∝ P(G = g | Z = z) π(z)`, indexed by space rank.
pub fn bayes_conditional_density(
    model: &AssignmentModel,
    variable: &dyn ConditioningVariable,
    g: &CellKey,
) -> Result<Vec<f64>> {
    let len = model.enumerable_len()?;
    let mut joint = exec::map_range(len, |i| {
        variable.probability(g, &model.get(i)) * model.density_at(i)
    });
    let total: f64 = joint.iter().sum();
    if !(total > 0.0) {
        return Err(CrtError::UnreachableConditioningValue(g.clone()));
    }
    for w in &mut joint {
        *w /= total;
    }
    Ok(joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::partition_by_function;

    #[test]
    fn deterministic_kernel_recovers_cells() {
        let model = AssignmentModel::bernoulli(5, 0.3).unwrap();
        let p = partition_by_function(&model, |z| z.count_nonzero() as i64);
        let var = DeterministicVariable { partition: p.clone() };
        let dens = bayes_conditional_density(&model, &var, &vec![2]).unwrap();
        let cell = p.cell_id(&Assignment::new(vec![1, 1, 0, 0, 0])).unwrap();
        let members = p.cell_members(cell).unwrap();
        let mass: f64 = members.iter().map(|&i| model.density_at(i as usize)).sum();
        for (i, &d) in dens.iter().enumerate() {
            let expected = if members.contains(&(i as u32)) {
                model.density_at(i) / mass
            } else {
                0.0
            };
            assert!((d - expected).abs() < 1e-15);
        }
        assert!((dens.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(
            bayes_conditional_density(&model, &var, &vec![9]),
            Err(CrtError::UnreachableConditioningValue(_))
        ));
    }

    #[test]
    fn independent_kernel_leaves_density() {
        let model = AssignmentModel::bernoulli(4, 0.4).unwrap();
        let var = IndependentVariable::new(vec![(vec![0], 0.3), (vec![1], 0.7)]).unwrap();
        let dens = bayes_conditional_density(&model, &var, &vec![1]).unwrap();
        for (i, d) in dens.iter().enumerate() {
            assert!((d - model.density_at(i)).abs() < 1e-15);
        }
    }

    #[test]
    fn kernels_sum_to_one() {
        let model = AssignmentModel::complete_randomization(6, 3).unwrap();
        let a = partition_by_function(&model, |z| z[0] as i64);
        let b = partition_by_function(&model, |z| (z[1] + z[2]) as i64);
        let var = RandomizedPartitionChoice::new(vec![a, b], vec![1.0, 3.0]).unwrap();
        for z in model.iter().unwrap() {
            let s: f64 = var.kernel(&z).iter().map(|(_, p)| p).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(var.support(&model).unwrap().len(), 2 + 3);
    }
}
