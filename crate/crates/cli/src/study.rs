//! Turns a configuration and trial records into a model, partition, null and statistic.

use crt_core::assignment::{Assignment, AssignmentModel, Label, ObservedData};
use crt_core::conditioning::{
    biclique_decomposition, partition_by_focal_units, partition_by_order_statistics, NullExposureGraph,
    Partition,
};
use crt_core::engine::{Orientation, Statistic};
use crt_core::error::{CrtError, Result};
use crt_core::hypothesis::{ExposureMap, NullHypothesis, UnitMeta};
use crt_core::statistics::StatisticRegistry;

use crate::config::{ConditioningConfig, Covariate, DesignConfig, NullConfig, StudyConfig};
use crate::data::TrialRecords;

pub struct Study {
    pub model: AssignmentModel,
    pub partition: Partition,
    pub null: NullHypothesis,
    pub exposure: ExposureMap,
    pub statistic: Statistic,
    pub observed: ObservedData,
}

fn binary_treatment(records: &TrialRecords) -> Result<Assignment> {
    let labels = records
        .treatment
        .iter()
        .enumerate()
        .map(|(i, &t)| match t {
            0 | 1 => Ok(t as Label),
            _ => Err(CrtError::Data(format!(
                "unit {}: treatment must be 0 or 1, got {t}",
                records.unit_ids[i]
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Assignment::new(labels))
}

fn design(
    records: &TrialRecords,
    config: &DesignConfig,
) -> Result<(AssignmentModel, ExposureMap, Vec<UnitMeta>, Assignment)> {
    if let DesignConfig::Crossover = config {
        let trial = records.to_trial()?;
        return Ok((
            trial.model(),
            trial.exposure(),
            trial.meta.clone(),
            trial.order.clone(),
        ));
    }
    let n = records.len();
    let z = binary_treatment(records)?;
    let treated = z.count_nonzero();
    let model = match config {
        DesignConfig::Complete => AssignmentModel::complete_randomization(n, treated)?,
        DesignConfig::Bernoulli { prob } => AssignmentModel::bernoulli(n, *prob)?,
        DesignConfig::Restricted {
            balance_on,
            threshold,
        } => {
            let covariate: Vec<f64> = records
                .meta
                .iter()
                .map(|m| match balance_on {
                    Covariate::Cluster => m.cluster as f64,
                    Covariate::Period => m.period as f64,
                })
                .collect();
            let (n1, n0) = (treated as f64, (n - treated) as f64);
            if treated == 0 || treated == n {
                return Err(CrtError::Data(
                    "restricted design needs treated and control units".into(),
                ));
            }
            let balance = move |z: &Assignment| {
                let (mut t, mut c) = (0.0, 0.0);
                for (x, &l) in covariate.iter().zip(z.iter()) {
                    if l == 1 {
                        t += x;
                    } else {
                        c += x;
                    }
                }
                (t / n1 - c / n0).abs()
            };
            let model = AssignmentModel::complete_randomization(n, treated)?.restrict(balance, *threshold)?;
            if !model.contains(&z) {
                return Err(CrtError::Data(
                    "observed treatment violates the balance restriction".into(),
                ));
            }
            model
        }
        DesignConfig::Crossover => unreachable!(),
    };
    Ok((model, ExposureMap::own_treatment(n), records.meta.clone(), z))
}

/// Built-in statistics plus `spillover_contrast`: among untreated units with
/// defined outcomes, the mean of those sharing a cluster with a treated unit
/// minus the mean of the rest.
pub fn registry(exposure: &ExposureMap, meta: &[UnitMeta]) -> Result<StatisticRegistry> {
    let mut reg = StatisticRegistry::with_builtins(exposure, meta)?;
    let e = exposure.clone();
    let meta = meta.to_vec();
    let n_clusters = meta.iter().map(|m| m.cluster).max().map_or(0, |c| c + 1);
    reg.register("spillover_contrast", Orientation::LargeIsExtreme, move |inp| {
        let d = e.profile(inp.assignment);
        let mut touched = vec![false; n_clusters];
        for (m, &di) in meta.iter().zip(&d) {
            if di != 0 {
                touched[m.cluster] = true;
            }
        }
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for (i, y) in inp.outcomes.iter_defined() {
            if d[i] != 0 {
                continue;
            }
            if touched[meta[i].cluster] {
                s1 += y;
                n1 += 1.0;
            } else {
                s0 += y;
                n0 += 1.0;
            }
        }
        if n1 == 0.0 || n0 == 0.0 {
            return Ok(0.0);
        }
        Ok(s1 / n1 - s0 / n0)
    })?;
    Ok(reg)
}

pub fn resolve_statistic(reg: &StatisticRegistry, config: &StudyConfig) -> Result<Statistic> {
    let stat = reg.get(&config.statistic.name)?;
    Ok(match config.statistic.orientation {
        Some(o) => stat.with_orientation(o.into()),
        None => stat,
    })
}

fn partition(
    model: &AssignmentModel,
    exposure: &ExposureMap,
    meta: &[UnitMeta],
    records: &TrialRecords,
    config: &ConditioningConfig,
) -> Result<Partition> {
    Ok(match config {
        ConditioningConfig::None => Partition::unconditional(model),
        ConditioningConfig::Function { name } => {
            let e = exposure.clone();
            let n_clusters = meta.iter().map(|m| m.cluster).max().map_or(0, |c| c + 1);
            let n_periods = meta.iter().map(|m| m.period).max().map_or(0, |p| p + 1);
            let meta = meta.to_vec();
            match name.as_str() {
                "n_treated" => Partition::by_key(model, move |z| vec![e.profile(z).iter().sum()]),
                "treated_per_cluster" => Partition::by_key(model, move |z| {
                    let mut k = vec![0; n_clusters];
                    for (m, d) in meta.iter().zip(e.profile(z)) {
                        k[m.cluster] += d;
                    }
                    k
                }),
                "treated_per_period" => Partition::by_key(model, move |z| {
                    let mut k = vec![0; n_periods];
                    for (m, d) in meta.iter().zip(e.profile(z)) {
                        k[m.period] += d;
                    }
                    k
                }),
                other => {
                    return Err(CrtError::Config(format!(
                        "unknown conditioning function {other:?}"
                    )))
                }
            }
        }
        ConditioningConfig::OrderStats => partition_by_order_statistics(model),
        ConditioningConfig::Focal { units } => {
            let idx = units
                .iter()
                .map(|u| records.unit_index(u))
                .collect::<Result<Vec<_>>>()?;
            partition_by_focal_units(model, exposure, &idx)?
        }
        ConditioningConfig::Biclique { min_units } => {
            let graph = NullExposureGraph::build(model, exposure)?;
            Partition::from_bicliques(model, &biclique_decomposition(&graph, *min_units))?
        }
    })
}

pub fn build_study(records: &TrialRecords, config: &StudyConfig) -> Result<Study> {
    config.validate()?;
    let (model, exposure, meta, z) = design(records, &config.design)?;
    let null = match config.null {
        NullConfig::Sharp => NullHypothesis::fisher_sharp(records.len()),
        NullConfig::ConstantEffect { tau } => NullHypothesis::constant_effect(exposure.clone(), tau)?,
        NullConfig::Spillover => NullHypothesis::spillover(exposure.clone())?,
    };
    let statistic = resolve_statistic(&registry(&exposure, &meta)?, config)?;
    let partition = partition(&model, &exposure, &meta, records, &config.conditioning)?;
    Ok(Study {
        model,
        partition,
        null,
        exposure,
        statistic,
        observed: ObservedData::new(z, records.outcomes.clone()),
    })
}
