//! Stepped-wedge cluster trials: layout, synthetic data, and the
//! permutation schemes that treat crossover order, admission period or
//! cluster membership as the randomized variable.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::assignment::{stream_rng, Assignment, AssignmentModel, Label, ObservedData};
use crate::engine::{Orientation, Statistic};
use crate::error::{CrtError, Result};
use crate::hypothesis::{stepped_wedge_exposure, Exposure, ExposureMap, PartialOutcomes, UnitMeta};
use crate::statistics::{
    build_design, diff_in_means_statistic, diff_in_means_value, ols_exposure_statistic, ols_fit,
    DesignMatrixSpec,
};

/// Clusters cross over one per period in a random order; period 0 is all-control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SteppedWedgeDesign {
    pub n_clusters: usize,
    pub n_periods: usize,
    pub per_cell: usize,
}

impl SteppedWedgeDesign {
    pub fn new(n_clusters: usize, n_periods: usize, per_cell: usize) -> Result<Self> {
        if !(2..=8).contains(&n_clusters) {
            return Err(CrtError::Config(format!("need 2..=8 clusters, got {n_clusters}")));
        }
        if n_periods < 2 {
            return Err(CrtError::Config("need at least 2 periods".into()));
        }
        if per_cell == 0 {
            return Err(CrtError::Config(
                "need at least one unit per cluster-period".into(),
            ));
        }
        Ok(SteppedWedgeDesign {
            n_clusters,
            n_periods,
            per_cell,
        })
    }

    /// Units ordered by cluster, then period, then replicate.
    pub fn meta(&self) -> Vec<UnitMeta> {
        let mut meta = Vec::with_capacity(self.n_clusters * self.n_periods * self.per_cell);
        for cluster in 0..self.n_clusters {
            for period in 0..self.n_periods {
                meta.extend(std::iter::repeat_n(UnitMeta { cluster, period }, self.per_cell));
            }
        }
        meta
    }

    pub fn model(&self) -> AssignmentModel {
        AssignmentModel::crossover_orders(self.n_clusters).expect("cluster count checked")
    }
}

/// Which statistic of the trial analysis to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialStatistic {
    /// Exposed-minus-control difference in means.
    DiffInMeans,
    /// Exposure coefficient adjusted for cluster.
    ClusterAdjusted,
    /// Exposure coefficient adjusted for cluster and period.
    ClusterPeriodAdjusted,
}

impl TrialStatistic {
    pub const ALL: [TrialStatistic; 3] = [
        TrialStatistic::DiffInMeans,
        TrialStatistic::ClusterAdjusted,
        TrialStatistic::ClusterPeriodAdjusted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrialStatistic::DiffInMeans => "diff_in_means",
            TrialStatistic::ClusterAdjusted => "ols_cluster",
            TrialStatistic::ClusterPeriodAdjusted => "ols_cluster_period",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| CrtError::Registry(format!("unknown trial statistic {name:?}")))
    }

    pub fn spec(self) -> DesignMatrixSpec {
        match self {
            TrialStatistic::DiffInMeans => DesignMatrixSpec::simple(),
            TrialStatistic::ClusterAdjusted => DesignMatrixSpec::cluster_adjusted(),
            TrialStatistic::ClusterPeriodAdjusted => DesignMatrixSpec::cluster_period_adjusted(),
        }
    }

    /// The statistic as a function of the crossover order.
    pub fn statistic(self, exposure: &ExposureMap, meta: &[UnitMeta]) -> Result<Statistic> {
        match self {
            TrialStatistic::DiffInMeans => Ok(diff_in_means_statistic(exposure.clone())),
            _ => ols_exposure_statistic(self.spec(), exposure.clone(), meta.to_vec()),
        }
    }
}

/// Observed stepped-wedge data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub n_clusters: usize,
    pub n_periods: usize,
    pub meta: Vec<UnitMeta>,
    pub order: Assignment,
    pub treatment: Vec<Exposure>,
    pub outcomes: Vec<f64>,
}

impl TrialData {
    /// Builds trial data from per-unit records, recovering the crossover order
    /// from the treatment column.
    pub fn from_records(meta: Vec<UnitMeta>, treatment: Vec<Exposure>, outcomes: Vec<f64>) -> Result<Self> {
        if meta.is_empty() || meta.len() != treatment.len() || meta.len() != outcomes.len() {
            return Err(CrtError::Data(
                "records must be nonempty and of equal length".into(),
            ));
        }
        let n_clusters = meta.iter().map(|m| m.cluster).max().unwrap_or(0) + 1;
        let n_periods = meta.iter().map(|m| m.period).max().unwrap_or(0) + 1;
        if !(2..=8).contains(&n_clusters) {
            return Err(CrtError::Data(format!(
                "stepped-wedge data needs 2..=8 clusters, found {n_clusters}"
            )));
        }
        let order = infer_order(&meta, &treatment, n_clusters, n_periods)?;
        Ok(TrialData {
            n_clusters,
            n_periods,
            meta,
            order,
            treatment,
            outcomes,
        })
    }

    pub fn n_units(&self) -> usize {
        self.meta.len()
    }

    pub fn model(&self) -> AssignmentModel {
        AssignmentModel::crossover_orders(self.n_clusters).expect("cluster count checked")
    }

    pub fn exposure(&self) -> ExposureMap {
        stepped_wedge_exposure(self.n_clusters, self.n_periods, &self.meta).expect("metadata checked")
    }

    pub fn observed(&self) -> ObservedData {
        ObservedData::new(self.order.clone(), self.outcomes.clone())
    }
}

/// Crossover order consistent with a stepped-wedge treatment column.
///
/// The cluster first treated in period `k + 1` sits at position `k`. Clusters
/// never treated fill the remaining positions in index order.
pub fn infer_order(
    meta: &[UnitMeta],
    treatment: &[Exposure],
    n_clusters: usize,
    n_periods: usize,
) -> Result<Assignment> {
    let mut first = vec![usize::MAX; n_clusters];
    for (i, (m, &d)) in meta.iter().zip(treatment).enumerate() {
        if d != 0 && d != 1 {
            return Err(CrtError::Data(format!(
                "unit {i}: treatment must be 0 or 1, got {d}"
            )));
        }
        if d == 1 {
            first[m.cluster] = first[m.cluster].min(m.period);
        }
    }
    let mut order = vec![None; n_clusters];
    let mut idle = Vec::new();
    for (cluster, &p) in first.iter().enumerate() {
        if p == usize::MAX {
            idle.push(cluster);
            continue;
        }
        if p == 0 || p > n_clusters {
            return Err(CrtError::Data(format!(
                "cluster {cluster} crosses over in period {p}; expected a period in 1..={n_clusters}"
            )));
        }
        if let Some(other) = order[p - 1] {
            return Err(CrtError::Data(format!(
                "clusters {other} and {cluster} both cross over in period {p}"
            )));
        }
        order[p - 1] = Some(cluster);
    }
    let mut idle = idle.into_iter();
    let order: Vec<Label> = order
        .into_iter()
        .map(|c| c.or_else(|| idle.next()).expect("one slot per cluster") as Label)
        .collect();
    let order = Assignment::new(order);
    let exposure = stepped_wedge_exposure(n_clusters, n_periods, meta)?;
    for (i, (&d, e)) in treatment.iter().zip(exposure.profile(&order)).enumerate() {
        if d != e {
            return Err(CrtError::Data(format!(
                "unit {i}: treatment {d} contradicts the crossover order {:?} (expected {e})",
                order.labels()
            )));
        }
    }
    Ok(order)
}

/// Parameters of the synthetic trial
/// `y = cluster effect + trend · period + τ · exposure + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationParams {
    pub design: SteppedWedgeDesign,
    pub tau: f64,
    pub trend: f64,
    pub cluster_sd: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SimulationParams {
    pub fn new(design: SteppedWedgeDesign, tau: f64, trend: f64, seed: u64) -> Self {
        SimulationParams {
            design,
            tau,
            trend,
            cluster_sd: 0.5,
            noise_sd: 1.0,
            seed,
        }
    }
}

/// Draws a crossover order uniformly and outcomes from the additive model.
pub fn simulate(params: &SimulationParams) -> Result<TrialData> {
    let d = params.design;
    if !(params.cluster_sd >= 0.0 && params.noise_sd >= 0.0) {
        return Err(CrtError::Config("standard deviations must be nonnegative".into()));
    }
    if !(params.tau.is_finite() && params.trend.is_finite()) {
        return Err(CrtError::Config("effect and trend must be finite".into()));
    }
    let meta = d.meta();
    let order = d.model().sample(&mut stream_rng(params.seed, 0));
    let exposure = stepped_wedge_exposure(d.n_clusters, d.n_periods, &meta)?;
    let treatment = exposure.profile(&order);
    let mut rng = stream_rng(params.seed, 1);
    let cluster_dist = Normal::new(0.0, params.cluster_sd).expect("checked sd");
    let noise = Normal::new(0.0, params.noise_sd).expect("checked sd");
    let effects: Vec<f64> = (0..d.n_clusters).map(|_| cluster_dist.sample(&mut rng)).collect();
    let outcomes = meta
        .iter()
        .zip(&treatment)
        .map(|(m, &e)| {
            effects[m.cluster]
                + params.trend * m.period as f64
                + params.tau * e as f64
                + noise.sample(&mut rng)
        })
        .collect();
    Ok(TrialData {
        n_clusters: d.n_clusters,
        n_periods: d.n_periods,
        meta,
        order,
        treatment,
        outcomes,
    })
}

/// Variables permuted by a (quasi-)randomization test of the trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PermutationScheme {
    pub crossover: bool,
    pub time: bool,
    pub cluster: bool,
}

impl PermutationScheme {
    pub const CROSSOVER: PermutationScheme = PermutationScheme {
        crossover: true,
        time: false,
        cluster: false,
    };

    /// The seven nonempty schemes: crossover, time, cluster, time and cluster,
    /// crossover and time, crossover and cluster, all three.
    pub fn all() -> [PermutationScheme; 7] {
        let s = |crossover, time, cluster| PermutationScheme {
            crossover,
            time,
            cluster,
        };
        [
            s(true, false, false),
            s(false, true, false),
            s(false, false, true),
            s(false, true, true),
            s(true, true, false),
            s(true, false, true),
            s(true, true, true),
        ]
    }

    /// Only the crossover order is physically randomized.
    pub fn is_randomization(&self) -> bool {
        *self == Self::CROSSOVER
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.crossover {
            parts.push("crossover");
        }
        if self.time {
            parts.push("time");
        }
        if self.cluster {
            parts.push("ward");
        }
        parts.join("+")
    }

    /// Parses `crossover`, `time`, `ward` (or `cluster`) joined by `+` or `,`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = PermutationScheme {
            crossover: false,
            time: false,
            cluster: false,
        };
        for part in text.split(['+', ',']).map(str::trim) {
            match part {
                "crossover" => s.crossover = true,
                "time" | "period" => s.time = true,
                "ward" | "cluster" => s.cluster = true,
                other => {
                    return Err(CrtError::Config(format!(
                        "unknown permuted variable {other:?}; expected crossover, time or ward"
                    )))
                }
            }
        }
        if !(s.crossover || s.time || s.cluster) {
            return Err(CrtError::Config("permutation scheme is empty".into()));
        }
        Ok(s)
    }
}

/// Sampling model, statistic and observed data for a permutation scheme.
///
/// The permuted object is the label vector `order ++ clusters ++ periods`;
/// the statistic recomputes exposure and the design from the permuted
/// variables.
pub struct QuasiSetup {
    pub model: AssignmentModel,
    pub statistic: Statistic,
    pub observed: ObservedData,
}

fn decode(z: &[Label], c: usize, n: usize) -> (Vec<usize>, Vec<UnitMeta>, Vec<f64>) {
    let order = &z[..c];
    let mut position = vec![0usize; c];
    for (k, &cl) in order.iter().enumerate() {
        position[cl as usize] = k;
    }
    let meta: Vec<UnitMeta> = (0..n)
        .map(|i| UnitMeta {
            cluster: z[c + i] as usize,
            period: z[c + n + i] as usize,
        })
        .collect();
    let d = meta
        .iter()
        .map(|m| (m.period > position[m.cluster]) as u8 as f64)
        .collect();
    (position, meta, d)
}

pub fn quasi_setup(data: &TrialData, scheme: PermutationScheme, statistic: TrialStatistic) -> QuasiSetup {
    let c = data.n_clusters;
    let n = data.n_units();
    let mut labels: Vec<Label> = data.order.labels().to_vec();
    labels.extend(data.meta.iter().map(|m| m.cluster as Label));
    labels.extend(data.meta.iter().map(|m| m.period as Label));
    let observed = Assignment::new(labels);
    let template = observed.clone();
    let model = AssignmentModel::sampling_only(c + 2 * n, move |rng| {
        let mut z = template.labels().to_vec();
        if scheme.crossover {
            z[..c].shuffle(rng);
        }
        if scheme.cluster {
            z[c..c + n].shuffle(rng);
        }
        if scheme.time {
            z[c + n..].shuffle(rng);
        }
        Assignment::new(z)
    });
    let spec = statistic.spec();
    let stat = Statistic::new(
        format!("{}[{}]", statistic.name(), scheme.name()),
        Orientation::default(),
        move |inp| {
            let (_, meta, d) = decode(inp.assignment, c, n);
            let y = inp.outcomes.as_full()?;
            if statistic == TrialStatistic::DiffInMeans {
                let e: Vec<Exposure> = d.iter().map(|&v| v as Exposure).collect();
                return diff_in_means_value(&e, &PartialOutcomes::full(y.to_vec()));
            }
            let rows: Vec<usize> = (0..n).collect();
            let design = build_design(&spec, &d, &meta, &rows);
            let fit = ols_fit(&design.matrix, &design.columns, &DVector::from_column_slice(y))?;
            Ok(fit.coefficients[design.exposure_column.expect("spec has exposure")])
        },
    );
    QuasiSetup {
        model,
        statistic: stat,
        observed: ObservedData::new(observed, data.outcomes.clone()),
    }
}
