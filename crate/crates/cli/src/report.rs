//! Versioned JSON reports.

use serde::Serialize;

use crt_core::engine::{Mode, PValueReport, Statistic};
use crt_core::inference::InversionResult;

use crate::config::orientation_name;

pub const SCHEMA: u32 = 1;

pub const QUASI_ASSUMPTION: &str = "QUASI-RANDOMIZATION TEST: the permuted variables were not \
randomized by design. Validity rests on the assumption that outcomes are exchangeable under \
permutations of these variables when the null hypothesis holds.";

#[derive(Debug, Serialize)]
pub struct StatisticInfo {
    pub name: String,
    pub orientation: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed: Option<f64>,
}

impl StatisticInfo {
    pub fn new(stat: &Statistic, observed: Option<f64>) -> Self {
        StatisticInfo {
            name: stat.name().to_string(),
            orientation: orientation_name(stat.orientation()),
            observed,
        }
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Exact => "exact",
        Mode::MonteCarlo { .. } => "mc",
    }
}

fn resamples(mode: Mode) -> Option<usize> {
    match mode {
        Mode::Exact => None,
        Mode::MonteCarlo { resamples } => Some(resamples),
    }
}

/// Identifies the inputs a report was computed from.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub data_sha256: String,
}

#[derive(Debug, Serialize)]
pub struct TestReport {
    pub schema: u32,
    pub command: &'static str,
    /// `RANDOMIZATION` or `QUASI`.
    pub label: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assumption: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permute: Option<String>,
    pub p_value: f64,
    pub cell: Vec<i64>,
    pub cell_id: Option<usize>,
    pub cell_size: Option<u128>,
    pub mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resamples: Option<usize>,
    pub seed: u64,
    pub statistic: StatisticInfo,
    pub n_units: usize,
    pub distribution_sample: Vec<f64>,
    pub config_hash: String,
    pub data_sha256: String,
}

impl TestReport {
    pub fn new(
        command: &'static str,
        stat: &Statistic,
        r: PValueReport,
        seed: u64,
        n_units: usize,
        provenance: Provenance,
    ) -> Self {
        TestReport {
            schema: SCHEMA,
            command,
            label: "RANDOMIZATION",
            assumption: None,
            permute: None,
            p_value: r.p,
            cell: r.cell,
            cell_id: r.cell_id,
            cell_size: r.cell_size,
            mode: mode_name(r.mode),
            resamples: resamples(r.mode),
            seed,
            statistic: StatisticInfo::new(stat, Some(r.observed_stat)),
            n_units,
            distribution_sample: r.distribution,
            config_hash: provenance.config_hash,
            data_sha256: provenance.data_sha256,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GridRow {
    pub tau: f64,
    pub p_lower: f64,
    pub p_upper: f64,
    pub retained: bool,
}

#[derive(Debug, Serialize)]
pub struct InvertReport {
    pub schema: u32,
    pub command: &'static str,
    pub level: f64,
    pub one_sided_level: f64,
    pub estimate: f64,
    pub interval: Option<[f64; 2]>,
    pub contiguous: bool,
    pub monotonicity_violations: Vec<usize>,
    pub mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resamples: Option<usize>,
    pub seed: u64,
    pub statistic: StatisticInfo,
    pub grid: Vec<GridRow>,
    pub config_hash: String,
    pub data_sha256: String,
}

impl InvertReport {
    pub fn new(stat: &Statistic, r: InversionResult, provenance: Provenance) -> Self {
        let grid = r
            .grid
            .iter()
            .enumerate()
            .map(|(i, &tau)| GridRow {
                tau,
                p_lower: r.p_lower[i],
                p_upper: r.p_upper[i],
                retained: r.retained[i],
            })
            .collect();
        InvertReport {
            schema: SCHEMA,
            command: "invert",
            level: r.level,
            one_sided_level: r.one_sided_alpha,
            estimate: r.estimate,
            interval: r.interval.map(|(a, b)| [a, b]),
            contiguous: r.contiguous,
            monotonicity_violations: r.monotonicity_violations,
            mode: mode_name(r.mode),
            resamples: resamples(r.mode),
            seed: r.seed,
            statistic: StatisticInfo::new(stat, None),
            grid,
            config_hash: provenance.config_hash,
            data_sha256: provenance.data_sha256,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FisherReport {
    pub schema: u32,
    pub command: &'static str,
    pub table: [[u64; 2]; 2],
    pub side: &'static str,
    pub p_value: f64,
    pub point_probability: f64,
}

#[derive(Debug, Serialize)]
pub struct ConformalRow {
    pub y: f64,
    pub p_value: f64,
    pub included: bool,
}

#[derive(Debug, Serialize)]
pub struct ConformalReport {
    pub schema: u32,
    pub command: &'static str,
    pub alpha: f64,
    pub weighted: bool,
    pub n: usize,
    pub interval: Option<[f64; 2]>,
    pub grid: Vec<ConformalRow>,
    pub data_sha256: String,
}

pub fn to_json<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
