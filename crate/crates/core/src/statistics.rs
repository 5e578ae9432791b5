//! Built-in test statistics and a name registry for user statistics.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::assignment::Assignment;
use crate::engine::{Orientation, StatInput, Statistic};
use crate::error::{CrtError, Result};
use crate::hypothesis::{Exposure, ExposureMap, PartialOutcomes, UnitMeta};

/// Exposed-minus-control difference in mean outcome over the defined units.
///
/// Units whose exposure is neither 0 nor 1 are ignored.
pub fn diff_in_means_value(exposures: &[Exposure], outcomes: &PartialOutcomes) -> Result<f64> {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (i, y) in outcomes.iter_defined() {
        match exposures[i] {
            1 => {
                s1 += y;
                n1 += 1;
            }
            0 => {
                s0 += y;
                n0 += 1;
            }
            _ => {}
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(CrtError::DegenerateStatistic(format!(
            "difference in means needs both exposure groups ({n1} exposed, {n0} control); \
             condition on a partition that fixes group sizes, such as the order statistics"
        )));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

pub fn diff_in_means(z: &Assignment, outcomes: &PartialOutcomes, exposure: &ExposureMap) -> Result<f64> {
    diff_in_means_value(&exposure.profile(z), outcomes)
}

/// Difference in means as a [`Statistic`] (small-is-extreme by default).
pub fn diff_in_means_statistic(exposure: ExposureMap) -> Statistic {
    Statistic::new("diff_in_means", Orientation::default(), move |inp| {
        diff_in_means(inp.assignment, inp.outcomes, &exposure)
    })
    .declare_linear()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    Exposure,
    ClusterFactor,
    PeriodFactor,
}

/// Columns of a regression of outcome on exposure and nuisance terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignMatrixSpec {
    terms: Vec<Term>,
}

impl DesignMatrixSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.iter().filter(|&&t| t == Term::Exposure).count() != 1 {
            return Err(CrtError::Config(
                "design must contain the exposure term exactly once".into(),
            ));
        }
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].contains(t) {
                return Err(CrtError::Config(format!("duplicate design term {t:?}")));
            }
        }
        Ok(DesignMatrixSpec { terms })
    }

    /// Intercept and exposure; the coefficient equals the difference in means.
    pub fn simple() -> Self {
        DesignMatrixSpec {
            terms: vec![Term::Intercept, Term::Exposure],
        }
    }

    /// Adjusts for cluster fixed effects.
    pub fn cluster_adjusted() -> Self {
        DesignMatrixSpec {
            terms: vec![Term::Intercept, Term::Exposure, Term::ClusterFactor],
        }
    }

    /// Adjusts for cluster and period fixed effects.
    pub fn cluster_period_adjusted() -> Self {
        DesignMatrixSpec {
            terms: vec![
                Term::Intercept,
                Term::Exposure,
                Term::ClusterFactor,
                Term::PeriodFactor,
            ],
        }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn nuisance(&self) -> DesignMatrixSpec {
        DesignMatrixSpec {
            terms: self
                .terms
                .iter()
                .copied()
                .filter(|&t| t != Term::Exposure)
                .collect(),
        }
    }
}

/// A design matrix over a subset of units.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub columns: Vec<String>,
    /// Unit index of each row.
    pub rows: Vec<usize>,
    pub exposure_column: Option<usize>,
}

fn factor_levels(values: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut levels = Vec::new();
    for v in values {
        if !levels.contains(&v) {
            levels.push(v);
        }
    }
    levels
}

/// Builds the design on `rows`; factors drop their first-encountered level.
pub fn build_design(spec: &DesignMatrixSpec, exposures: &[f64], meta: &[UnitMeta], rows: &[usize]) -> Design {
    let mut columns: Vec<String> = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    let mut exposure_column = None;
    for term in &spec.terms {
        match term {
            Term::Intercept => {
                columns.push("intercept".into());
                data.push(vec![1.0; rows.len()]);
            }
            Term::Exposure => {
                exposure_column = Some(columns.len());
                columns.push("exposure".into());
                data.push(rows.iter().map(|&i| exposures[i]).collect());
            }
            Term::ClusterFactor | Term::PeriodFactor => {
                let (name, level): (&str, fn(&UnitMeta) -> usize) = if *term == Term::ClusterFactor {
                    ("cluster", |m| m.cluster)
                } else {
                    ("period", |m| m.period)
                };
                let levels = factor_levels(rows.iter().map(|&i| level(&meta[i])));
                for &l in levels.iter().skip(1) {
                    columns.push(format!("{name}[{l}]"));
                    data.push(
                        rows.iter()
                            .map(|&i| (level(&meta[i]) == l) as u8 as f64)
                            .collect(),
                    );
                }
            }
        }
    }
    let matrix = DMatrix::from_fn(rows.len(), columns.len(), |r, c| data[c][r]);
    Design {
        matrix,
        columns,
        rows: rows.to_vec(),
        exposure_column,
    }
}

const RANK_TOLERANCE: f64 = 1e-10;

/// Columns that are linear combinations of earlier columns.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let rest = v.norm();
        if norm == 0.0 || rest <= RANK_TOLERANCE * norm {
            dependent.push(j);
        } else {
            basis.push(v / rest);
        }
    }
    dependent
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// Least squares via Householder QR. Rank deficiency names the dependent columns.
pub fn ols_fit(x: &DMatrix<f64>, columns: &[String], y: &DVector<f64>) -> Result<OlsFit> {
    if x.nrows() < x.ncols() {
        return Err(CrtError::Collinear {
            columns: columns[x.nrows()..].to_vec(),
        });
    }
    let dependent = dependent_columns(x);
    if !dependent.is_empty() {
        return Err(CrtError::Collinear {
            columns: dependent.iter().map(|&j| columns[j].clone()).collect(),
        });
    }
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    let coefficients = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| CrtError::Collinear {
            columns: columns.to_vec(),
        })?;
    let residuals = y - x * &coefficients;
    Ok(OlsFit {
        coefficients,
        residuals,
    })
}

/// Exposure coefficient of the least-squares fit on the defined rows.
pub fn ols_exposure_coeff(
    z: &Assignment,
    outcomes: &PartialOutcomes,
    spec: &DesignMatrixSpec,
    exposure: &ExposureMap,
    meta: &[UnitMeta],
) -> Result<f64> {
    let exposures = exposure.profile_f64(z);
    let (rows, y): (Vec<usize>, Vec<f64>) = outcomes.iter_defined().unzip();
    let design = build_design(spec, &exposures, meta, &rows);
    let fit = ols_fit(&design.matrix, &design.columns, &DVector::from_vec(y))?;
    Ok(fit.coefficients[design.exposure_column.expect("spec has exposure")])
}

// Orthonormal basis of the nuisance columns over all units, shared by every
// candidate assignment when no outcome is masked.
struct NuisanceBasis {
    q: DMatrix<f64>,
}

impl NuisanceBasis {
    fn build(spec: &DesignMatrixSpec, meta: &[UnitMeta]) -> Option<Self> {
        let rows: Vec<usize> = (0..meta.len()).collect();
        let design = build_design(&spec.nuisance(), &vec![0.0; meta.len()], meta, &rows);
        if design.matrix.ncols() == 0 {
            return Some(NuisanceBasis {
                q: DMatrix::zeros(meta.len(), 0),
            });
        }
        if !dependent_columns(&design.matrix).is_empty() || design.matrix.nrows() <= design.matrix.ncols() {
            return None;
        }
        Some(NuisanceBasis {
            q: design.matrix.qr().q(),
        })
    }

    // Exposure coefficient by partialling out the nuisance columns.
    fn coefficient(&self, d: &[f64], y: &[f64]) -> Option<f64> {
        let d = DVector::from_column_slice(d);
        let r = &d - &self.q * (self.q.transpose() * &d);
        let rr = r.norm_squared();
        if !(rr.sqrt() > RANK_TOLERANCE * d.norm()) {
            return None;
        }
        Some(r.dot(&DVector::from_column_slice(y)) / rr)
    }
}

/// OLS exposure coefficient as a [`Statistic`] (small-is-extreme by default).
pub fn ols_exposure_statistic(
    spec: DesignMatrixSpec,
    exposure: ExposureMap,
    meta: Vec<UnitMeta>,
) -> Result<Statistic> {
    if meta.len() != exposure.n_units() {
        return Err(CrtError::Data(format!(
            "{} metadata rows for {} units",
            meta.len(),
            exposure.n_units()
        )));
    }
    let name = if spec == DesignMatrixSpec::simple() {
        "ols"
    } else if spec == DesignMatrixSpec::cluster_adjusted() {
        "ols_cluster"
    } else if spec == DesignMatrixSpec::cluster_period_adjusted() {
        "ols_cluster_period"
    } else {
        "ols_custom"
    };
    let basis: Arc<OnceLock<Option<NuisanceBasis>>> = Arc::new(OnceLock::new());
    Ok(
        Statistic::new(name, Orientation::default(), move |inp: &StatInput<'_>| {
            if let Ok(y) = inp.outcomes.as_full() {
                let fast = basis.get_or_init(|| NuisanceBasis::build(&spec, &meta));
                if let Some(b) = fast {
                    if let Some(c) = b.coefficient(&exposure.profile_f64(inp.assignment), y) {
                        return Ok(c);
                    }
                }
            }
            ols_exposure_coeff(inp.assignment, inp.outcomes, &spec, &exposure, &meta)
        })
        .declare_linear(),
    )
}

/// Named statistics for configuration files.
#[derive(Debug, Clone, Default)]
pub struct StatisticRegistry {
    entries: BTreeMap<String, Statistic>,
}

impl StatisticRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding `diff_in_means`, `ols_cluster` and `ols_cluster_period`
    /// for the given exposure and unit metadata.
    pub fn with_builtins(exposure: &ExposureMap, meta: &[UnitMeta]) -> Result<Self> {
        let mut reg = Self::new();
        reg.insert("diff_in_means", diff_in_means_statistic(exposure.clone()))?;
        reg.insert(
            "ols_cluster",
            ols_exposure_statistic(
                DesignMatrixSpec::cluster_adjusted(),
                exposure.clone(),
                meta.to_vec(),
            )?,
        )?;
        reg.insert(
            "ols_cluster_period",
            ols_exposure_statistic(
                DesignMatrixSpec::cluster_period_adjusted(),
                exposure.clone(),
                meta.to_vec(),
            )?,
        )?;
        Ok(reg)
    }

    /// Registers `f` under `name`. `f` reads outcomes through
    /// [`PartialOutcomes::get`], which fails on units that are not imputable.
    pub fn register<F>(&mut self, name: &str, orientation: Orientation, f: F) -> Result<()>
    where
        F: Fn(&StatInput<'_>) -> Result<f64> + Send + Sync + 'static,
    {
        self.insert(name, Statistic::new(name, orientation, f))
    }

    pub fn insert(&mut self, name: &str, statistic: Statistic) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CrtError::Registry(format!(
                "statistic {name:?} already registered"
            )));
        }
        self.entries.insert(name.to_string(), statistic);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Statistic> {
        self.entries.get(name).cloned().ok_or_else(|| {
            CrtError::Registry(format!(
                "unknown statistic {name:?}; known: {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}
