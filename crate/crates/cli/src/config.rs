//! Declarative study configuration, read from TOML.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crt_core::engine::{Mode, Orientation};
use crt_core::error::{CrtError, Result};

pub const MAX_RESAMPLES: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignConfig {
    /// Fixed number of treated units, taken from the data.
    Complete,
    Bernoulli {
        prob: f64,
    },
    /// Stepped wedge: the crossover order of clusters is randomized.
    Crossover,
    /// Complete randomization kept only when the treated-minus-control mean
    /// of `balance_on` is at most `threshold` in absolute value.
    Restricted {
        balance_on: Covariate,
        threshold: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Cluster,
    Period,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NullConfig {
    Sharp,
    ConstantEffect {
        tau: f64,
    },
    /// Untreated outcomes do not depend on anyone else's treatment.
    Spillover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditioningConfig {
    None,
    /// `n_treated`, `treated_per_cluster` or `treated_per_period`.
    Function {
        name: String,
    },
    OrderStats,
    /// Unit ids whose exposures are held fixed.
    Focal {
        units: Vec<String>,
    },
    Biclique {
        #[serde(default = "default_min_units")]
        min_units: usize,
    },
}

fn default_min_units() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationName {
    Small,
    Large,
}

impl From<OrientationName> for Orientation {
    fn from(o: OrientationName) -> Self {
        match o {
            OrientationName::Small => Orientation::SmallIsExtreme,
            OrientationName::Large => Orientation::LargeIsExtreme,
        }
    }
}

pub fn orientation_name(o: Orientation) -> &'static str {
    match o {
        Orientation::SmallIsExtreme => "small",
        Orientation::LargeIsExtreme => "large",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticConfig {
    pub name: String,
    /// Which tail counts as extreme; the statistic's own default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<OrientationName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Exact,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub mode: ModeName,
    pub resamples: usize,
    pub seed: u64,
    /// Confidence level for interval inversion.
    pub level: f64,
    /// Permuted variables for quasi-randomization tests.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permute: Option<String>,
    pub design: DesignConfig,
    pub null: NullConfig,
    pub conditioning: ConditioningConfig,
    pub statistic: StatisticConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            mode: ModeName::Exact,
            resamples: 10_000,
            seed: 0,
            level: 0.9,
            permute: None,
            design: DesignConfig::Complete,
            null: NullConfig::Sharp,
            conditioning: ConditioningConfig::None,
            statistic: StatisticConfig {
                name: "diff_in_means".into(),
                orientation: None,
            },
            grid: None,
        }
    }
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: StudyConfig = toml::from_str(text).map_err(|e| CrtError::Config(e.to_string()))?;
        Ok(config)
    }

    /// Checks the values that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.mode == ModeName::Mc && !(1..=MAX_RESAMPLES).contains(&self.resamples) {
            return Err(CrtError::Config(format!(
                "resamples must be in 1..={MAX_RESAMPLES}, got {}",
                self.resamples
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CrtError::Config(format!("level {} outside (0, 1)", self.level)));
        }
        match &self.design {
            DesignConfig::Bernoulli { prob } if !(*prob > 0.0 && *prob < 1.0) => {
                return Err(CrtError::Config(format!("bernoulli prob {prob} outside (0, 1)")));
            }
            DesignConfig::Restricted { threshold, .. } if !(*threshold >= 0.0) => {
                return Err(CrtError::Config(format!(
                    "threshold {threshold} must be nonnegative"
                )));
            }
            _ => {}
        }
        if let NullConfig::ConstantEffect { tau } = self.null {
            if !tau.is_finite() {
                return Err(CrtError::Config("tau must be finite".into()));
            }
        }
        if let ConditioningConfig::Function { name } = &self.conditioning {
            if !CONDITIONING_FUNCTIONS.contains(&name.as_str()) {
                return Err(CrtError::Config(format!(
                    "unknown conditioning function {name:?}; known: {}",
                    CONDITIONING_FUNCTIONS.join(", ")
                )));
            }
        }
        if let Some(g) = &self.grid {
            if !(g.lo < g.hi && g.points >= 3) {
                return Err(CrtError::Config(
                    "grid needs lo < hi and at least 3 points".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeName::Exact => Mode::Exact,
            ModeName::Mc => Mode::MonteCarlo {
                resamples: self.resamples,
            },
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub const CONDITIONING_FUNCTIONS: [&str; 3] = ["n_treated", "treated_per_cluster", "treated_per_period"];
