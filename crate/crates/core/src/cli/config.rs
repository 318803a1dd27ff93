use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::PopulationConfig;
use crate::estimate::EstimationSettings;
use crate::scenario::{OutcomeThresholds, Protocol, ScenarioSpec};
use crate::simulate::{ControllerConfig, InjectionConfig, SimGrid};

use super::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_COHORT_SIZE: usize = 100;
pub const DEFAULT_SEED: u64 = 2024;
/// First-day insulin limit, U per kg body weight.
pub const DEFAULT_FIRST_DAY_LIMIT: f64 = 0.2;

/// Names of the three scenarios `compare` ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub long: String,
    pub boosted: String,
    pub short: String,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            long: ScenarioSpec::long().name,
            boosted: ScenarioSpec::boosted().name,
            short: ScenarioSpec::short().name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub cohort_size: usize,
    /// Worker threads, 0 for one per core.
    pub parallel: usize,
    /// First-day insulin limit, U/kg.
    pub first_day_limit: f64,
    pub population: PopulationConfig,
    pub controller: ControllerConfig,
    pub grid: SimGrid,
    pub injection: InjectionConfig,
    pub estimation: EstimationSettings,
    pub thresholds: OutcomeThresholds,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<ScenarioSpec>,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: DEFAULT_SEED,
            out_dir: PathBuf::from("out"),
            cohort_size: DEFAULT_COHORT_SIZE,
            parallel: 0,
            first_day_limit: DEFAULT_FIRST_DAY_LIMIT,
            population: PopulationConfig::default(),
            controller: ControllerConfig::default(),
            grid: SimGrid::default(),
            injection: InjectionConfig::default(),
            estimation: EstimationSettings::default(),
            thresholds: OutcomeThresholds::default(),
            scenarios: ScenarioSpec::paper_set(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.cohort_size == 0 {
            return Err(CliError::Config("no patients: cohort_size is 0".into()));
        }
        if !(self.first_day_limit > 0.0) {
            return Err(CliError::Config("first_day_limit must be > 0".into()));
        }
        let lib = |e: crate::Error| CliError::Config(e.to_string());
        self.population.validate().map_err(lib)?;
        self.controller.validate().map_err(lib)?;
        self.estimation.validate().map_err(lib)?;
        self.grid
            .with_horizon(self.grid.sample_interval())
            .validate()
            .map_err(lib)?;
        let t = &self.thresholds;
        if !(t.range_low < t.range_high) {
            return Err(CliError::Config(
                "thresholds.range_low must be < range_high".into(),
            ));
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            s.validate().map_err(lib)?;
            if self.scenarios[..i].iter().any(|o| o.name == s.name) {
                return Err(CliError::Config(format!(
                    "duplicate scenario name '{}'",
                    s.name
                )));
            }
        }
        Ok(())
    }

    /// Population settings with the master seed applied.
    pub fn population(&self) -> PopulationConfig {
        PopulationConfig {
            seed: self.seed,
            ..self.population
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            controller: self.controller,
            grid: self.grid,
            injection: self.injection,
            estimation: self.estimation,
            thresholds: self.thresholds,
        }
    }

    pub fn scenario(&self, name: &str) -> Result<&ScenarioSpec, CliError> {
        self.scenarios
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| {
                let known: Vec<&str> = self.scenarios.iter().map(|s| s.name.as_str()).collect();
                CliError::Config(format!(
                    "scenario '{name}' not found in config (configured: {})",
                    if known.is_empty() {
                        "none".to_string()
                    } else {
                        known.join(", ")
                    }
                ))
            })
    }
}
