//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use flap::evaluation::{ComponentScheme, CvPlan};
use flap::forecasting::ForecasterSpec;
use flap::ingestion::Layout;
use flap::simulation::DEFAULT_BURN_IN;
use flap::{FlapError, Result};
use serde::{Deserialize, Serialize};

/// Only this variable is read from the environment. Relative output
/// directories are resolved against it.
pub const OUTPUT_ROOT_ENV: &str = "FLAP_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    /// Base forecasters for the original series.
    #[serde(default = "default_forecasters")]
    pub forecasters: Vec<ForecasterSpec>,
    #[serde(default)]
    pub components: ComponentsConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(rename = "T", default = "default_t")]
    pub t: usize,
    #[serde(default = "default_one")]
    pub replicates: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Process file to simulate instead of drawing a surrogate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<PathBuf>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            order: default_order(),
            t: default_t(),
            replicates: 1,
            burn_in: DEFAULT_BURN_IN,
            process: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceChoice {
    #[default]
    PerHorizon,
    Proportional,
    Identity,
    /// One CSV matrix per horizon in `covariance_files`.
    Known,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentsConfig {
    #[serde(default = "default_schemes")]
    pub schemes: Vec<ComponentScheme>,
    /// Numbers of components to sweep.
    #[serde(default = "default_p")]
    pub p: Vec<usize>,
    /// Standardize before PCA. Unset means on for file input and off for
    /// simulated input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
    #[serde(default = "default_component_forecaster")]
    pub forecaster: ForecasterSpec,
    #[serde(default)]
    pub covariance: CovarianceChoice,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub covariance_files: Vec<PathBuf>,
}

impl Default for ComponentsConfig {
    fn default() -> Self {
        Self {
            schemes: default_schemes(),
            p: default_p(),
            standardize: None,
            forecaster: default_component_forecaster(),
            covariance: CovarianceChoice::default(),
            covariance_files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_train: Option<usize>,
    #[serde(default = "default_one")]
    pub step: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            initial_train: None,
            step: 1,
            horizon: default_horizon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Horizons with a rank report. Empty means every horizon.
    #[serde(default = "default_report_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            horizons: default_report_horizons(),
            alpha: default_alpha(),
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_layout() -> Layout {
    Layout::Wide
}
fn default_m() -> usize {
    10
}
fn default_order() -> usize {
    2
}
fn default_t() -> usize {
    300
}
fn default_one() -> usize {
    1
}
fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}
fn default_forecasters() -> Vec<ForecasterSpec> {
    vec![ForecasterSpec::ar(5)]
}
fn default_schemes() -> Vec<ComponentScheme> {
    vec![ComponentScheme::PcaNormal]
}
fn default_p() -> Vec<usize> {
    vec![0, 5, 10]
}
fn default_component_forecaster() -> ForecasterSpec {
    ForecasterSpec::ar(5)
}
fn default_horizon() -> usize {
    12
}
fn default_report_horizons() -> Vec<usize> {
    vec![1, 6, 12]
}
fn default_alpha() -> f64 {
    0.05
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            output_dir: None,
            input: None,
            simulation: None,
            forecasters: default_forecasters(),
            components: ComponentsConfig::default(),
            cv: CvConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FlapError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| FlapError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(input) = cfg.input.as_mut() {
            rebase(&mut input.path);
        }
        if let Some(process) = cfg.simulation.as_mut().and_then(|s| s.process.as_mut()) {
            rebase(process);
        }
        cfg.components.covariance_files.iter_mut().for_each(rebase);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FlapError::Config(e.to_string()))
    }

    pub fn simulation_mut(&mut self) -> &mut SimulationConfig {
        self.simulation.get_or_insert_with(SimulationConfig::default)
    }

    /// Fills in input-dependent defaults.
    pub fn resolve(&mut self) {
        if self.components.standardize.is_none() {
            self.components.standardize = Some(self.input.is_some());
        }
    }

    pub fn standardize(&self) -> bool {
        self.components.standardize.unwrap_or(self.input.is_some())
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.input.is_some() && self.simulation.is_some() {
            return Err(config("give either [input] or [simulation], not both"));
        }
        if let Some(sim) = &self.simulation {
            if sim.m == 0 || sim.t == 0 || sim.replicates == 0 {
                return Err(config("simulation needs m, T and replicates of at least 1"));
            }
        }
        if self.forecasters.is_empty() {
            return Err(config("at least one base forecaster is required"));
        }
        if !self.components.forecaster.is_univariate() {
            return Err(config("the component forecaster must be univariate (mean, naive, seasonal_naive or ar)"));
        }
        if self.components.schemes.is_empty() || self.components.p.is_empty() {
            return Err(config("components need at least one scheme and one p"));
        }
        let mut sorted = self.components.p.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.components.p.len() {
            return Err(config("duplicate values in components.p"));
        }
        let horizon = self.cv.horizon;
        if horizon == 0 || self.cv.step == 0 {
            return Err(config("cv.horizon and cv.step must be at least 1"));
        }
        if self.components.covariance == CovarianceChoice::Known
            && self.components.covariance_files.len() < horizon
        {
            return Err(config(&format!(
                "covariance = \"known\" needs {horizon} covariance_files, got {}",
                self.components.covariance_files.len()
            )));
        }
        if self.report.horizons.iter().any(|&h| h == 0) {
            return Err(config("report horizons start at 1"));
        }
        flap::evaluation::studentized_range_quantile(self.report.alpha, 2)?;
        Ok(())
    }

    pub fn cv_plan(&self, t: usize) -> Result<CvPlan> {
        let initial = self
            .cv
            .initial_train
            .ok_or_else(|| config("cv.initial_train is required for evaluation"))?;
        let plan = CvPlan::new(initial, self.cv.step, self.cv.horizon)?;
        plan.origins(t)?;
        Ok(plan)
    }

    /// Report horizons within `1..=horizon`; all of them when none are set.
    pub fn report_horizons(&self, horizon: usize) -> Vec<usize> {
        let chosen: Vec<usize> = self
            .report
            .horizons
            .iter()
            .copied()
            .filter(|&h| h <= horizon)
            .collect();
        if chosen.is_empty() {
            (1..=horizon).collect()
        } else {
            chosen
        }
    }

    /// Output directory, honouring the output root variable for relative paths.
    pub fn output_dir(&self) -> Result<PathBuf> {
        let dir = self
            .output_dir
            .clone()
            .ok_or_else(|| config("an output directory is required (--output or output_dir)"))?;
        if dir.is_relative() {
            if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
                return Ok(PathBuf::from(root).join(dir));
            }
        }
        Ok(dir)
    }
}

fn config(msg: &str) -> FlapError {
    FlapError::Config(msg.to_string())
}
