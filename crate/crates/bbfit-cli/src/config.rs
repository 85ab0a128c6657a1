//! Run configuration. One JSON document drives every subcommand; parsing
//! reports the path of the offending field, and validation rejects values a
//! run could not survive before any data is touched.

use std::fs;
use std::path::{Path, PathBuf};

use bbfit::simgen::ScenarioConfig;
use bbfit::terms::TermSpec;
use bbfit::Criterion;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub batches: BatchesConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    /// Output directory; --out and BBFIT_OUT_DIR take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Where the rows come from: exactly one source must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing column store file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// CSV file, ingested on the fly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Columns to keep when ingesting CSV (default: all).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_columns: Option<Vec<String>>,
    /// Synthetic scenario; `simulate` writes it out, `fit` can consume it
    /// directly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<ScenarioConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: String,
    #[serde(default = "default_response")]
    pub response: String,
    /// Explicit term lists, one per distribution parameter. Omitted, every
    /// parameter gets an intercept plus one smooth per covariate (lon/lat
    /// collapse into one interaction surface).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictors: Option<Vec<Vec<TermSpec>>>,
}

fn default_response() -> String {
    "y".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Independent uniform row subsets; rows reappear across batches.
    WithReplacement,
    /// Shuffled epochs chopped into consecutive chunks.
    Epoch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchesConfig {
    /// Update iterations; the run draws one more batch than this for the
    /// out-of-sample decisions.
    pub iterations: usize,
    pub size: usize,
    pub sampling: SamplingMode,
    pub seed: u64,
}

impl Default for BatchesConfig {
    fn default() -> Self {
        BatchesConfig {
            iterations: 200,
            size: 1000,
            sampling: SamplingMode::WithReplacement,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Plain,
    Boost,
    Resample,
    /// Boost for term selection, then resample the surviving terms.
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CriterionMode {
    Aic,
    Bic,
    Loglik,
}

impl CriterionMode {
    pub fn to_engine(self) -> Criterion {
        match self {
            CriterionMode::Aic => Criterion::Aic,
            CriterionMode::Bic => Criterion::Bic,
            CriterionMode::Loglik => Criterion::Loglik,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub policy: PolicyMode,
    pub nu: f64,
    pub criterion: CriterionMode,
    /// Minimum relative out-of-sample log-likelihood gain to accept an
    /// update; engine defaults apply when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_loglik: Option<f64>,
    /// Sample smoothing parameters instead of searching them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice: Option<bool>,
    /// Resampling burn-in (default: half the iterations).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    pub fix_tau: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_tau: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            policy: PolicyMode::TwoStage,
            nu: 0.1,
            criterion: CriterionMode::Aic,
            eps_loglik: None,
            slice: None,
            burn_in: None,
            fix_tau: false,
            initial_tau: None,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub nu: Option<f64>,
    pub policy: Option<PolicyMode>,
    pub batch_size: Option<usize>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub criterion: Option<CriterionMode>,
    pub out: Option<PathBuf>,
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::Config(format!("config {}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}

fn reject(path: &str, message: String) -> Result<(), CliError> {
    Err(CliError::Config(format!("config {path}: {message}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let sources = self.data.store.is_some() as u8
            + self.data.csv.is_some() as u8
            + self.data.simulate.is_some() as u8;
        if sources != 1 {
            return reject(
                "data",
                format!("set exactly one of store, csv, simulate ({sources} set)"),
            );
        }
        if self.data.csv_columns.is_some() && self.data.csv.is_none() {
            return reject("data.csv_columns", "only meaningful with data.csv".into());
        }
        if let Some(s) = &self.data.simulate {
            bbfit::families::by_name(&s.distribution).map_err(|e| {
                CliError::Config(format!("config data.simulate.distribution: {e}"))
            })?;
            if s.n == 0 {
                return reject("data.simulate.n", "need at least one row".into());
            }
            if !(0.0..1.0).contains(&s.rho) {
                return reject(
                    "data.simulate.rho",
                    format!("correlation must lie in [0, 1), got {}", s.rho),
                );
            }
        }
        if let Some(m) = &self.model {
            let family = bbfit::families::by_name(&m.family)
                .map_err(|e| CliError::Config(format!("config model.family: {e}")))?;
            if m.response.is_empty() {
                return reject("model.response", "must name a column".into());
            }
            if let Some(p) = &m.predictors {
                if p.len() != family.n_params() {
                    return reject(
                        "model.predictors",
                        format!(
                            "{} has {} parameters, got {} term lists",
                            family.name(),
                            family.n_params(),
                            p.len()
                        ),
                    );
                }
            }
        }
        if self.batches.iterations == 0 {
            return reject("batches.iterations", "need at least one iteration".into());
        }
        if self.batches.size == 0 {
            return reject("batches.size", "batches cannot be empty".into());
        }
        if !(self.engine.nu > 0.0 && self.engine.nu <= 1.0) {
            return reject(
                "engine.nu",
                format!("step length must lie in (0, 1], got {}", self.engine.nu),
            );
        }
        if let Some(t) = self.engine.initial_tau {
            if !(t.is_finite() && t > 0.0) {
                return reject("engine.initial_tau", format!("must be positive, got {t}"));
            }
        }
        if let Some(e) = self.engine.eps_loglik {
            if e.is_nan() {
                return reject("engine.eps_loglik", "must not be NaN".into());
            }
        }
        Ok(())
    }

    /// Apply overrides, then re-validate. One --seed pins the scenario, the
    /// batch stream and the sampler.
    pub fn apply(mut self, o: &Overrides) -> Result<RunConfig, CliError> {
        if let Some(v) = o.nu {
            self.engine.nu = v;
        }
        if let Some(v) = o.policy {
            self.engine.policy = v;
        }
        if let Some(v) = o.batch_size {
            self.batches.size = v;
        }
        if let Some(v) = o.iters {
            self.batches.iterations = v;
        }
        if let Some(v) = o.seed {
            self.batches.seed = v;
            if let Some(s) = &mut self.data.simulate {
                s.seed = v;
            }
        }
        if let Some(v) = o.criterion {
            self.engine.criterion = v;
        }
        if let Some(v) = &o.out {
            self.output = Some(v.clone());
        }
        self.validate()?;
        Ok(self)
    }
}
