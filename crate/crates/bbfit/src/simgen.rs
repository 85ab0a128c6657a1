//! Synthetic data scenarios for benchmarking: correlated uniform covariates,
//! a fixed menu of nonlinear effects feeding the location and scale
//! predictors, and response draws from any supported family. Training and
//! validation rows are generated in one pass so both share the same effect
//! centering and scaling constants, which are recorded for exact scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{ColumnStore, StoreError};
use crate::families::{self, FamilyError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("correlation must lie in [0, 1), got {0}")]
    BadRho(f64),
    #[error("need at least one observation")]
    NoRows,
}

/// One benchmark scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub distribution: String,
    pub n: usize,
    /// Extra rows generated with the same constants, stored separately.
    #[serde(default)]
    pub n_validation: usize,
    /// Covariates with no influence on the response, named x5, x6, ...
    #[serde(default)]
    pub nnoise: usize,
    /// Neighbouring-covariate correlation (AR(1) structure across columns).
    #[serde(default)]
    pub rho: f64,
    /// Drop all effects and keep only the intercepts.
    #[serde(default)]
    pub intercept_only: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

/// The nonlinear effect menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectFn {
    F1,
    F2,
    F3,
    F4,
    F2d,
}

impl EffectFn {
    pub fn arity(self) -> usize {
        if self == EffectFn::F2d {
            2
        } else {
            1
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            EffectFn::F1 => x[0],
            EffectFn::F2 => x[0] + (2.0 * x[0] - 2.0).powi(2) / 5.5,
            EffectFn::F3 => -x[0] + std::f64::consts::PI * (std::f64::consts::PI * x[0]).sin(),
            EffectFn::F4 => {
                let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
                0.5 * x[0] + 15.0 * (-2.0 * (x[0] - 0.2) * (x[0] - 0.2)).exp() / sqrt_2pi
                    - (-(x[0] + 0.4) * (x[0] + 0.4) / 2.0).exp() / sqrt_2pi
            }
            EffectFn::F2d => x[0].sin() * (0.5 * x[1]).cos(),
        }
    }
}

/// One effect in a predictor with its recorded standardization constants:
/// the stored value is `scale * raw - center`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSpec {
    pub function: EffectFn,
    pub covariates: Vec<String>,
    pub scale: f64,
    pub center: f64,
    /// Name of the stored truth column.
    pub column: String,
}

/// The generating model, written alongside the data for scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrueModel {
    pub distribution: String,
    pub param_names: Vec<String>,
    /// Intercepts on the predictor scale.
    pub intercepts: Vec<f64>,
    pub effects: Vec<Vec<EffectSpec>>,
    pub rho: f64,
    pub covariate_names: Vec<String>,
}

pub struct SimOutput {
    pub train: ColumnStore,
    pub validation: ColumnStore,
    pub truth: TrueModel,
}

/// Lower Cholesky factor of the AR(1) correlation matrix with parameter rho
/// in closed form: row i is (rho^i, rho^{i-1}*s, ..., s) with s = sqrt(1-rho^2).
pub fn ar1_cholesky(dim: usize, rho: f64) -> Vec<Vec<f64>> {
    let s = (1.0 - rho * rho).sqrt();
    let mut l = vec![vec![0.0; dim]; dim];
    for (i, row) in l.iter_mut().enumerate() {
        row[0] = rho.powi(i as i32);
        for j in 1..=i {
            row[j] = rho.powi((i - j) as i32) * s;
        }
    }
    l
}

fn predictor_assignments(intercept_only: bool) -> Vec<Vec<(EffectFn, Vec<&'static str>)>> {
    if intercept_only {
        return vec![Vec::new(), Vec::new()];
    }
    vec![
        vec![
            (EffectFn::F1, vec!["x1"]),
            (EffectFn::F3, vec!["x3"]),
            (EffectFn::F2d, vec!["lon", "lat"]),
        ],
        vec![
            (EffectFn::F2, vec!["x2"]),
            (EffectFn::F3, vec!["x3"]),
            (EffectFn::F4, vec!["x4"]),
        ],
    ]
}

fn intercepts_for(distribution: &str) -> Vec<f64> {
    match distribution {
        "NO" => vec![0.0, 0.0],
        "GA" => vec![1.0, -1.0],
        "ZAP" => vec![1.0, -1.5],
        // Calibrated so that about 97.4% of the counts are zero.
        "DGP" => vec![0.0, (1.0_f64 / 0.974 - 1.0).ln()],
        other => unreachable!("unchecked distribution {other}"),
    }
}

/// Generate a scenario. The returned stores contain the response, all
/// covariates, and truth columns (`true_eta_*`, `true_f_*`) for scoring.
pub fn simulate(config: &ScenarioConfig) -> Result<SimOutput, SimError> {
    let family = families::by_name(&config.distribution)?;
    if !(0.0..1.0).contains(&config.rho) {
        return Err(SimError::BadRho(config.rho));
    }
    if config.n == 0 {
        return Err(SimError::NoRows);
    }
    let intercept_only = config.intercept_only || family.name() == "DGP";
    let total = config.n + config.n_validation;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut covariate_names: Vec<String> =
        ["x1", "x2", "x3", "x4", "lon", "lat"].iter().map(|s| s.to_string()).collect();
    for i in 0..config.nnoise {
        covariate_names.push(format!("x{}", 5 + i));
    }
    let n_cov = covariate_names.len();

    // Uniform draws, then a row-wise lower-triangular mix for correlation.
    let mut cov: Vec<Vec<f64>> = vec![vec![0.0; total]; n_cov];
    let l = if config.rho > 0.0 {
        Some(ar1_cholesky(n_cov, config.rho))
    } else {
        None
    };
    let mut row = vec![0.0; n_cov];
    for i in 0..total {
        for r in row.iter_mut() {
            *r = rng.random_range(-2.0..2.0);
        }
        match &l {
            None => {
                for (c, col) in cov.iter_mut().enumerate() {
                    col[i] = row[c];
                }
            }
            Some(l) => {
                for (c, col) in cov.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for (d, lcd) in l[c][..=c].iter().enumerate() {
                        v += lcd * row[d];
                    }
                    col[i] = v;
                }
            }
        }
    }
    let col_by_name = |name: &str| -> &Vec<f64> {
        &cov[covariate_names.iter().position(|n| n == name).unwrap()]
    };

    // Raw effects over all rows; scaling and centering constants come from
    // the training rows only so validation data uses identical curves.
    let param_names: Vec<String> = family.param_names().iter().map(|s| s.to_string()).collect();
    let intercepts = intercepts_for(family.name());
    let assignments = predictor_assignments(intercept_only);
    let mut effects: Vec<Vec<EffectSpec>> = Vec::new();
    let mut effect_values: Vec<Vec<Vec<f64>>> = Vec::new();
    for (k, assigned) in assignments.iter().enumerate() {
        let mut specs = Vec::new();
        let mut values = Vec::new();
        for (function, covs) in assigned {
            let inputs: Vec<&Vec<f64>> = covs.iter().map(|c| col_by_name(c)).collect();
            let mut raw = vec![0.0; total];
            let mut args = [0.0; 2];
            for i in 0..total {
                for (a, input) in inputs.iter().enumerate() {
                    args[a] = input[i];
                }
                raw[i] = function.eval(&args[..inputs.len()]);
            }
            let scale = if *function == EffectFn::F1 {
                1.0
            } else {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in &raw[..config.n] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                2.0 / (hi - lo)
            };
            let center =
                raw[..config.n].iter().map(|v| v * scale).sum::<f64>() / config.n as f64;
            for v in raw.iter_mut() {
                *v = *v * scale - center;
            }
            specs.push(EffectSpec {
                function: *function,
                covariates: covs.iter().map(|c| c.to_string()).collect(),
                scale,
                center,
                column: format!("true_f_{}_{}", param_names[k], covs.join("_")),
            });
            values.push(raw);
        }
        effects.push(specs);
        effect_values.push(values);
    }

    // Predictors, parameters, and response draws.
    let links = family.links();
    let mut eta: Vec<Vec<f64>> = (0..param_names.len())
        .map(|k| {
            let mut e = vec![intercepts[k]; total];
            for values in &effect_values[k] {
                for i in 0..total {
                    e[i] += values[i];
                }
            }
            e
        })
        .collect();
    let mut y = vec![0.0; total];
    let mut theta = vec![0.0; param_names.len()];
    for i in 0..total {
        for (k, link) in links.iter().enumerate() {
            theta[k] = link.inverse(eta[k][i]);
        }
        y[i] = family.sample(&theta, &mut rng);
    }

    // Assemble columns: response, covariates, truths.
    let mut names = vec!["y".to_string()];
    let mut columns = vec![y];
    for (name, col) in covariate_names.iter().zip(cov.into_iter()) {
        names.push(name.clone());
        columns.push(col);
    }
    for (k, pname) in param_names.iter().enumerate() {
        names.push(format!("true_eta_{pname}"));
        columns.push(std::mem::take(&mut eta[k]));
    }
    for (k, specs) in effects.iter().enumerate() {
        for (spec, values) in specs.iter().zip(effect_values[k].iter()) {
            names.push(spec.column.clone());
            columns.push(values.clone());
        }
    }

    let train_cols: Vec<Vec<f64>> = columns.iter().map(|c| c[..config.n].to_vec()).collect();
    let valid_cols: Vec<Vec<f64>> = columns.iter().map(|c| c[config.n..].to_vec()).collect();
    let train = ColumnStore::from_columns(names.clone(), train_cols)?;
    let validation = ColumnStore::from_columns(names, valid_cols)?;
    Ok(SimOutput {
        train,
        validation,
        truth: TrueModel {
            distribution: family.name().to_string(),
            param_names,
            intercepts,
            effects,
            rho: config.rho,
            covariate_names,
        },
    })
}

/// Convenience: covariates eligible for modelling (everything except the
/// response and truth columns).
pub fn model_covariates(store: &ColumnStore) -> Vec<String> {
    store
        .column_names()
        .iter()
        .filter(|n| *n != "y" && !n.starts_with("true_"))
        .cloned()
        .collect()
}
