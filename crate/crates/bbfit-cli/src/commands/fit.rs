//! fit: prepare the model, slice the data into batches and run the engine.
//! The default policy boosts first so the data picks its terms, then
//! resamples the survivors; any single policy is available directly.

use std::fmt::Write as _;
use std::path::Path;

use bbfit::datastore::{make_batches, ColumnStore, Sampling};
use bbfit::engine::{fit, FitOptions, FitResult, Policy};
use bbfit::model::{ModelSpec, PreparedModel};
use bbfit::terms::TermKind;
use ndarray::Array1;
use serde_json::json;

use crate::commands::{open_data, write_text};
use crate::config::{PolicyMode, RunConfig, SamplingMode};
use crate::error::CliError;
use crate::manifest::write_manifest;

pub fn run(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let store = open_data(config)?;
    let spec = model_spec(config, &store)?;
    let prepared = PreparedModel::prepare(&spec, &store)?;
    let sampling = match config.batches.sampling {
        SamplingMode::WithReplacement => Sampling::WithReplacement,
        SamplingMode::Epoch => Sampling::Epoch,
    };
    let batches = make_batches(
        store.n_rows(),
        config.batches.iterations + 1,
        config.batches.size,
        sampling,
        config.batches.seed,
    )?;

    let (model, result, stage1) = match config.engine.policy {
        PolicyMode::TwoStage => {
            let first = fit(&prepared, &store, &batches, &options(config, Policy::Boost))?;
            let reduced = retain_updated(&spec, &first);
            let kept: usize = reduced.predictors.iter().map(|t| t.len()).sum();
            let total: usize = spec.predictors.iter().map(|t| t.len()).sum();
            println!(
                "stage 1 (boost): {} of {} updates accepted, {kept} of {total} terms retained",
                first.stats.updates_accepted, first.stats.iterations
            );
            let prepared2 = PreparedModel::prepare(&reduced, &store)?;
            let second = fit(
                &prepared2,
                &store,
                &batches,
                &options(config, Policy::Resample),
            )?;
            (prepared2, second, Some(first))
        }
        single => {
            let policy = match single {
                PolicyMode::Plain => Policy::Plain,
                PolicyMode::Boost => Policy::Boost,
                PolicyMode::Resample => Policy::Resample,
                PolicyMode::TwoStage => unreachable!(),
            };
            let result = fit(&prepared, &store, &batches, &options(config, policy))?;
            (prepared, result, None)
        }
    };

    write_selection(out, &model, stage1.as_ref().unwrap_or(&result), stage1.is_some())?;
    write_paths(out, &result)?;
    write_fit_json(out, config, &model, &result)?;
    write_manifest(out, "fit", config, &[("batches", config.batches.seed)])?;
    println!(
        "fit: {} iterations, {} updates accepted, final out-of-sample loglik {:.4} -> {}",
        result.stats.iterations,
        result.stats.updates_accepted,
        result.loglik_path.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn model_spec(config: &RunConfig, store: &ColumnStore) -> Result<ModelSpec, CliError> {
    let model = config.model.as_ref().ok_or_else(|| {
        CliError::Config("config model: the fit command needs a model section".into())
    })?;
    Ok(match &model.predictors {
        Some(p) => ModelSpec {
            family: model.family.clone(),
            response: model.response.clone(),
            predictors: p.clone(),
        },
        None => ModelSpec::auto_all(
            &model.family,
            &model.response,
            &bbfit::simgen::model_covariates(store),
        )?,
    })
}

fn options(config: &RunConfig, policy: Policy) -> FitOptions {
    let defaults = FitOptions::default();
    FitOptions {
        policy,
        nu: config.engine.nu,
        criterion: config.engine.criterion.to_engine(),
        eps_improve: config.engine.eps_loglik,
        slice: config.engine.slice,
        fix_tau: config.engine.fix_tau,
        initial_tau: config.engine.initial_tau.unwrap_or(defaults.initial_tau),
        burn_in: config.engine.burn_in,
        seed: config.batches.seed,
    }
}

/// Keep intercepts plus every term the boosting stage touched at least once.
fn retain_updated(spec: &ModelSpec, first: &FitResult) -> ModelSpec {
    let mut updates: Vec<Vec<usize>> = first
        .final_betas
        .iter()
        .map(|terms| vec![0; terms.len()])
        .collect();
    for chosen in &first.selected {
        for &(k, j) in chosen {
            updates[k][j] += 1;
        }
    }
    let predictors = spec
        .predictors
        .iter()
        .zip(&updates)
        .map(|(terms, counts)| {
            terms
                .iter()
                .zip(counts)
                .filter(|(t, &c)| t.kind == TermKind::Intercept || c > 0)
                .map(|(t, _)| t.clone())
                .collect()
        })
        .collect();
    ModelSpec {
        family: spec.family.clone(),
        response: spec.response.clone(),
        predictors,
    }
}

/// Selection table: how often each term won an iteration, and whether it
/// survives into the final model.
fn write_selection(
    out: &Path,
    final_model: &PreparedModel,
    source: &FitResult,
    two_stage: bool,
) -> Result<(), CliError> {
    let family = bbfit::families::by_name(&final_model.family)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let freq = source.selection_frequency();
    let retained: Vec<Vec<String>> = final_model
        .params
        .iter()
        .map(|terms| terms.iter().map(|t| t.label.clone()).collect())
        .collect();
    let mut rows = Vec::new();
    for (k, labels) in source.labels.iter().enumerate() {
        for (j, label) in labels.iter().enumerate() {
            rows.push(json!({
                "parameter": family.param_names()[k],
                "term": label,
                "frequency": freq[k][j],
                "retained": retained[k].contains(label),
            }));
        }
    }
    let doc = json!({ "stage": if two_stage { "boost" } else { "final" }, "terms": rows });
    write_text(
        &out.join("selection.json"),
        &(serde_json::to_string_pretty(&doc)? + "\n"),
    )
}

/// Per-iteration paths in long CSV form, one row per term and iteration.
fn write_paths(out: &Path, result: &FitResult) -> Result<(), CliError> {
    let mut csv = String::from("iteration,param,term,label,tau,coefficient_norm,loglik\n");
    for (it, (betas, taus)) in result.beta_path.iter().zip(&result.tau_path).enumerate() {
        let ll = result.loglik_path[it];
        for (k, terms) in betas.iter().enumerate() {
            for (j, beta) in terms.iter().enumerate() {
                let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
                writeln!(
                    csv,
                    "{it},{k},{j},{},{:.17e},{norm:.17e},{ll:.17e}",
                    result.labels[k][j], taus[k][j]
                )
                .expect("string writes cannot fail");
            }
        }
    }
    write_text(&out.join("paths.csv"), &csv)
}

fn betas_json(betas: &[Vec<Array1<f64>>]) -> Vec<Vec<Vec<f64>>> {
    betas
        .iter()
        .map(|terms| terms.iter().map(|b| b.to_vec()).collect())
        .collect()
}

/// Everything evaluate needs in one document: the prepared model, the final
/// coefficients and the whole path.
fn write_fit_json(
    out: &Path,
    config: &RunConfig,
    model: &PreparedModel,
    result: &FitResult,
) -> Result<(), CliError> {
    let doc = json!({
        "family": model.family,
        "response": model.response,
        "policy": config.engine.policy,
        "criterion": config.engine.criterion,
        "nu": config.engine.nu,
        "model": serde_json::from_str::<serde_json::Value>(&model.to_json())?,
        "labels": result.labels,
        "betas": betas_json(&result.final_betas),
        "taus": result.final_taus,
        "loglik_path": result.loglik_path,
        "beta_path": result.beta_path.iter().map(|b| betas_json(b)).collect::<Vec<_>>(),
        "tau_path": result.tau_path,
        "selected": result.selected,
        "selection_frequency": result.selection_frequency(),
        "stats": result.stats,
    });
    write_text(&out.join("fit.json"), &(serde_json::to_string(&doc)? + "\n"))
}
