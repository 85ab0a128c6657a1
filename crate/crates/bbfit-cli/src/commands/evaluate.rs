//! evaluate: score a fitted model (or the generating truth itself) on a
//! held-out store and export the diagnostic data behind the usual plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bbfit::datastore::ColumnStore;
use bbfit::eval::{
    crps_mean, effect_range, mse, mse_centered, pit_histogram, pit_values, rate_above,
    worm_data, EvalReport,
};
use bbfit::model::PreparedModel;
use bbfit::simgen::TrueModel;
use ndarray::{Array1, Array2};
use serde_json::json;

use crate::commands::write_text;
use crate::error::CliError;
use crate::manifest::write_manifest;

pub struct EvaluateInputs<'a> {
    pub fit: Option<&'a Path>,
    pub store: &'a Path,
    pub truth: Option<&'a Path>,
    pub oracle: bool,
    pub threshold: f64,
    pub seed: u64,
}

pub fn run(inputs: &EvaluateInputs, out: &Path) -> Result<(), CliError> {
    let store = ColumnStore::open(inputs.store)
        .map_err(|e| CliError::Io(format!("{}: {e}", inputs.store.display())))?;
    let truth: Option<TrueModel> = match inputs.truth {
        Some(path) => Some(
            serde_json::from_str(
                &fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
            )
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };

    let (family, response, eta, fitted) = if inputs.oracle {
        let truth = truth.as_ref().ok_or_else(|| {
            CliError::Config("--oracle needs --truth to name the distribution".into())
        })?;
        let family = bbfit::families::by_name(&truth.distribution)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let eta = truth_eta(&store, truth)?;
        (family, "y".to_string(), eta, None)
    } else {
        let path = inputs.fit.ok_or_else(|| {
            CliError::Config("evaluate needs --fit (or --oracle with --truth)".into())
        })?;
        let doc: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        )?;
        let model = PreparedModel::from_json(&serde_json::to_string(&doc["model"])?)?;
        let raw: Vec<Vec<Vec<f64>>> = serde_json::from_value(doc["betas"].clone())?;
        let betas: Vec<Vec<Array1<f64>>> = raw
            .into_iter()
            .map(|terms| terms.into_iter().map(Array1::from_vec).collect())
            .collect();
        let family = bbfit::families::by_name(&model.family)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let eta = model.predict_eta(&store, &betas)?;
        let response = model.response.clone();
        write_contribution_path(out, &doc)?;
        (family, response, eta, Some((model, betas, doc)))
    };

    let n = store.n_rows() as usize;
    let y = Array1::from_vec(store.read_column(store.column_index(&response)?)?);
    let mut theta = Array2::zeros((n, family.n_params()));
    for (k, link) in family.links().iter().enumerate() {
        for i in 0..n {
            theta[[i, k]] = link.inverse(eta[[i, k]]);
        }
    }

    let mut report = EvalReport {
        mse_predictor: Vec::new(),
        mse_effect: Vec::new(),
        crps: crps_mean(family.as_ref(), theta.view(), y.view())?,
        fp_rate: Vec::new(),
        tp_rate: Vec::new(),
        pit_bins: Vec::new(),
    };

    let have_truth_eta = (0..family.n_params()).all(|k| {
        store
            .column_index(&format!("true_eta_{}", family.param_names()[k]))
            .is_ok()
    });
    if have_truth_eta {
        for (k, name) in family.param_names().iter().enumerate() {
            let col = store.read_column(store.column_index(&format!("true_eta_{name}"))?)?;
            report
                .mse_predictor
                .push(mse(eta.column(k), Array1::from_vec(col).view())?);
        }
    } else {
        eprintln!(
            "warning: {} has no true_eta_* columns; predictor and effect scores omitted",
            inputs.store.display()
        );
    }

    if let Some((model, betas, _)) = &fitted {
        if let Some(truth) = &truth {
            score_effects(&store, model, betas, truth, inputs.threshold, &mut report, out)?;
        } else {
            eprintln!("warning: no --truth given; term classification rates omitted");
        }
    }

    let pit = pit_values(family.as_ref(), theta.view(), y.view(), inputs.seed)?;
    report.pit_bins = pit_histogram(pit.view(), 10);

    write_text(
        &out.join("report.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    let mut worm = String::from("theoretical,deviation\n");
    for (q, d) in worm_data(pit.view()) {
        writeln!(worm, "{q:.17e},{d:.17e}").expect("string writes cannot fail");
    }
    write_text(&out.join("worm.csv"), &worm)?;
    let mut pit_csv = String::from("pit\n");
    for v in pit.iter() {
        writeln!(pit_csv, "{v:.17e}").expect("string writes cannot fail");
    }
    write_text(&out.join("pit.csv"), &pit_csv)?;

    write_manifest(
        out,
        "evaluate",
        &json!({
            "fit": inputs.fit.map(|p| p.display().to_string()),
            "store": inputs.store.display().to_string(),
            "truth": inputs.truth.map(|p| p.display().to_string()),
            "oracle": inputs.oracle,
            "threshold": inputs.threshold,
            "seed": inputs.seed,
        }),
        &[("pit", inputs.seed)],
    )?;
    println!(
        "evaluated {n} rows: crps {:.6}{} -> {}",
        report.crps,
        if report.mse_predictor.is_empty() {
            String::new()
        } else {
            format!(
                ", predictor mse {}",
                report
                    .mse_predictor
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join("/")
            )
        },
        out.display()
    );
    Ok(())
}

/// Predictors of the generating model, read back from the truth columns.
fn truth_eta(store: &ColumnStore, truth: &TrueModel) -> Result<Array2<f64>, CliError> {
    let n = store.n_rows() as usize;
    let mut eta = Array2::zeros((n, truth.param_names.len()));
    for (k, name) in truth.param_names.iter().enumerate() {
        let idx = store
            .column_index(&format!("true_eta_{name}"))
            .map_err(|e| CliError::Config(format!("--oracle: {e}")))?;
        for (i, v) in store.read_column(idx)?.into_iter().enumerate() {
            eta[[i, k]] = v;
        }
    }
    Ok(eta)
}

/// Effect-level scores: squared error against the stored true effects, and
/// the share of true/noise terms whose fitted range clears the threshold.
fn score_effects(
    store: &ColumnStore,
    model: &PreparedModel,
    betas: &[Vec<Array1<f64>>],
    truth: &TrueModel,
    threshold: f64,
    report: &mut EvalReport,
    out: &Path,
) -> Result<(), CliError> {
    let family = bbfit::families::by_name(&model.family)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut effects_csv = String::from("param,term,row,value\n");
    for (k, terms) in model.params.iter().enumerate() {
        let mut true_ranges = Vec::new();
        let mut noise_ranges = Vec::new();
        let truth_effects = truth.effects.get(k);
        for (j, term) in terms.iter().enumerate() {
            if term.spec.covariates.is_empty() {
                continue;
            }
            let predicted = model.predict_term(store, k, j, betas)?;
            let range = effect_range(predicted.view());
            let is_true = truth_effects
                .map(|fx| fx.iter().any(|e| e.covariates == term.spec.covariates))
                .unwrap_or(false);
            if is_true {
                true_ranges.push(range);
            } else {
                noise_ranges.push(range);
            }
            let column = format!(
                "true_f_{}_{}",
                family.param_names()[k],
                term.spec.covariates.join("_")
            );
            if let Ok(idx) = store.column_index(&column) {
                let target = Array1::from_vec(store.read_column(idx)?);
                report.mse_effect.push((
                    format!("{}:{}", family.param_names()[k], term.label),
                    mse_centered(predicted.view(), target.view())?,
                ));
            }
            for (row, v) in predicted.iter().enumerate() {
                writeln!(
                    effects_csv,
                    "{},{},{row},{v:.17e}",
                    family.param_names()[k],
                    term.label
                )
                .expect("string writes cannot fail");
            }
        }
        report.fp_rate.push(rate_above(&noise_ranges, threshold));
        report.tp_rate.push(rate_above(&true_ranges, threshold));
    }
    write_text(&out.join("effects.csv"), &effects_csv)
}

/// Per-iteration coefficient norms, the plottable summary of how each term
/// contribution moved over the run.
fn write_contribution_path(out: &Path, doc: &serde_json::Value) -> Result<(), CliError> {
    let beta_path: Vec<Vec<Vec<Vec<f64>>>> = match doc.get("beta_path") {
        Some(v) if !v.is_null() => serde_json::from_value(v.clone())?,
        _ => return Ok(()),
    };
    let labels: Vec<Vec<String>> = serde_json::from_value(doc["labels"].clone())?;
    let mut csv = String::from("iteration,param,term,label,coefficient_norm\n");
    for (it, params) in beta_path.iter().enumerate() {
        for (k, terms) in params.iter().enumerate() {
            for (j, beta) in terms.iter().enumerate() {
                let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
                writeln!(csv, "{it},{k},{j},{},{norm:.17e}", labels[k][j])
                    .expect("string writes cannot fail");
            }
        }
    }
    write_text(&out.join("contribution_path.csv"), &csv)
}
