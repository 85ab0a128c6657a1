//! End-to-end tests of the bbfit binary: every subcommand, the promised
//! exit codes, and determinism of the files a run leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bbfit::datastore::ColumnStore;

fn bbfit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbfit"))
        .args(args)
        .current_dir(dir)
        .env_remove("BBFIT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_writes_expected_columns_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sim.json"),
        r#"{"data": {"simulate": {"distribution": "NO", "n": 1000, "n_validation": 200,
            "nnoise": 0, "rho": 0.0, "seed": 1}}}"#,
    )
    .unwrap();
    let run = |out: &str| {
        let r = bbfit(&["simulate", "--config", "sim.json", "--out", out], dir.path());
        assert_ok(&r);
    };
    run("a");
    run("b");

    let store = ColumnStore::open(&dir.path().join("a/train.bbfc")).unwrap();
    assert_eq!(store.n_rows(), 1000);
    let names = store.column_names();
    for required in ["y", "x1", "x2", "x3", "x4", "lon", "lat"] {
        assert!(names.iter().any(|n| n == required), "missing {required}");
    }
    for name in names {
        let known = ["y", "x1", "x2", "x3", "x4", "lon", "lat"].contains(&name.as_str());
        assert!(known || name.starts_with("true_"), "unexpected column {name}");
    }
    assert!(dir.path().join("a/validation.bbfc").exists());
    assert!(dir.path().join("a/truth.json").exists());
    assert!(dir.path().join("a/manifest.json").exists());

    for file in ["train.bbfc", "validation.bbfc", "truth.json", "manifest.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn invalid_rho_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sim.json"),
        r#"{"data": {"simulate": {"distribution": "NO", "n": 100, "rho": 1.5}}}"#,
    )
    .unwrap();
    let out = bbfit(&["simulate", "--config", "sim.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("rho"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_fields_are_rejected_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"data": {"simulate": {"distribution": "NO", "n": 100}}, "engin": {"nu": 0.2}}"#,
    )
    .unwrap();
    let out = bbfit(&["simulate", "--config", "bad.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("engin"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_data_file_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("fit.json"),
        r#"{"data": {"store": "no/such/file.bbfc"}, "model": {"family": "NO"}}"#,
    )
    .unwrap();
    let out = bbfit(&["fit", "--config", "fit.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn intercept_only_plain_fit_matches_moment_estimates() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sim.json"),
        r#"{"data": {"simulate": {"distribution": "NO", "n": 4000, "intercept_only": true,
            "seed": 5}}}"#,
    )
    .unwrap();
    assert_ok(&bbfit(
        &["simulate", "--config", "sim.json", "--out", "data"],
        dir.path(),
    ));
    fs::write(
        dir.path().join("fit.json"),
        r#"{
          "data": {"store": "data/train.bbfc"},
          "model": {"family": "NO", "predictors": [[{"kind": "intercept"}], [{"kind": "intercept"}]]},
          "batches": {"iterations": 80, "size": 4000, "seed": 2},
          "engine": {"policy": "plain", "nu": 0.1}
        }"#,
    )
    .unwrap();
    let out = bbfit(&["fit", "--config", "fit.json", "--out", "run"], dir.path());
    assert_ok(&out);

    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/fit.json")).unwrap())
            .unwrap();
    let mu = doc["betas"][0][0][0].as_f64().unwrap();
    let eta_sigma = doc["betas"][1][0][0].as_f64().unwrap();

    let store = ColumnStore::open(&dir.path().join("data/train.bbfc")).unwrap();
    let y = store.read_column(store.column_index("y").unwrap()).unwrap();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;

    // Closed-form Gaussian MLE; the scale lives on log(sigma^2).
    assert!(
        (mu - mean).abs() < 0.02 * var.sqrt().max(mean.abs()),
        "mu {mu} vs mean {mean}"
    );
    assert!(
        (eta_sigma.exp() / var - 1.0).abs() < 0.02,
        "sigma^2 {} vs variance {var}",
        eta_sigma.exp()
    );
}

#[test]
fn oracle_evaluation_scores_zero_mse_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sim.json"),
        r#"{"data": {"simulate": {"distribution": "NO", "n": 800, "n_validation": 400,
            "intercept_only": true, "seed": 11}}}"#,
    )
    .unwrap();
    assert_ok(&bbfit(
        &["simulate", "--config", "sim.json", "--out", "data"],
        dir.path(),
    ));
    let eval = |out: &str| {
        let r = bbfit(
            &[
                "evaluate",
                "--oracle",
                "--store",
                "data/validation.bbfc",
                "--truth",
                "data/truth.json",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert_ok(&r);
    };
    eval("e1");
    eval("e2");

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e1/report.json")).unwrap())
            .unwrap();
    let mse = report["mse_predictor"].as_array().unwrap();
    assert_eq!(mse.len(), 2);
    for v in mse {
        assert_eq!(v.as_f64().unwrap(), 0.0);
    }
    // Standard Gaussian irreducible score: E[crps] = 1/sqrt(pi) ~ 0.564.
    let crps = report["crps"].as_f64().unwrap();
    assert!((crps - 0.5642).abs() < 0.08, "crps {crps}");
    assert!(dir.path().join("e1/worm.csv").exists());
    assert!(dir.path().join("e1/pit.csv").exists());

    for file in ["report.json", "worm.csv", "pit.csv", "manifest.json"] {
        let a = fs::read(dir.path().join("e1").join(file)).unwrap();
        let b = fs::read(dir.path().join("e2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical evaluations");
    }
}

#[test]
fn evaluation_without_truth_warns_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("y,x1\n");
    for i in 0..80 {
        let x = (i as f64) / 40.0 - 1.0;
        csv.push_str(&format!("{},{x}\n", 0.3 + 0.5 * x));
    }
    fs::write(dir.path().join("data.csv"), csv).unwrap();
    assert_ok(&bbfit(
        &["ingest", "--csv", "data.csv", "--out", "store"],
        dir.path(),
    ));
    fs::write(
        dir.path().join("fit.json"),
        r#"{
          "data": {"store": "store/data.bbfc"},
          "model": {"family": "NO", "predictors": [
            [{"kind": "intercept"}, {"kind": "linear", "covariates": ["x1"]}],
            [{"kind": "intercept"}]]},
          "batches": {"iterations": 30, "size": 80, "seed": 1},
          "engine": {"policy": "plain", "nu": 0.2}
        }"#,
    )
    .unwrap();
    assert_ok(&bbfit(&["fit", "--config", "fit.json", "--out", "run"], dir.path()));

    let out = bbfit(
        &[
            "evaluate",
            "--fit",
            "run/fit.json",
            "--store",
            "store/data.bbfc",
            "--out",
            "eval",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("warning"), "stderr: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap())
            .unwrap();
    assert!(report["mse_predictor"].as_array().unwrap().is_empty());
    assert!(report["crps"].as_f64().unwrap().is_finite());
}

#[test]
fn out_dir_env_var_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sim.json"),
        r#"{"data": {"simulate": {"distribution": "NO", "n": 50, "intercept_only": true}}}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bbfit"))
        .args(["simulate", "--config", "sim.json"])
        .current_dir(dir.path())
        .env("BBFIT_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(dir.path().join("from_env/train.bbfc").exists());
}
