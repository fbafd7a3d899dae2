use std::path::Path;
use std::process::{Command, Output};

fn nilm(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nilm"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .expect("spawn nilm")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.days=9",
    "--set",
    "synth.devices=3",
    "--set",
    "forecast.test_days=1",
    "--set",
    "forecast.stride=900",
    "--set",
    "forecast.train.max_epochs=2",
    "--set",
    "disaggregation.iterations=20",
];

#[test]
fn predict_without_model_names_train_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let out = nilm(dir.path(), &["predict"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("train-forecast"), "{}", stderr(&out));
}

#[test]
fn disaggregate_without_series_names_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let out = nilm(dir.path(), &["disaggregate"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("`ingest`"), "{}", stderr(&out));
}

#[test]
fn bad_override_reports_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = nilm(dir.path(), &["synth-gen", "--set", "disaggregation.particles=many"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("disaggregation.particles"), "{}", stderr(&out));
}

#[test]
fn bad_config_file_reports_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[extraction]\nthreshold = \"high\"\n").unwrap();
    let out = nilm(dir.path(), &["synth-gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("extraction.threshold"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nilm(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(nilm(dir.path(), &["evaluate", "--baseline", "yesterday"]).status.code(), Some(1));
    assert_eq!(nilm(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nilm(dir.path(), &["ingest", "--set", "input.path=\"/nonexistent/series.csv\""]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn stages_run_individually_and_evaluate_reports_baselines() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [
        "synth-gen",
        "ingest",
        "extract-profiles",
        "disaggregate",
        "train-forecast",
        "predict",
    ] {
        let out = nilm(dir.path(), &[&[stage], SMALL].concat());
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let out = nilm(dir.path(), &[&["evaluate", "--baseline", "persistence-15min"], SMALL].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("evaluate/forecast_report.csv")).unwrap();
    let header = report.lines().next().unwrap();
    assert!(header.contains("model_mean") && header.contains("persistence-15min_mean"), "{header}");
    assert!(!header.contains("persistence-7d"), "{header}");
    assert!(report.lines().any(|l| l.starts_with("RMSE")));

    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    for stage in ["synth-gen", "ingest", "extract-profiles", "disaggregate", "train-forecast", "predict", "evaluate"] {
        assert!(manifest.contains(&format!("\"{stage}\"")), "{stage} missing from manifest");
    }
    for file in ["extract/catalog.csv", "disaggregate/report.json", "predict/forecast.csv", "forecast/features.json"] {
        assert!(dir.path().join(file).is_file(), "{file}");
    }
}
