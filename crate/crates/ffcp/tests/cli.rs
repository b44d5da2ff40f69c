//! End-to-end tests of the `ffcp` binary: exit codes, file outputs, config
//! round-trips.

use std::path::Path;
use std::process::{Command, Output};

use ffcp::bench::ReportFile;

fn ffcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffcp"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_data_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let out = ffcp(&[
        "gen-data", "--kind", "synthetic", "--n", "500", "--dx", "8", "--seed", "7", "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("500 rows"));

    let data = ffcp::data::load_csv(&path, &["y".to_string()]).unwrap();
    assert_eq!(data.len(), 500);
    assert_eq!(data.feature_dim(), 8);

    // Same seed → identical file.
    let again = dir.path().join("d2.csv");
    let out = ffcp(&[
        "gen-data", "--kind", "synthetic", "--n", "500", "--dx", "8", "--seed", "7", "--out",
        again.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        std::fs::read_to_string(&again).unwrap()
    );
}

#[test]
fn gen_data_hetero_dispatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    let out = ffcp(&[
        "gen-data", "--kind", "synthetic-hetero", "--n", "50", "--dx", "4", "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(path.exists());
}

#[test]
fn gen_data_missing_out_is_a_usage_error() {
    let out = ffcp(&["gen-data", "--kind", "synthetic", "--n", "10"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("--out"), "stderr should mention --out: {err}");
}

#[test]
fn run_ffcp_writes_a_parseable_report() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let out = ffcp(&[
        "run",
        "--method", "ffcp",
        "--dataset", "synthetic",
        "--n", "400",
        "--dx", "6",
        "--epochs", "5",
        "--seed", "0",
        "--out", report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&report_path).unwrap();
    let parsed: ReportFile = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.reports.len(), 1);
    let r = &parsed.reports[0];
    assert_eq!(r.method, "ffcp");
    assert!(r.coverage > 0.5 && r.coverage <= 1.0);
    assert!(r.mean_length.unwrap().is_finite());
}

#[test]
fn run_fcp_reports_both_band_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("fcp.json");
    let out = ffcp(&[
        "run",
        "--method", "fcp",
        "--dataset", "synthetic",
        "--n", "200",
        "--dx", "5",
        "--epochs", "3",
        "--fcp-samples", "32",
        "--out", report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let parsed: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let r = &parsed.reports[0];
    assert!(r.sound_mean_length.is_some());
    assert!(r.sound_coverage.is_some());
    assert!(r.sound_mean_length.unwrap() >= r.mean_length.unwrap());
}

#[test]
fn run_split_sweep_emits_every_split_plus_best() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("sweep.json");
    let out = ffcp(&[
        "run",
        "--method", "ffcp",
        "--dataset", "synthetic",
        "--n", "300",
        "--dx", "5",
        "--epochs", "3",
        "--split-index", "sweep",
        "--out", report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let parsed: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    // 4 layers → splits 0..=4 plus the tagged best row.
    assert_eq!(parsed.reports.len(), 6);
    assert!(parsed.reports.iter().any(|r| r.method.starts_with("ffcp(best-split=")));
}

#[test]
fn print_config_round_trips() {
    let out = ffcp(&["run", "--method", "fflcp", "--alpha", "0.2", "--print-config"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let config: ffcp::cli::RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(config.alpha, 0.2);
    assert_eq!(config.method.name(), "fflcp");

    // The echoed config reproduces itself through a file.
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, &text).unwrap();
    let out = ffcp(&[
        "run", "--config", cfg_path.to_str().unwrap(), "--print-config",
    ]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), text);
}

#[test]
fn invalid_method_fails_with_diagnostic() {
    let out = ffcp(&["run", "--method", "zigzag"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("zigzag"));
}

#[test]
fn mismatched_method_and_dataset_fail() {
    let out = ffcp(&["run", "--method", "raps", "--dataset", "synthetic", "--n", "100"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("classification"));
}

#[test]
fn bench_writes_json_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("bench");
    let out = ffcp(&[
        "bench",
        "--methods", "vanilla,ffcp",
        "--seeds", "2",
        "--jobs", "2",
        "--dataset", "synthetic",
        "--n", "300",
        "--dx", "5",
        "--epochs", "3",
        "--out", stem.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let json_path = stem.with_extension("json");
    let md_path = stem.with_extension("md");
    let parsed: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(parsed.reports.len(), 4);
    let md = std::fs::read_to_string(&md_path).unwrap();
    assert!(md.contains("| synthetic | vanilla |"));
    assert!(md.contains("| synthetic | ffcp |"));
    assert!(stdout(&out).contains("coverage"));

    // Same seeds → identical numeric columns (runtime aside).
    let stem2 = dir.path().join("bench2");
    let out = ffcp(&[
        "bench",
        "--methods", "vanilla,ffcp",
        "--seeds", "2",
        "--jobs", "2",
        "--dataset", "synthetic",
        "--n", "300",
        "--dx", "5",
        "--epochs", "3",
        "--out", stem2.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let again: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(stem2.with_extension("json")).unwrap())
            .unwrap();
    for (a, b) in parsed.reports.iter().zip(&again.reports) {
        assert_eq!((a.method.as_str(), a.seed), (b.method.as_str(), b.seed));
        assert_eq!(a.coverage, b.coverage);
        assert_eq!(a.mean_length, b.mean_length);
    }
}

#[test]
fn raps_runs_on_class_data() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("raps.json");
    let out = ffcp(&[
        "run",
        "--method", "ffraps",
        "--dataset", "synthetic-classes",
        "--n", "600",
        "--dx", "8",
        "--classes", "4",
        "--epochs", "5",
        "--out", report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let parsed: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let r = &parsed.reports[0];
    assert_eq!(r.method, "ffraps");
    // mean_length carries the mean prediction-set size for classifiers.
    let size = r.mean_length.unwrap();
    assert!(size >= 1.0 && size <= 4.0);
}

#[test]
fn saved_model_reloads_and_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.txt");
    let first = dir.path().join("first.json");
    let second = dir.path().join("second.json");
    let base = [
        "run", "--method", "ffcp", "--dataset", "synthetic", "--n", "300", "--dx", "5",
        "--epochs", "4", "--seed", "3",
    ];

    let mut args: Vec<&str> = base.to_vec();
    args.extend(["--save-model", model_path.to_str().unwrap()]);
    args.extend(["--out", first.to_str().unwrap()]);
    let out = ffcp(&args);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let mut args: Vec<&str> = base.to_vec();
    args.extend(["--load-model", model_path.to_str().unwrap()]);
    args.extend(["--out", second.to_str().unwrap()]);
    let out = ffcp(&args);
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let a: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(&first).unwrap()).unwrap();
    let b: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(&second).unwrap()).unwrap();
    // Same model, same folds → identical coverage and length.
    assert_eq!(a.reports[0].coverage, b.reports[0].coverage);
    assert_eq!(a.reports[0].mean_length, b.reports[0].mean_length);
}

#[test]
fn out_dir_env_supplies_default_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ffcp"))
        .args([
            "run", "--method", "vanilla", "--dataset", "synthetic", "--n", "200", "--dx", "4",
            "--epochs", "2",
        ])
        .env("FFCP_OUT_DIR", dir.path())
        .output()
        .expect("binary spawns");
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(Path::new(&dir.path().join("ffcp-run.json")).exists());
}
