use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn flap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flap"))
        .args(args)
        .env_remove("FLAP_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/panel10.csv")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = flap(&[
            "simulate", "--m", "10", "--order", "2", "--T", "300", "--replicates", "20", "--seed", "1",
            "--output", path_str(out),
        ]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    for r in 1..=20 {
        let name = format!("replicate_{r:03}.csv");
        assert_eq!(read(&a.join(&name)), read(&b.join(&name)), "{name}");
    }
    assert!(!a.join("replicate_021.csv").exists());
    assert_eq!(read(&a.join("process.json")), read(&b.join("process.json")));
    assert_eq!(read(&a.join("run.json")), read(&b.join("run.json")));
    let first = String::from_utf8(read(&a.join("replicate_001.csv"))).unwrap();
    assert_eq!(first.lines().count(), 301);
}

#[test]
fn unstable_process_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let process = dir.path().join("process.json");
    std::fs::write(
        &process,
        r#"{"m": 2, "order": 1, "coefficients": [[[1.01, 0.0], [0.0, 0.5]]],
            "intercept": [0.0, 0.0], "innovation_cov": [[1.0, 0.0], [0.0, 1.0]], "seed": 3}"#,
    )
    .unwrap();
    let out = flap(&[
        "simulate", "--process", path_str(&process), "--T", "50", "--output",
        path_str(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("StabilityError"), "{}", stderr(&out));
}

#[test]
fn flap_with_no_components_returns_base_forecasts() {
    let dir = tempfile::tempdir().unwrap();
    let out = flap(&[
        "flap", "--input", path_str(&fixture()), "--p", "0", "--horizon", "6", "--output",
        path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let base = read(&dir.path().join("base_forecasts.csv"));
    assert_eq!(base, read(&dir.path().join("projected_forecasts.csv")));
    assert_eq!(String::from_utf8(base).unwrap().lines().count(), 7);
}

#[test]
fn identity_covariance_with_full_pca_halves_total_variance() {
    let dir = tempfile::tempdir().unwrap();
    let out = flap(&[
        "flap", "--input", path_str(&fixture()), "--scheme", "pca", "--p", "10", "--covariance",
        "identity", "--horizon", "3", "--output", path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("variance_reduction.json"))).unwrap();
    assert_eq!(report["method"], "AR – PCA – 10 (I)");
    for entry in report["horizons"].as_array().unwrap() {
        let total = entry["total_reduction"].as_f64().unwrap();
        assert!((total - 5.0).abs() < 1e-10, "total reduction {total}");
    }
}

#[test]
fn full_pipeline_on_fixture_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "flap".to_string(),
            "--input".into(),
            fixture().to_string_lossy().into_owned(),
            "--p".into(),
            "20".into(),
            "--output".into(),
            out.to_string_lossy().into_owned(),
        ]
    };
    let start = Instant::now();
    let first = Command::new(env!("CARGO_BIN_EXE_flap")).args(args(dir.path())).output().unwrap();
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let files = ["projected_forecasts.csv", "weights.csv", "weights.json", "variance_reduction.json"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| read(&dir.path().join(f))).collect();
    let again = Command::new(env!("CARGO_BIN_EXE_flap")).args(args(dir.path())).output().unwrap();
    assert!(again.status.success());
    for (f, old) in files.iter().zip(before) {
        assert_eq!(read(&dir.path().join(f)), old, "{f} changed on rerun");
    }
}

#[test]
fn evaluate_labels_ranks_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = flap(&[
        "evaluate", "--input", path_str(&fixture()), "--initial-train", "108", "--horizon", "6",
        "--p", "0,5,20", "--scheme", "pca_normal,normal", "--output", path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let scores = String::from_utf8(read(&dir.path().join("scores.csv"))).unwrap();
    assert!(scores.starts_with("origin,series,h,method,se\n"));
    for label in ["AR – Benchmark", "AR – PCA+Norm – 20", "AR – Norm – 5"] {
        assert!(scores.contains(&format!(",{label},")), "missing {label}");
    }
    let ranks: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("ranks.json"))).unwrap();
    let horizons: Vec<u64> = ranks["horizons"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["h"].as_u64().unwrap())
        .collect();
    assert_eq!(horizons, vec![1, 6]);
    let mean_ranks = ranks["horizons"][0]["report"]["mean_ranks"].as_array().unwrap();
    let sum: f64 = mean_ranks.iter().map(|r| r.as_f64().unwrap()).sum();
    assert!((sum - 28.0).abs() < 1e-9);

    let rep = dir.path().join("report");
    let out = flap(&[
        "report", "--scores", path_str(&dir.path().join("scores.csv")), "--output", path_str(&rep),
        "--horizons", "1,6",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read(&rep.join("mse_curves.csv")), read(&dir.path().join("mse_curves.csv")));
    assert_eq!(read(&rep.join("ranks.json")), read(&dir.path().join("ranks.json")));
}

#[test]
fn degenerate_ranks_are_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let out = flap(&[
        "evaluate", "--input", path_str(&fixture()), "--initial-train", "112", "--horizon", "1",
        "--p", "0", "--output", path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ranks: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("ranks.json"))).unwrap();
    let warning = ranks["horizons"][0]["warning"].as_str().unwrap();
    assert!(warning.starts_with("DegenerateRanksError"));
    assert!(stderr(&out).lines().any(|l| l.contains("\"level\":\"warn\"")));
}

#[test]
fn config_file_with_output_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture(), dir.path().join("panel.csv")).unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        r#"
seed = 3
output_dir = "runs/one"

[input]
path = "panel.csv"

[components]
schemes = ["normal"]
p = [4]
forecaster = { family = "ar", max_order = 2 }

[cv]
initial_train = 115
horizon = 2
"#,
    )
    .unwrap();
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_flap"))
        .args(["evaluate", "--config", path_str(&config)])
        .env("FLAP_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let run_dir = root.join("runs/one");
    let saved = String::from_utf8(read(&run_dir.join("config.toml"))).unwrap();
    assert!(saved.contains("standardize = true"));
    assert!(saved.contains("seed = 3"));
    let run: serde_json::Value = serde_json::from_slice(&read(&run_dir.join("run.json"))).unwrap();
    assert_eq!(run["seed"], 3);
    assert_eq!(run["command"], "evaluate");

    // The saved config reproduces the run.
    let rerun = dir.path().join("rerun");
    let out = flap(&["evaluate", "--config", path_str(&run_dir.join("config.toml")), "--output", path_str(&rerun)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read(&rerun.join("scores.csv")), read(&run_dir.join("scores.csv")));
}

#[test]
fn missing_values_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "time,a,b\n1,1.0,2.0\n2,,3.0\n3,2.0,1.0\n").unwrap();
    let out = flap(&["flap", "--input", path_str(&input), "--output", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("MissingDataError"), "{}", stderr(&out));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[components]\nforecaster = { family = \"var\", order = 1 }\n").unwrap();
    let out = flap(&["flap", "--config", path_str(&config), "--output", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ConfigError"));

    let out = flap(&["evaluate", "--input", path_str(&fixture()), "--output", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "initial_train is required");
}
