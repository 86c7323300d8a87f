//! Black-box checks of the `fl2t` binary: exit codes, produced artifacts,
//! and byte-level determinism of every file-writing subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fl2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fl2t"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn expect_code(args: &[&str], code: i32) -> Output {
    let out = fl2t(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "fl2t {args:?} exited with {:?}; stderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let body = r#"{
  "master_seed": 11,
  "concepts": 2,
  "samples_per_concept": 8,
  "batch_size": 4,
  "embed_dim": 8,
  "hidden_dim": 8,
  "denoiser_layers": 2,
  "rank": 3,
  "t_steps": 10,
  "epochs_step1": 3,
  "epochs_step2": 3,
  "eval_draws": 16,
  "eval_samples": 8,
  "context_tokens": 4,
  "prompt_context": 2,
  "time_width": 4
}
"#;
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    expect_code(&[], 2);
    expect_code(&["no-such-command"], 2);
    expect_code(&["train-step1"], 2);
    expect_code(&["generate", "--config", "x.json"], 2);
    expect_code(&["train-step1", "--config", "x.json", "--out", "y", "--bogus"], 2);
}

#[test]
fn help_and_version_exit_0() {
    let out = expect_code(&["--help"], 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "train-step1",
        "train-step2",
        "generate",
        "evaluate",
        "baseline",
        "order-experiment",
        "drift-analyze",
        "gradcheck",
    ] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
    expect_code(&["--version"], 0);
    expect_code(&["evaluate", "--help"], 0);
}

#[test]
fn missing_config_file_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    expect_code(
        &["train-step1", "--config", "/nonexistent/config.json", "--out", out.to_str().unwrap()],
        4,
    );
}

#[test]
fn invalid_config_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"concepts": 0}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = expect_code(
        &["train-step1", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
        2,
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("concepts"), "error should name the field: {stderr}");
}

#[test]
fn gradcheck_reports_and_rejects() {
    let out = expect_code(&["gradcheck", "--loss", "r1", "--points", "2", "--seed", "9"], 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("r1"), "gradcheck output names the loss: {text}");
    assert!(text.contains("max relative error"), "gradcheck output reports the error");
    expect_code(&["gradcheck", "--loss", "entropy", "--points", "2"], 3);
    expect_code(&["gradcheck", "--loss", "r1", "--points", "0"], 3);
}

#[test]
fn drift_analyze_writes_summary_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("drift.json");
    let csv = dir.path().join("drift.csv");
    expect_code(
        &[
            "drift-analyze",
            "--trials",
            "50",
            "--dim",
            "8",
            "--seed",
            "3",
            "--out",
            json.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ],
        0,
    );
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap())
        .expect("drift summary is valid JSON");
    assert_eq!(summary["trials"], 50);
    assert_eq!(summary["dim"], 8);
    assert!(summary["min_slack"].as_f64().unwrap() >= -1e-10);
    let table = fs::read_to_string(&csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("trial_id,norm_joint,norm_reduced,reduced"),
        "drift CSV header"
    );
    assert_eq!(lines.count(), 50, "one CSV row per trial");

    expect_code(&["drift-analyze", "--trials", "0", "--out", json.to_str().unwrap()], 3);
}

#[test]
fn pipeline_subcommands_produce_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());

    let step1_dir = dir.path().join("step1");
    expect_code(&["train-step1", "--config", &config, "--out", step1_dir.to_str().unwrap()], 0);
    assert!(step1_dir.join("step1.json").is_file());
    assert!(step1_dir.join("manifest.json").is_file());

    let step2_dir = dir.path().join("step2");
    expect_code(
        &[
            "train-step2",
            "--config",
            &config,
            "--step1",
            step1_dir.join("step1.json").to_str().unwrap(),
            "--out",
            step2_dir.to_str().unwrap(),
        ],
        0,
    );
    let state = step2_dir.join("state.json");
    assert!(state.is_file());

    // Resuming from the checkpoint must match training from scratch.
    let fresh_dir = dir.path().join("step2_fresh");
    expect_code(&["train-step2", "--config", &config, "--out", fresh_dir.to_str().unwrap()], 0);
    assert_eq!(
        fs::read(&state).unwrap(),
        fs::read(fresh_dir.join("state.json")).unwrap(),
        "state from a checkpoint resume differs from a fresh run"
    );

    let samples_a = dir.path().join("samples_a.csv");
    let samples_b = dir.path().join("samples_b.csv");
    for out in [&samples_a, &samples_b] {
        expect_code(
            &[
                "generate",
                "--config",
                &config,
                "--state",
                state.to_str().unwrap(),
                "--concept",
                "1",
                "--count",
                "8",
                "--out",
                out.to_str().unwrap(),
            ],
            0,
        );
    }
    let bytes = fs::read(&samples_a).unwrap();
    assert_eq!(bytes, fs::read(&samples_b).unwrap(), "generation is not deterministic");
    let text = String::from_utf8(bytes).unwrap();
    assert!(
        text.lines().next().unwrap().starts_with("concept_id,prompt_id,"),
        "samples CSV header"
    );
    assert_eq!(text.lines().count(), 9, "header plus eight samples");

    expect_code(
        &[
            "generate",
            "--config",
            &config,
            "--state",
            state.to_str().unwrap(),
            "--concept",
            "7",
            "--out",
            samples_a.to_str().unwrap(),
        ],
        2,
    );

    let eval_a = dir.path().join("eval_a");
    let eval_b = dir.path().join("eval_b");
    for out in [&eval_a, &eval_b] {
        expect_code(&["evaluate", "--config", &config, "--out", out.to_str().unwrap()], 0);
    }
    for file in ["metrics.csv", "state.json", "manifest.json"] {
        assert!(eval_a.join(file).is_file(), "evaluate must write {file}");
    }
    assert_eq!(
        fs::read(eval_a.join("metrics.csv")).unwrap(),
        fs::read(eval_b.join("metrics.csv")).unwrap(),
        "evaluate reruns must agree byte for byte"
    );
    assert_eq!(
        fs::read(eval_a.join("state.json")).unwrap(),
        fs::read(eval_b.join("state.json")).unwrap()
    );
    let metrics = fs::read_to_string(eval_a.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("order_id,concept_id,ia_analog,ims_analog,loss_before,loss_after,forgetting"),
        "metrics CSV header"
    );
    assert_eq!(metrics.lines().count(), 3, "header plus one row per concept");

    let baseline_dir = dir.path().join("baseline");
    expect_code(&["baseline", "--config", &config, "--out", baseline_dir.to_str().unwrap()], 0);
    assert!(baseline_dir.join("metrics.csv").is_file());

    let orders_dir = dir.path().join("orders");
    expect_code(
        &[
            "order-experiment",
            "--config",
            &config,
            "--orders",
            "2",
            "--out",
            orders_dir.to_str().unwrap(),
        ],
        0,
    );
    assert!(orders_dir.join("metrics_order0.csv").is_file());
    assert!(orders_dir.join("metrics_order1.csv").is_file());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(orders_dir.join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["lambda_max_dev"].as_f64().unwrap() <= 1e-12);

    // The manifest pins the resolved configuration.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert_eq!(manifest["master_seed"], 11);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    expect_code(&["train-step1", "--config", &config, "--out", a.to_str().unwrap()], 0);
    expect_code(
        &["train-step1", "--config", &config, "--seed", "99", "--out", b.to_str().unwrap()],
        0,
    );
    assert_ne!(
        fs::read(a.join("step1.json")).unwrap(),
        fs::read(b.join("step1.json")).unwrap(),
        "--seed must reseed the run"
    );
}
