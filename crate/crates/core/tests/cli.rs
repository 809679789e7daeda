//! End-to-end checks of the installed binary: exit codes, artifacts, flags.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fediod"))
}

#[test]
fn run_subcommand_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{
              "mode": "fediod",
              "dataset": {{"kind": "blobs", "classes": 2, "per_class": 20, "spread": 0.1}},
              "nodes": 2,
              "alpha": 1.0,
              "seeds": [0, 1],
              "hp": {{"local_epochs": 4, "distill_steps": 4, "distill_batch": 4, "eval_interval": 2}},
              "arch": {{"teacher_hidden": [6], "student_hidden": [6], "generator_hidden": [6],
                        "disc_hidden": [6], "noise_dim": 4}},
              "output_dir": "{}"
            }}"#,
            out.display()
        ),
    )
    .unwrap();

    let status = bin().args(["run", cfg.to_str().unwrap()]).env("FEDIOD_LOG", "quiet").status().unwrap();
    assert!(status.success());
    for f in ["report.json", "losses.csv", "ledger.csv", "accuracy.svg"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    // --seed-override and --output-dir redirect a single-seed rerun
    let alt = dir.path().join("alt");
    let status = bin()
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--output-dir",
            alt.to_str().unwrap(),
            "--seed-override",
            "7",
        ])
        .env("FEDIOD_LOG", "quiet")
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(alt.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seeds"], serde_json::json!([7]));
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_config_exits_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"mode": "fediod", "dataset": {"kind": "blobs"}, "alpha": -2}"#).unwrap();
    let output = bin().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("alpha"), "stderr was: {stderr}");

    let output = bin().args(["run", "/no/such/config.json"]).output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn heterogeneous_teacher_architectures_distill() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("het");
    let cfg = dir.path().join("het.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{
              "mode": "fediod",
              "dataset": {{"kind": "blobs", "classes": 2, "per_class": 20, "spread": 0.1}},
              "nodes": 3,
              "alpha": 1.0,
              "seeds": [0],
              "hp": {{"local_epochs": 4, "distill_steps": 4, "distill_batch": 4, "eval_interval": 2}},
              "arch": {{"teacher_hidden_per_node": [[6], [10, 6], [4]],
                        "student_hidden": [6], "generator_hidden": [6],
                        "disc_hidden": [6], "noise_dim": 4}},
              "output_dir": "{}"
            }}"#,
            out.display()
        ),
    )
    .unwrap();
    let status = bin().args(["run", cfg.to_str().unwrap()]).env("FEDIOD_LOG", "quiet").status().unwrap();
    assert!(status.success(), "heterogeneous-architecture run failed");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ledger_totals"]["model_params"], 0);
}
