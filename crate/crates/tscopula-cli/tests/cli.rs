//! End-to-end smoke tests of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_tscopula")
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(binary()).args(args).output().expect("spawn tscopula")
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = run(&["train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_field_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"out_dir": "x", "model": {"bins": 1},
            "data": {"source": {"kind": "oracle", "n_train": 10, "n_val": 5}}}"#,
    )
    .unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.bins"), "{stderr}");
}

#[test]
fn train_smoke_writes_artifacts_with_two_stages() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        repo_config("sines_smoke.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoint.json").exists());
    assert!(out_dir.join("flops.json").exists());
    let history = std::fs::read_to_string(out_dir.join("history.jsonl")).unwrap();
    let stages: Vec<String> = history
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert!(stages.iter().any(|s| s == "stage1"));
    assert!(stages.iter().any(|s| s == "stage2"));
}

#[test]
fn same_config_and_seed_reproduce_history_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let run_once = |tag: &str| -> String {
        let out_dir = dir.path().join(tag);
        let out = run(&[
            "train",
            "--config",
            repo_config("sines_smoke.json").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "21",
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_dir.join("history.jsonl")).unwrap()
    };
    // wall-clock timing is the only nondeterministic field; every loss,
    // NLL, and FLOP count must be byte-identical
    let strip = |text: String| -> String {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_secs");
                v.to_string()
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let a = strip(run_once("a"));
    let b = strip(run_once("b"));
    assert_eq!(a, b, "history must be byte-identical under a fixed seed");
}

#[test]
fn joint_mode_produces_single_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("joint");
    let out = run(&[
        "train",
        "--config",
        repo_config("sines_smoke.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--mode",
        "joint",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(out_dir.join("history.jsonl")).unwrap();
    assert!(history.lines().all(|l| l.contains("\"joint\"")));
}

#[test]
fn eval_emits_reports_and_fan_charts() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let out = run(&[
        "train",
        "--config",
        repo_config("sines_smoke.json").to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--config",
        repo_config("sines_smoke.json").to_str().unwrap(),
        "--checkpoint",
        train_dir.join("checkpoint.json").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    let windows = metrics["windows"].as_array().unwrap();
    assert_eq!(windows.len(), 1);
    // report means equal hand-averaged per-window values
    let mean = metrics["crps"]["mean"].as_f64().unwrap();
    let hand: f64 = windows.iter().map(|w| w["crps"].as_f64().unwrap()).sum::<f64>() / windows.len() as f64;
    assert!((mean - hand).abs() < 1e-12);
    assert!(std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap().starts_with("cutoff,"));
    // fan charts exist and are non-empty; the NLL-vs-FLOPs curve came from
    // the sibling history file
    let fan = std::fs::metadata(eval_dir.join("fan_s0.svg")).unwrap();
    assert!(fan.len() > 0);
    assert!(eval_dir.join("nll_vs_flops.svg").exists());
}

#[test]
fn eval_with_zero_cutoffs_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let out = run(&[
        "train",
        "--config",
        repo_config("sines_smoke.json").to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // a config whose eval schedule is empty
    let cfg = dir.path().join("empty_eval.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"extends": "{}", "eval": {{"cutoffs": []}}}}"#,
            repo_config("sines_smoke.json").canonicalize().unwrap().display()
        ),
    )
    .unwrap();
    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        train_dir.join("checkpoint.json").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "{stderr}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["windows"].as_array().unwrap().len(), 0);
}

#[test]
fn copula_demo_emits_four_figures_per_mode_and_ks_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("demo.json");
    std::fs::write(
        &cfg,
        r#"{
          "out_dir": "unused",
          "seed": 5,
          "data": {"source": {"kind": "oracle", "n_train": 4000, "n_val": 400}},
          "model": {
            "marginal_width": 8, "marginal_layers": 1, "marginal_heads": 2, "marginal_ff_hidden": 8,
            "copula_width": 8, "copula_layers": 1, "copula_heads": 2, "copula_ff_hidden": 8,
            "flow_layers": 1, "flow_hidden": 4, "hypernet_hidden": 8,
            "bins": 10, "u_embed_dim": 4, "copula_attn_heads": 1, "copula_head_dim": 4,
            "copula_mlp_hidden": 8, "standardize": false
          },
          "train": {
            "batches_per_epoch": 4, "batch_size": 64,
            "max_epochs_per_stage": 2, "patience": 2
          },
          "demo": {"n_train": 4000, "n_val": 400, "n_heldout": 500, "n_copula_samples": 2000, "grid": 40}
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("demo_out");
    let out = run(&[
        "copula-demo",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // four figures per mode, deterministic filenames
    for mode in ["curriculum", "joint"] {
        for fig in ["joint_density", "copula_density", "marginal_1", "marginal_2"] {
            let p = out_dir.join(format!("{mode}_{fig}.svg"));
            assert!(p.exists(), "missing {}", p.display());
            assert!(std::fs::metadata(&p).unwrap().len() > 0);
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ks_report.json")).unwrap()).unwrap();
    let entries = report.as_array().unwrap();
    assert_eq!(entries.len(), 2);
    for e in entries {
        assert_eq!(e["ks_per_dimension"].as_array().unwrap().len(), 2);
        // curriculum asserted, joint recorded only
        let mode = e["mode"].as_str().unwrap();
        assert_eq!(e["asserted"].as_bool().unwrap(), mode == "curriculum");
    }
}
