use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_riskadj");

fn riskadj(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "hospitals=12", "--set", "min_admissions=120", "--set", "max_admissions=200"];

fn small_dataset(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["generate", "--out", s(&path), "--seed", seed];
    args.extend(SMALL);
    ok(riskadj(&args));
    path
}

const FAST_NN: [&str; 8] =
    ["--set", "training.max_epochs=2", "--set", "arch.lp_width=8", "--set", "training.batch_size=256", "--set", "arch.dropout=0.0"];

fn train(dir: &Path, model: &str, data: &Path, extra: &[&str]) -> (PathBuf, Output) {
    let out_dir = dir.join(model);
    let mut args = vec!["train", "--model", model, "--dataset", s(data), "--out-dir", s(&out_dir)];
    if model == "nn" || model == "fully-nonlinear" {
        args.extend(FAST_NN);
    }
    args.extend(extra);
    let out = riskadj(&args);
    (out_dir, out)
}

fn assert_manifest_complete(manifest: &Path) {
    let m = read_json(manifest);
    let base = manifest.parent().unwrap();
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        assert!(base.join(o["path"].as_str().unwrap()).exists(), "{o}");
    }
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn version_reports_semver_and_schema() {
    let out = ok(riskadj(&["--version"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(env!("CARGO_PKG_VERSION")) && text.contains("config schema 1"), "{text}");
}

#[test]
fn generate_writes_files_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path(), "a.csv", "3");
    let b = small_dataset(dir.path(), "b.csv", "3");
    assert!(dir.path().join("a.meta.json").exists());
    assert_manifest_complete(&dir.path().join("a.manifest.json"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = small_dataset(dir.path(), "c.csv", "4");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn generate_rejects_vocab_smaller_than_categories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let r = riskadj(&["generate", "--out", s(&out), "--set", "vocab_size=10", "--set", "n_categories=20"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (_, r) = train(dir.path(), "perceptron", &data, &[]);
    assert_eq!(code(&r), 2);
    let (_, r) = train(dir.path(), "hglm", &data, &["--set", "solver.nope=1"]);
    assert_eq!(code(&r), 2);
    let r = Command::new(BIN).args(["grad-check"]).env("RISKADJ_THREADS", "zero").output().unwrap();
    assert_eq!(code(&r), 2);
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r) = train(dir.path(), "hglm", &dir.path().join("absent.csv"), &[]);
    assert_eq!(code(&r), 3);
}

#[test]
fn hospital_mean_checkpoint_has_zero_beta() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (out_dir, r) = train(dir.path(), "hospital-mean", &data, &[]);
    ok(r);
    let ckpt = read_json(&out_dir.join("best.ckpt"));
    let beta = ckpt["weights"]["params"]["beta"].as_array().unwrap();
    assert!(!beta.is_empty() && beta.iter().all(|b| b.as_f64() == Some(0.0)));
    for f in ["log.jsonl", "split.csv", "summary.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert_manifest_complete(&out_dir.join("manifest.json"));
}

#[test]
fn nn_grid_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (out_dir, r) = train(dir.path(), "nn", &data, &["--grid"]);
    ok(r);
    let grid = std::fs::read_to_string(out_dir.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 4);
    assert!(grid.lines().skip(1).all(|l| l.ends_with(',')), "grid cell failed: {grid}");
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (a, r) = train(&dir.path().join("run1"), "nn", &data, &["--seed", "5"]);
    ok(r);
    let out_dir = dir.path().join("run2");
    let r = Command::new(BIN)
        .args(["train", "--model", "nn", "--dataset", s(&data), "--out-dir", s(&out_dir.join("nn")), "--seed", "5"])
        .args(FAST_NN)
        .env("RISKADJ_THREADS", "1")
        .output()
        .unwrap();
    ok(r);
    for f in ["best.ckpt", "log.jsonl", "split.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(out_dir.join("nn").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (_, r) = train(dir.path(), "nn", &data, &["--set", "training.base_lr=1e300", "--set", "training.max_lr=1e300"]);
    assert_eq!(code(&r), 4, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("epoch"));
}

#[test]
fn evaluate_reports_metrics_and_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (out_dir, r) = train(dir.path(), "hglm", &data, &[]);
    ok(r);
    let ckpt = out_dir.join("best.ckpt");
    let out = ok(riskadj(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--part", "train", "--per-cohort"]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["overall"]["roc_auc"].as_f64().unwrap() > 0.5);
    assert_eq!(report["per_cohort"].as_object().unwrap().len(), 5);
    let saved = read_json(&out_dir.join("eval").join("evaluation_train.json"));
    assert_eq!(saved, report);
    assert_manifest_complete(&out_dir.join("eval").join("manifest.json"));
    assert_manifest_complete(&out_dir.join("manifest.json"));
}

#[test]
fn evaluate_rejects_bad_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (out_dir, r) = train(dir.path(), "hglm", &data, &[]);
    ok(r);
    let ckpt = out_dir.join("best.ckpt");

    let text = std::fs::read_to_string(&ckpt).unwrap();
    let truncated = dir.path().join("truncated.ckpt");
    std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    let r = riskadj(&["evaluate", "--checkpoint", s(&truncated), "--dataset", s(&data)]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("checkpoint"));

    let other = dir.path().join("other.csv");
    ok(riskadj(&["generate", "--out", s(&other), "--set", "hospitals=13", "--set", "min_admissions=120", "--set", "max_admissions=200"]));
    let r = riskadj(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&other)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn compare_effects_between_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.csv", "0");
    let (hglm, r) = train(dir.path(), "hglm", &data, &[]);
    ok(r);
    let (nn, r) = train(dir.path(), "nn", &data, &[]);
    ok(r);
    let (full, r) = train(dir.path(), "fully-nonlinear", &data, &[]);
    ok(r);
    let a = hglm.join("best.ckpt");
    let b = nn.join("best.ckpt");

    let self_dir = dir.path().join("self");
    let out = ok(riskadj(&["compare", "--a", s(&a), "--b", s(&a), "--dataset", s(&data), "--out-dir", s(&self_dir)]));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((summary["rho"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let cmp = dir.path().join("cmp");
    let out = ok(riskadj(&["compare", "--a", s(&b), "--b", s(&a), "--dataset", s(&data), "--out-dir", s(&cmp)]));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["a"]["truth_rho"].is_f64() && summary["b"]["truth_rho"].is_f64());
    let scatter = std::fs::read_to_string(cmp.join("omega_scatter.csv")).unwrap();
    assert_eq!(scatter.lines().next(), Some("hospital,omega_model,omega_baseline"));
    assert_eq!(scatter.lines().count(), 1 + 12);
    for f in ["omega_hist_a.csv", "omega_hist_b.csv", "comparison.json"] {
        assert!(cmp.join(f).exists(), "{f}");
    }
    assert_manifest_complete(&cmp.join("manifest.json"));

    let c = full.join("best.ckpt");
    let r = riskadj(&["compare", "--a", s(&a), "--b", s(&c), "--dataset", s(&data), "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("hospital effects"));
}

#[test]
fn grad_check_passes() {
    let out = ok(riskadj(&["grad-check", "--set", "seeds=3"]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["seeds"].as_array().unwrap().len(), 3);
    ok(riskadj(&["grad-check", "--model", "fully-nonlinear", "--set", "seeds=2"]));
    assert_eq!(code(&riskadj(&["grad-check", "--model", "hglm"])), 2);
}

#[test]
fn small_experiment_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("exp");
    let penalty = r#"[{"lambda1":0.0,"lambda2":0.001}]"#;
    let args = [
        "experiment", "--out-dir", s(&out_dir),
        "--set", "generator.hospitals=12", "--set", "generator.min_admissions=150", "--set", "generator.max_admissions=250",
        "--set", "training.max_epochs=2", "--set", "arch.lp_width=8", "--set", "fully_nonlinear=false",
        "--set", &format!("hglm_grid={penalty}"), "--set", &format!("enet_grid={penalty}"),
    ];
    let out = ok(riskadj(&args));
    assert!(String::from_utf8_lossy(&out.stdout).contains("hglm"));
    let report = read_json(&out_dir.join("report.json"));
    assert!(report["models"]["proposed"]["test"]["overall"]["roc_auc"].is_f64());
    for f in ["config.json", "log.jsonl", "omega_scatter.csv", "omega_hist_proposed.csv", "omega_hist_hglm.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert_manifest_complete(&out_dir.join("manifest.json"));
}
