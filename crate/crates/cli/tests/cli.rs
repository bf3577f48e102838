use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "task": { "content_size": 4, "n_pairs": 3 },
  "data": { "n_train": 40, "n_val": 8, "n_test": 8 },
  "model": { "vocab_size": 16, "d_model": 8, "n_heads": 2, "n_layers_enc": 1, "n_layers_dec": 1,
             "ffn_dim": 16, "max_src_len": 16, "max_tgt_len": 12 },
  "pretrain": { "max_epochs": 2, "early_stopping_patience": 1, "warmup_steps": 0, "learning_rate": 0.003 },
  "finetune": { "max_epochs": 2, "early_stopping_patience": 1, "learning_rate": 0.003 },
  "experiment": { "shots": [0, 2, 4, 8], "seeds": [0], "fixed_shots": 4, "val_limit": 8, "test_limit": 8 }
}"#;

fn softpipe(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softpipe"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("SOFTPIPE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = softpipe(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gradcheck_exits_zero_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck"]);
    assert!(stdout.contains("ok"), "{stdout}");
    let report = read_json(&dir.path().join("reports/gradcheck-s0.json"));
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert!(report["config"]["task"].is_object());
    assert!(report["report"]["max_relative_error"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"pretrain": {"nope": 1}}"#).unwrap();
    let cfg = dir.path().join("bad.json");
    let out = softpipe(dir.path(), &["--config", cfg.to_str().unwrap(), "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    let out = softpipe(dir.path(), &["--set", "model.nope=3", "gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.nope"));
    let out = Command::new(env!("CARGO_BIN_EXE_softpipe"))
        .args(["--workdir", dir.path().to_str().unwrap(), "gradcheck"])
        .env("SOFTPIPE_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_prerequisites_name_the_command_to_run() {
    let dir = tiny_workdir();
    let cfg = dir.path().join("tiny.json");
    let cfg = cfg.to_str().unwrap();
    let out = softpipe(dir.path(), &["--config", cfg, "experiment", "alpha-sweep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("softpipe gen-data --style a"));

    ok(dir.path(), &["--config", cfg, "gen-data", "--style", "a"]);
    let out = softpipe(dir.path(), &["--config", cfg, "experiment", "alpha-sweep"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("softpipe backtranslate --dataset a"));
    let out = softpipe(dir.path(), &["--config", cfg, "--set", "finetune.alpha=0", "experiment", "alpha-sweep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("softpipe train-sum --dataset a"));
}

#[test]
fn gen_data_is_idempotent_and_seeded_by_the_environment() {
    let dir = tiny_workdir();
    let cfg = dir.path().join("tiny.json");
    let cfg = cfg.to_str().unwrap();
    let path = dir.path().join("datasets/a.jsonl");
    ok(dir.path(), &["--config", cfg, "gen-data", "--style", "a"]);
    let first = std::fs::read(&path).unwrap();
    ok(dir.path(), &["--config", cfg, "gen-data", "--style", "a"]);
    assert_eq!(std::fs::read(&path).unwrap(), first);
    let lines = String::from_utf8(first.clone()).unwrap().lines().count();
    assert_eq!(lines, 56);

    let out = Command::new(env!("CARGO_BIN_EXE_softpipe"))
        .args(["--workdir", dir.path().to_str().unwrap(), "--config", cfg, "gen-data", "--style", "a"])
        .env("SOFTPIPE_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(std::fs::read(&path).unwrap(), first);
    let report = read_json(&dir.path().join("reports/gen-data-a.json"));
    assert_eq!(report["config"]["task"]["seed"], 9);

    ok(dir.path(), &["--config", cfg, "gen-data", "--sizes", "5,2,3", "--out", "custom.jsonl"]);
    let custom = std::fs::read_to_string(dir.path().join("custom.jsonl")).unwrap();
    assert_eq!(custom.lines().count(), 10);
}

#[test]
fn end_to_end_on_the_tiny_config() {
    let dir = tiny_workdir();
    let w = dir.path();
    let cfg = w.join("tiny.json");
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg];
        all.extend_from_slice(args);
        ok(w, &all)
    };
    run(&["gen-data", "--style", "a"]);
    run(&["gen-data", "--style", "b"]);
    run(&["train-sum", "--dataset", "a"]);
    run(&["train-sum", "--dataset", "b"]);
    run(&["train-tra", "--direction", "forward"]);
    run(&["train-tra", "--direction", "reverse"]);
    run(&["train-direct", "--regime", "mono-only"]);
    for name in ["sum-a", "sum-b", "tra-forward", "tra-reverse", "direct-mono-only"] {
        assert!(w.join(format!("ckpts/{name}.ckpt")).exists(), "{name}");
    }
    let stdout = run(&["backtranslate", "--dataset", "a"]);
    assert!(stdout.contains("filled 56 records"), "{stdout}");
    run(&["backtranslate", "--dataset", "b"]);
    let line = std::fs::read_to_string(w.join("datasets/a.jsonl")).unwrap();
    assert!(line.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["backtranslation"].is_array()));

    run(&["finetune", "--shots", "4", "--freeze", "sum-only"]);
    let pipeline = w.join("ckpts/finetune-a-k4-a0.99-sum_only-s0.pipeline");
    assert!(pipeline.exists());
    let report = read_json(&w.join("reports/finetune-a-k4-a0.99-sum_only-s0.json"));
    assert_eq!(report["report"]["extra"]["freeze_strategy"], "sum_only");
    assert!(report["report"]["metrics"]["rouge_avg"].is_number());

    run(&["eval", "--timing", "--repetitions", "2"]);
    let eval = read_json(&w.join("reports/eval-zero-shot-sum-a-hard.json"));
    assert!(eval["report"]["timing"]["per_sample_time_s"].as_f64().unwrap() > 0.0);
    assert!(w.join("reports/eval-zero-shot-sum-a-hard.samples.csv").exists());
    run(&["eval", "--pipeline-ckpt", pipeline.to_str().unwrap(), "--mode", "soft"]);
    let direct = w.join("ckpts/direct-mono-only.ckpt");
    run(&["eval", "--ckpt", direct.to_str().unwrap()]);
    assert!(w.join("reports/eval-direct-mono-only.json").exists());

    run(&["experiment", "alpha-sweep"]);
    let sweep = w.join("reports/experiments/alpha-sweep");
    let csv = std::fs::read_to_string(sweep.join("series.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let one = read_json(&sweep.join("alpha-1.00.json"));
    assert_eq!(one["run"]["extra"]["tra_input_sha256"], one["run"]["extra"]["tra_output_sha256"]);
    assert_eq!(one["config"]["version"], env!("CARGO_PKG_VERSION"));
    assert!(std::fs::read_to_string(sweep.join("table.txt")).unwrap().contains("alpha-0.95"));

    run(&["--jobs", "2", "experiment", "shot-curve"]);
    let curve = std::fs::read_to_string(w.join("reports/experiments/shot-curve/series.csv")).unwrap();
    let systems: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(systems.iter().filter(|s| **s == "pipeline").count(), 4);
    assert_eq!(systems.iter().filter(|s| **s == "direct").count(), 4);

    run(&["experiment", "freeze-ablation"]);
    run(&["experiment", "soft-vs-hard"]);
    run(&["experiment", "cross-domain"]);
    let cross = std::fs::read_to_string(w.join("reports/experiments/cross-domain/series.csv")).unwrap();
    assert_eq!(cross.lines().count(), 7);
    run(&["experiment", "forgetting-demo"]);
    assert!(w.join("reports/experiments/forgetting-demo/table.txt").exists());
}
