use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[synth]
num_users = 80
num_items = 50

[model]
hidden = 16
layers = 1
max_len = 20
kt = 64

[train]
epochs = 2
batch_size = 32
eval_num_neg = 20

[eval]
num_neg = 20
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_temprox"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic log plus preprocessed dataset in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    ok(dir.path(), &["synth", "--config", "c.toml", "--seed", "1", "--out", "d.csv"]);
    ok(dir.path(), &["preprocess", "--config", "c.toml", "--in", "d.csv"]);
    dir
}

#[test]
fn synth_then_preprocess_writes_stats() {
    let dir = workspace();
    let p = dir.path();
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["num_users"], 80);
    assert!(p.join("dataset.json").exists());
    assert!(p.join("synth.config.toml").exists());
    assert!(p.join("preprocess.config.toml").exists());
}

#[test]
fn no_tcl_training_logs_zero_contrastive_loss() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "c.toml", "--data", "dataset.json", "--out", "run", "--ablation", "no_tcl"]);
    let log = fs::read_to_string(p.join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["tcl_loss"], 0.0);
        assert!(v["val_NDCG@10"].is_number());
    }
    assert!(p.join("run/checkpoint/manifest.json").exists());
    assert!(p.join("run/train.config.toml").exists());
}

#[test]
fn evaluation_is_byte_identical_across_runs() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "c.toml", "--data", "dataset.json", "--out", "run", "--epochs", "1"]);
    let args = ["evaluate", "--checkpoint", "run/checkpoint", "--data", "dataset.json", "--split", "test", "--seed", "7"];
    let a = ok(p, &args);
    let b = ok(p, &args);
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["seed"], 7);
    assert_eq!(v["num_neg"], 100);
    ok(p, &[&args[..], &["--out", "ev1"]].concat());
    ok(p, &[&args[..], &["--out", "ev2"]].concat());
    assert_eq!(fs::read(p.join("ev1/eval_test.json")).unwrap(), fs::read(p.join("ev2/eval_test.json")).unwrap());
}

#[test]
fn resolved_snapshot_reproduces_the_run() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "c.toml", "--data", "dataset.json", "--out", "a", "--seed", "4", "--delta", "7"]);
    ok(p, &["train", "--config", "a/train.config.toml", "--out", "b"]);
    assert_eq!(fs::read(p.join("a/report.json")).unwrap(), fs::read(p.join("b/report.json")).unwrap());
    assert_eq!(
        fs::read(p.join("a/checkpoint/params.bin")).unwrap(),
        fs::read(p.join("b/checkpoint/params.bin")).unwrap()
    );
    let snap = fs::read_to_string(p.join("a/train.config.toml")).unwrap();
    assert!(snap.contains("delta = 7"));
}

#[test]
fn inputs_are_not_modified() {
    let dir = workspace();
    let p = dir.path();
    let csv = fs::read(p.join("d.csv")).unwrap();
    let ds = fs::read(p.join("dataset.json")).unwrap();
    ok(p, &["analyze", "intervals", "--in", "d.csv", "--config", "c.toml", "--out", "an"]);
    ok(p, &["analyze", "overlap", "--data", "dataset.json", "--delta", "30", "--out", "an"]);
    assert_eq!(fs::read(p.join("d.csv")).unwrap(), csv);
    assert_eq!(fs::read(p.join("dataset.json")).unwrap(), ds);
    let hist = fs::read_to_string(p.join("an/intervals.csv")).unwrap();
    assert!(hist.starts_with("interval_days,count\n"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("an/overlap_summary.json")).unwrap()).unwrap();
    let avg = summary["average_overlap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg));
    assert_eq!(summary["delta"], 30);
}

#[test]
fn sweep_and_ablate_write_tables() {
    let dir = workspace();
    let p = dir.path();
    let grid = format!("{SMALL}\n[sweep]\ndelta = [7, 30]\nseeds = [0]\n");
    fs::write(p.join("grid.toml"), grid).unwrap();
    ok(p, &["sweep", "--config", "grid.toml", "--data", "dataset.json", "--epochs", "1", "--out", "sw"]);
    let table = fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    ok(p, &["ablate", "--config", "c.toml", "--data", "dataset.json", "--epochs", "1", "--ablation", "no_mhar", "--out", "ab"]);
    let rows = fs::read_to_string(p.join("ab/ablation.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().nth(1).unwrap().starts_with("no_mhar,"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["bogus"][..], &["train", "--no-such-flag"], &["train", "--ablation", "nope"], &[]] {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = run(p, &["train", "--rho", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rho"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);

    fs::write(p.join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = run(p, &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = run(p, &["evaluate", "--data", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
}
