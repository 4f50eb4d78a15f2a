use std::path::Path;
use std::process::{Command, Output};

use cola_core::backbone::{BackboneConfig, BackboneModel};

const TINY: &str = r#"
tasks = 2
corpus_size = 1500
order_seeds = [0]

[family]
train_per_task = 200

[pretrain]
steps = 400

[adapter]
steps = 60

[vanilla]
steps = 20

[store.cae]
latent_dim = 8
hidden = 32

[transfer]
seeds = [0]

[sweep]
levels = [0.5, 0.9, 0.99]
max_steps = 400
"#;

fn cola(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cola")).args(args).output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let pre = dir.path().join("pre");
    let out = ok(cola(&["pretrain", "--config", s(&cfg), "--seed", "3", "--out-dir", s(&pre)]));
    assert!(out.contains("checksum"));
    let backbone = pre.join("backbone.bin");
    assert!(backbone.exists() && pre.join("pretrain.json").exists());
    let saved = std::fs::read_to_string(pre.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 3"));

    let run = dir.path().join("run");
    let out = ok(cola(&["run-stream", "--config", s(&cfg), "--seed", "3", "--out-dir", s(&run), "--backbone", s(&backbone)]));
    assert!(out.contains("mean over 1 orders"), "{out}");
    for f in ["summary.json", "store.bin", "backbone.bin", "order-0/report.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let store = run.join("store.bin");
    let inspect: serde_json::Value = serde_json::from_str(&ok(cola(&["store", "inspect", s(&store)]))).unwrap();
    assert_eq!(inspect["tasks"], serde_json::json!(["task00", "task01"]));
    assert_eq!(inspect["code_len"], 8);
    assert_eq!(inspect["encoder_retained"], false);
    assert!(inspect["min_recorded_score"].as_f64().unwrap() >= 0.99);

    let select: serde_json::Value = serde_json::from_str(&ok(cola(&["select", "--store", s(&store), "--input", "0,20,21,22,23"]))).unwrap();
    assert!(["task00", "task01"].contains(&select["chosen"].as_str().unwrap()));
    assert_eq!(select["perplexities"].as_object().unwrap().len(), 2);
    assert_eq!(select["input_len"], 4);
    let pinned: serde_json::Value =
        serde_json::from_str(&ok(cola(&["select", "--store", s(&store), "--input", "0 20 21", "--task-id", "task01"]))).unwrap();
    assert_eq!(pinned["chosen"], "task01");

    assert!(ok(cola(&["report", s(&run)])).contains("mean: cola"));

    let sweep = dir.path().join("sweep");
    ok(cola(&["run-sweep", "--config", s(&cfg), "--out-dir", s(&sweep), "--backbone", s(&backbone)]));
    assert!(sweep.join("sweep.csv").exists());
    let transfer = dir.path().join("transfer");
    ok(cola(&["run-transfer", "--config", s(&cfg), "--out-dir", s(&transfer), "--backbone", s(&backbone)]));
    assert!(transfer.join("transfer.json").exists() && transfer.join("transfer_curves.csv").exists());
}

#[test]
fn unfrozen_backbone_exits_with_invariant_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let path = dir.path().join("raw.bin");
    BackboneModel::init(BackboneConfig::default(), 0).unwrap().save(&path).unwrap();
    let out = cola(&["run-stream", "--config", s(&cfg), "--out-dir", s(&dir.path().join("o")), "--backbone", s(&path)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a store").unwrap();
    assert_eq!(cola(&["store", "inspect", s(&junk)]).status.code(), Some(1));
    assert_eq!(cola(&["pretrain", "--config", s(&dir.path().join("missing.toml"))]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "tasks = 1\n").unwrap();
    let out = cola(&["pretrain", "--config", s(&bad), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 tasks"));
    assert_eq!(cola(&["report", s(dir.path())]).status.code(), Some(1));
    assert!(!cola(&["select", "--store", s(&junk), "--input", "1,2"]).status.success());
}
