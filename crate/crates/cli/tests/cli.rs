use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn chorus(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chorus"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CHORUS_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = chorus(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_record(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("error record on stderr");
    serde_json::from_str(line).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&a, &["--seed", "4", "generate"]);
    ok(&b, &["--seed", "4", "generate"]);
    let read = |d: &Path| std::fs::read(d.join("dataset.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    ok(&b, &["--seed", "5", "--force", "generate"]);
    assert_ne!(read(&a), read(&b));
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate"]);
    let o = chorus(dir.path(), &["generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"]["kind"], "exists");
    ok(dir.path(), &["--force", "generate"]);
}

#[test]
fn configuration_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[customize.optimizer]\nlr = -1.0\n").unwrap();
    let o = chorus(dir.path(), &["--config", cfg.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2));
    let r = error_record(&o);
    assert_eq!(r["error"]["kind"], "config");
    assert_eq!(r["error"]["key"], "customize.optimizer.lr");

    std::fs::write(&cfg, "[pretrain]\nbatch = 3\n").unwrap();
    let o = chorus(dir.path(), &["--config", cfg.to_str().unwrap(), "generate"]);
    assert_eq!(error_record(&o)["error"]["key"], "pretrain.batch");
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_chorus"))
        .arg("--out")
        .arg(dir.path())
        .arg("generate")
        .env("CHORUS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"]["key"], "CHORUS_THREADS");
}

#[test]
fn missing_inputs_fail_with_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let o = chorus(dir.path(), &["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_record(&o)["error"]["kind"], "file");
}

#[test]
fn untrained_head_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "regime = \"strong\"\n").unwrap();
    let c = cfg.to_str().unwrap();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let d = dir.path().join(seed.to_string());
        let s = seed.to_string();
        for verb in ["generate", "pretrain", "evaluate"] {
            ok(&d, &["--config", c, "--seed", &s, verb]);
        }
        let r = json(&d.join("evaluation.json"));
        assert_eq!(r["untrained"], true);
        accs.push(r["mean_accuracy"].as_f64().unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 1.0 / 6.0).abs() <= 0.05, "{accs:?}");
}

#[test]
fn single_slot_cache_misses_on_every_switch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let c = cfg.to_str().unwrap();
    std::fs::write(
        &cfg,
        "regime = \"strong\"\n[trace]\ncontexts = [\"Belt\", \"Wrist\", \"Belt\", \"Upper arm\"]\nswitch_points = [50, 100, 150]\nlength = 200\n[stream]\ncapacity = 1\n",
    )
    .unwrap();
    for verb in ["generate", "pretrain", "customize", "stream"] {
        ok(dir.path(), &["--config", c, verb]);
    }
    let r = json(&dir.path().join("stream.json"));
    assert_eq!(r["cached"]["misses"], 4);
    assert_eq!(r["cached"]["evictions"], 3);
    assert_eq!(r["identical_predictions"], true);

    // A second slot keeps Belt across the Wrist detour.
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("capacity = 1", "capacity = 2")).unwrap();
    ok(dir.path(), &["--config", c, "--force", "stream"]);
    let r = json(&dir.path().join("stream.json"));
    assert_eq!(r["cached"]["misses"], 3);
    let csv = std::fs::read_to_string(dir.path().join("stream.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "index,context_id,hit,correct,alpha_context,latency_ns");
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn checkpoints_survive_a_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "regime = \"weak\"\n").unwrap();
    let c = cfg.to_str().unwrap();
    for verb in ["generate", "pretrain", "customize"] {
        ok(dir.path(), &["--config", c, verb]);
    }
    let bytes = std::fs::read(dir.path().join("model.chor")).unwrap();
    assert_eq!(&bytes[..4], b"CHOR");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let ck = chorus_cli::Checkpoint::load(&dir.path().join("model.chor")).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert!(ck.head.is_some());
}
