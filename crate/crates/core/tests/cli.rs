//! The `sdd` binary: subcommand outputs and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use sdd_core::models::build_model;
use sdd_core::pipeline::experiment::load_model;

fn sdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdd")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sdd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) {
    ok(&["generate", "--out", s(dir), "--n-damage", "3", "--n-background", "3", "--seed", "2"]);
}

const TINY: [&str; 6] = ["--filters", "4,4", "--latent", "4", "--model", "maa3"];

#[test]
fn zero_learning_rate_checkpoint_is_the_seeded_init() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    generate(&data);
    let mut args = vec!["train", "--epochs", "1", "--lr", "0", "--seed", "5", "--data", s(&data), "--out", s(&ckpt)];
    args.extend(TINY);
    ok(&args);
    let (trained, meta) = load_model(&ckpt).unwrap();
    let init = build_model::<f32>(&trained.config, 5).unwrap();
    let a: Vec<(String, Vec<u32>)> =
        trained.graph.named_params().into_iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect();
    let b: Vec<(String, Vec<u32>)> =
        init.graph.named_params().into_iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect();
    assert_eq!(a, b);
    assert_eq!(meta["train"]["seed"], 5);
    let history = std::fs::read_to_string(ckpt.with_extension("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn full_command_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    generate(&p("data"));
    let (data, ckpt) = (p("data"), p("m.ckpt"));
    let mut args = vec!["train", "--epochs", "2", "--loss", "logcosh", "--data", s(&data), "--out", s(&ckpt)];
    args.extend(TINY);
    ok(&args);
    let out = ok(&["eval", "--ckpt", s(&p("m.ckpt")), "--data", s(&p("data")), "--report", s(&p("r.json")), "--roc-csv", s(&p("roc.csv")), "--no-timing"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc_best"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p("r.json")).unwrap()).unwrap();
    assert_eq!(report["loss_id"], "logcosh");
    assert!(report.get("mean_inference_ms").is_none());
    assert!(std::fs::read_to_string(p("roc.csv")).unwrap().lines().count() > 2);

    ok(&["report", "--inputs", s(&p("r.json")), "--out", s(&p("summary.md"))]);
    assert!(std::fs::read_to_string(p("summary.md")).unwrap().contains("| maa3 | logcosh |"));

    let sink = format!("file:{}", s(&p("d.jsonl")));
    ok(&["run", "--ckpt", s(&p("m.ckpt")), "--data", s(&p("data")), "--sink", &sink, "--threshold-percentile", "50"]);
    let lines = std::fs::read_to_string(p("d.jsonl")).unwrap_or_default();
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["decision"], "damage");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sdd(&["--help"]).status.code(), Some(0));
    assert_eq!(sdd(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(sdd(&[]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_damage": "many"}"#).unwrap();
    let out = sdd(&["generate", "--spec", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let missing = dir.path().join("nope.ckpt");
    let out = sdd(&["eval", "--ckpt", s(&missing), "--data", s(dir.path()), "--report", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}
