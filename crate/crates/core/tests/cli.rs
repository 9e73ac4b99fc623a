//! End-to-end runs of the `lgc` binary on a tiny generated corpus.

use std::path::Path;
use std::process::Command;

use lgc_sed::train::{Checkpoint, DataSource, RunConfig};

fn lgc(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lgc")).args(args).env("LGC_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "lgc {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let msg = lgc(&[
        "generate-corpus", "--out", s(&corpus), "--strong", "4", "--weak", "4", "--unlabeled", "4",
        "--validation", "3", "--seed", "2", "--clip-len", "4",
    ]);
    assert!(msg.contains("wrote 15 clips"));
    for f in ["manifest.jsonl", "ground_truth.jsonl", "strong_0000.wav", "metadata/strong.tsv", "metadata/weak.tsv", "metadata/unlabeled.tsv", "metadata/validation.tsv"] {
        assert!(corpus.join(f).exists(), "{f} missing");
    }

    let mut cfg = RunConfig::smoke(2);
    cfg.epochs_phase1 = 1;
    cfg.epochs_phase2 = 1;
    cfg.data = DataSource::Manifest { dir: corpus.clone(), clip_len_s: 4.0 };
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string().unwrap()).unwrap();
    let run = dir.path().join("run");
    let out = lgc(&["train", "--config", s(&cfg_path), "--out", s(&run)]);
    assert!(out.contains("frame macro F1"));
    for f in ["config.toml", "metrics.jsonl", "summary.json", "latest.ckpt", "best.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["kind"].is_string());
    }
    assert!(metrics.contains("\"kind\":\"transition\""));

    let ckpt = run.join("latest.ckpt");
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.state.epoch, 2);
    let scores_path = dir.path().join("scores.jsonl");
    let eval = lgc(&["evaluate", "--checkpoint", s(&ckpt), "--split", "val", "--jsonl", s(&scores_path)]);
    // the final training report and a fresh evaluation of the same teacher agree
    assert!(out.starts_with(&eval));
    let score: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&scores_path).unwrap().trim()).unwrap();
    assert_eq!(score["step"], loaded.state.step);

    let emb = dir.path().join("emb.jsonl");
    lgc(&["export-embeddings", "--checkpoint", s(&ckpt), "--out", s(&emb)]);
    let rows: Vec<serde_json::Value> =
        std::fs::read_to_string(&emb).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3 * loaded.config.network.output_frames(lgc_sed::train::clip_frames(&loaded.config, 4.0)));
    assert_eq!(rows[0]["v"].as_array().unwrap().len(), 5);

    // continuing a finished run is a no-op that still reports scores
    let resumed = lgc(&["train", "--config", s(&cfg_path), "--resume", s(&ckpt)]);
    assert!(resumed.contains("frame macro F1"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    for args in [
        vec!["evaluate", "--checkpoint", s(&missing)],
        vec!["train", "--config", s(&missing)],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_lgc")).args(&args).output().unwrap();
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lgc")).args(["evaluate", "--checkpoint", s(&junk)]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_lgc")).args(["evaluate", "--checkpoint", s(&junk), "--split", "test"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("split"));
}
