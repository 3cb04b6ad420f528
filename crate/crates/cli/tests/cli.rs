use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "desk"
seed = 3
[data]
seed_train_utts = 10
seed_valid_utts = 4
target_train_utts = 6
target_valid_utts = 4
target_test_utts = 5
[train_seed]
epochs = 2
[adapt]
epochs = 2
[lm]
epochs = 2
[decode]
beam = 3
"#;

fn fusionasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionasr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_run_emits_a_score_report_and_decode_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = fusionasr(&["--config", &cfg, "--stage", "all", "--fusion", "cold", "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let listed = String::from_utf8(o.stdout).unwrap();
    assert!(listed.lines().any(|l| l.starts_with("score\t")), "{listed}");

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("score-cold/score.json")).unwrap()).unwrap();
    assert!(report["corpus"]["cer"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["utterances"].as_array().unwrap().len(), 5);
    for stage in ["data", "prep", "seed", "lm", "adapt-cold", "decode-cold", "score-cold"] {
        let resolved = std::fs::read_to_string(out.join(stage).join("config.toml")).unwrap();
        assert!(resolved.contains("seed = 3"), "{stage}");
    }

    let nbest = out.join("decode-cold/nbest.jsonl");
    let before = std::fs::read(&nbest).unwrap();
    let o = fusionasr(&["--config", &cfg, "--stage", "decode", "--fusion", "cold", "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&nbest).unwrap(), before);
}

#[test]
fn cold_adaptation_without_a_language_model_is_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    for stage in ["gen-data", "prep", "train-seed"] {
        let o = fusionasr(&["--config", &cfg, "--stage", stage, "--out", out_s]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = fusionasr(&["--config", &cfg, "--stage", "adapt", "--fusion", "cold", "--out", out_s]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("train-lm"), "{}", stderr(&o));
    assert!(!out.join("adapt-cold/model.ckpt").exists());

    let missing = dir.path().join("nowhere.ckpt");
    let o = fusionasr(&["--config", &cfg, "--stage", "adapt", "--fusion", "cold", "--lm", missing.to_str().unwrap(), "--out", out_s]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere.ckpt"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("empty");
    let o = fusionasr(&["--config", &cfg, "--stage", "decode", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("adapt"), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[adapt]\nunknown_knob = 1\n").unwrap();
    let bad = bad.to_str().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for args in [
        vec!["--config", bad, "--stage", "prep", "--out", out],
        vec!["--stage", "bake", "--out", out],
        vec!["--stage", "decode", "--beam", "0", "--out", out],
        vec!["--stage", "decode", "--ctc-weight", "1.5", "--out", out],
        vec!["--stage", "adapt", "--fusion", "warm", "--out", out],
        vec!["--out", out],
    ] {
        let o = fusionasr(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let o = fusionasr(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("--ctc-weight"));
}
