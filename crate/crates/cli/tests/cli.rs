use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn s2r2(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2r2")).args(args).current_dir(dir).env_remove("S2R2_THREADS").output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&s2r2(&["synth", "--out", "data", "--seed", "1", "--n-train", "4", "--n-heldout", "2"], d));
    fs::write(d.join("train.json"), r#"{"model":{"d_model":16,"d_ff":32,"max_seq":96},"train":{"steps":4,"log_every":2},"lexicon":"data/lexicon.json"}"#).unwrap();
    ok(&s2r2(&["train", "--config", "train.json", "--data", "data/train.jsonl", "--out", "a", "--mode", "ce_only", "--seed", "3"], d));
    ok(&s2r2(&["train", "--config", "train.json", "--data", "data/train.jsonl", "--out", "b", "--mode", "s2r2", "--seed", "3"], d));
    let man: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(man["config"]["train"]["mode"], "ce_only");
    assert_eq!(man["config"]["train"]["seed"], 3);
    ok(&s2r2(&["eval", "--checkpoint", "b/checkpoint", "--data", "data/heldout.jsonl", "--out", "ev"], d));
    assert!(d.join("ev/summary.json").exists());
    ok(&s2r2(&["report", "ce=a/train_log.csv", "b/train_log.csv", "--out", "rep"], d));
    let svg = fs::read_to_string(d.join("rep/norms.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    fs::write(d.join("text.jsonl"), "{\"id\":\"x\",\"text\":\"hello there world\"}\n").unwrap();
    ok(&s2r2(&["perturb", "--input", "text.jsonl", "--out", "p", "--seed", "5"], d));
    assert_eq!(fs::read_to_string(d.join("p/perturbed.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = s2r2(&["gradcheck", "--out", "g"], tmp.path());
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("total_s2r2"));
    assert!(tmp.path().join("g/gradcheck.json").exists());
    let o = s2r2(&["gradcheck", "--fault", "bal"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bal"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = s2r2(&["train", "--data", "missing.jsonl", "--out", "x", "--mode", "bogus"], d);
    assert!(!o.status.success());
    fs::write(d.join("bad.json"), "{\"train\": {\"steps\": 0}}").unwrap();
    fs::write(d.join("t.jsonl"), "").unwrap();
    let o = s2r2(&["train", "--config", "bad.json", "--data", "t.jsonl", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_s2r2")).args(["gradcheck"]).current_dir(d).env("S2R2_THREADS", "lots").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("S2R2_THREADS"));
}
