use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn oscar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oscar"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run oscar")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = oscar(args, dir);
    assert!(
        out.status.success(),
        "oscar {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_synth(dir: &Path, name: &str, seed: &str) {
    ok(
        &["synth", "--out", name, "--tokens", "96", "--head-dim", "16", "--kv-heads", "2", "--gqa-ratio", "2", "--outlier-channels", "2", "--seed", seed],
        dir,
    );
}

fn eval_json(dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["eval", "--activations", "a.oscr", "--bundle", "b.oscr", "--sink", "4", "--recent", "16"];
    args.extend_from_slice(extra);
    serde_json::from_slice(&ok(&args, dir).stdout).unwrap()
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "a.oscr", "7");
    small_synth(dir.path(), "b.oscr", "7");
    small_synth(dir.path(), "c.oscr", "8");
    let a = fs::read(dir.path().join("a.oscr")).unwrap();
    assert_eq!(&a[..4], b"OSCR");
    assert_eq!(a, fs::read(dir.path().join("b.oscr")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.oscr")).unwrap());
}

#[test]
fn calibrate_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d, "a.oscr", "7");
    ok(&["calibrate", "--activations", "a.oscr", "--out", "b.oscr", "--group-size", "8"], d);
    ok(&["calibrate", "--activations", "a.oscr", "--out", "b2.oscr", "--group-size", "8"], d);
    assert_eq!(fs::read(d.join("b.oscr")).unwrap(), fs::read(d.join("b2.oscr")).unwrap());

    let pass = eval_json(d, &["--rotation", "passthrough"]);
    let s = &pass["summary"];
    for key in ["mean_key_rel_mse", "mean_value_rel_mse", "total_logit_mse", "mean_attention_kl", "total_trace_residual_k"] {
        assert!(s[key].as_f64().unwrap().abs() < 1e-9, "{key} = {}", s[key]);
    }
    assert_eq!(pass["heads"].as_array().unwrap().len(), 2);

    let oscar = eval_json(d, &["--rotation", "oscar"]);
    assert!(oscar["summary"]["mean_attention_kl"].as_f64().unwrap() > 0.0);
    let again = eval_json(d, &["--rotation", "oscar"]);
    assert_eq!(oscar, again);

    let metrics = d.join("m.json");
    ok(
        &["eval", "--activations", "a.oscr", "--bundle", "b.oscr", "--sink", "4", "--recent", "16", "--bf16-meta", "--metrics", metrics.to_str().unwrap()],
        d,
    );
    let written: Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(written["bf16_meta"], Value::Bool(true));
}

#[test]
fn eval_reports_default_operating_point_bpe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", "a.oscr", "--tokens", "64", "--head-dim", "128", "--kv-heads", "1", "--gqa-ratio", "1"], d);
    ok(&["calibrate", "--activations", "a.oscr", "--out", "b.oscr", "--clip-grid", "1.0"], d);
    let out = ok(
        &["eval", "--activations", "a.oscr", "--bundle", "b.oscr", "--bits", "2", "--sink", "64", "--recent", "256", "--group-size", "128"],
        d,
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let bpe = v["summary"]["effective_bpe"].as_f64().unwrap();
    assert!((bpe - 2.28).abs() <= 0.005, "bpe {bpe}");
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        &["verify", "--seed", "3", "--dims", "2,4,8,16", "--trials", "20", "--samples", "100", "--enumeration-dims", "4,5", "--out", "r.json"],
        dir.path(),
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().count() >= 7 && !stderr.contains("FAIL"), "{stderr}");
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == Value::Bool(true)));
}

#[test]
fn table_lists_five_modes() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "a.oscr", "7");
    let out = ok(&["table", "--activations", "a.oscr", "--group-size", "8"], dir.path());
    let rows: Value = serde_json::from_slice(&out.stdout).unwrap();
    let modes: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["I", "H", "U", "U·H", "U·H·P"]);
    for r in &rows.as_array().unwrap()[3..] {
        assert!((r["importance_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(oscar(&["eval", "--activations", "missing.oscr", "--bundle", "x"], d).status.code(), Some(2));
    fs::write(d.join("junk.oscr"), b"OSCRgarbage").unwrap();
    assert_eq!(
        oscar(&["calibrate", "--activations", "junk.oscr", "--out", "b.oscr"], d).status.code(),
        Some(2)
    );
    assert_eq!(oscar(&["synth", "--out", "a.oscr", "--head-dim", "12"], d).status.code(), Some(2));
    small_synth(d, "a.oscr", "1");
    ok(&["calibrate", "--activations", "a.oscr", "--out", "b.oscr", "--group-size", "8"], d);
    assert_eq!(
        oscar(&["eval", "--activations", "a.oscr", "--bundle", "a.oscr"], d).status.code(),
        Some(2)
    );
    assert_eq!(
        oscar(&["eval", "--activations", "a.oscr", "--bundle", "b.oscr", "--rotation", "bogus"], d).status.code(),
        Some(2)
    );
}

#[test]
fn oversized_enumeration_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oscar(&["verify", "--enumeration-dims", "8", "--trials", "2"], dir.path()).status.code(), Some(2));
}
