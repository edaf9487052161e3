use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ticketlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

const TINY: &str = r#"{
  "model": {"hidden": [6]},
  "data": {"blobs": {"classes": 2, "per_class": 20, "test_per_class": 10, "dim": 2}},
  "optimizer": {"lr": 0.05, "epochs": 3, "batch_size": 8},
  "imp": {"rounds": 1},
  "bound": {"steps": 3, "final_samples": 8, "mc_samples": 2},
  "hessian": {"power": {"max_iters": 10}, "trace_samples": 4, "slice_points": 5},
  "seeds": [0]
}"#;

#[test]
fn schema_lists_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["schema"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("learning_rates") && text.contains("additionalProperties"));
    let log = String::from_utf8(run(&["schema", "--runlog"], dir.path()).stdout).unwrap();
    assert!(log.contains("schema_version"));
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"optimiser": {}}"#).unwrap();
    let out = run(&["train", "-c", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn imp_then_bound_then_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    assert!(run(&["imp", "-c", "tiny.json", "-o", "imp"], dir.path()).status.success());
    let ticket = dir.path().join("imp/artifacts/seed0/ticket");
    assert!(ticket.exists());
    let t = ticket.to_str().unwrap();
    assert!(run(&["bound", "-c", "tiny.json", "--ticket", t, "-o", "bound"], dir.path()).status.success());
    assert!(run(&["hessian", "-c", "tiny.json", "--ticket", t, "-o", "hess"], dir.path()).status.success());
    let rep = run(&["report", "bound"], dir.path());
    assert!(rep.status.success());
    assert!(dir.path().join("bound/tables/bound.csv").exists());
    let again = run(&["imp", "-c", "tiny.json", "-o", "imp"], dir.path());
    assert_eq!(again.status.code(), Some(2));
}
