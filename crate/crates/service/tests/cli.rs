use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn synthetic() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/synthetic")
}

fn ptm(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptm"))
        .arg("--data-dir")
        .arg(data)
        .arg("--fixture-dir")
        .arg(synthetic().join("llm"))
        .args(args)
        .env_remove("PTM_MODE")
        .env_remove("PTM_DATA_DIR")
        .output()
        .unwrap()
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn replayed_build_and_hitl_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let journals = synthetic().join("journals.jsonl");
    let v = ok_json(ptm(d, &["ingest", "--user", "u01", journals.to_str().unwrap()]));
    assert_eq!(v["accepted"], 30);

    let out = ptm(d, &["build", "--user", "u01", "--phase", "phase1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("extract"));

    for phase in ["extract", "phase1", "phase2"] {
        let r = ok_json(ptm(d, &["build", "--user", "u01", "--phase", phase]));
        assert_eq!(r["status"], "succeeded");
        assert_eq!(r["phase"], phase);
    }
    let r = ok_json(ptm(d, &["eval", "run", "--user", "u01", "--condition", "pre"]));
    assert_eq!(r["phase"], "evaluate_pre");
    ok_json(ptm(d, &["build", "--user", "u01", "--phase", "hitl"]));

    let next = ok_json(ptm(d, &["hitl", "next", "--user", "u01"]));
    let item = next["item"]["id"].as_str().unwrap().to_string();
    // the fixture script's first answer is recorded for the first item
    let answer = "Yes, I jog twice a week.";
    let a = ok_json(ptm(d, &["hitl", "answer", "--user", "u01", "--item", &item, "--answer", answer]));
    assert_eq!(a["item"]["status"], "answered");
    let s = ok_json(ptm(d, &["hitl", "answer", "--user", "u01", "--item", "i2", "--skip"]));
    assert_eq!(s["item"]["status"], "skipped");

    let l2 = ok_json(ptm(d, &["export", "graph", "--user", "u01", "--layer", "L2"]));
    assert!(l2.as_array().unwrap().iter().all(|n| n["layer"] == "L2"));
    let path = d.join("graph.json");
    let out = ptm(d, &["export", "graph", "--user", "u01", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let g: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(g["user_id"], "u01");
    let rep = ok_json(ptm(d, &["export", "report", "--user", "u01", "--condition", "pre"]));
    assert_eq!(rep["condition"], "pre");
    let out = ptm(d, &["export", "report", "--user", "u01", "--condition", "post"]);
    assert!(!out.status.success());
}

#[test]
fn fixtures_verify_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let s = synthetic();
    let v = ok_json(ptm(
        dir.path(),
        &[
            "fixtures",
            "verify",
            "--journals",
            s.join("journals.jsonl").to_str().unwrap(),
            "--hitl-script",
            s.join("hitl_script.json").to_str().unwrap(),
        ],
    ));
    assert_eq!(v["identical"], true);
    assert!(v["files"].as_u64().unwrap() > 10);
}

#[test]
fn replay_without_fixture_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let empty = dir.path().join("no-fixtures");
    let journals = d.join("j.jsonl");
    std::fs::write(&journals, "{\"id\":\"x1\",\"date\":\"2025-09-01\",\"text\":\"Something unrecorded happened today.\"}\n").unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_ptm"))
            .args(["--data-dir", d.to_str().unwrap(), "--fixture-dir", empty.to_str().unwrap()])
            .args(args)
            .env_remove("PTM_MODE")
            .output()
            .unwrap()
    };
    assert!(run(&["ingest", "--user", "u02", journals.to_str().unwrap()]).status.success());
    let out = run(&["build", "--user", "u02", "--phase", "extract"]);
    assert!(!out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["status"], "failed");
    assert!(report["error"].as_str().unwrap().contains("replay miss"), "{report}");
}
