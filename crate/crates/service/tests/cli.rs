use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn monoprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monoprobe")).args(args).output().unwrap()
}

fn stats(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn synth(dir: &Path) -> String {
    let out = monoprobe(&["synth", "--dir", dir.to_str().unwrap(), "--seed", "2"]);
    assert!(out.status.success());
    dir.join("run.toml").to_str().unwrap().to_owned()
}

#[test]
fn stage_commands_share_caches() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let s = stats(&monoprobe(&["summarize", "--config", &config]));
    assert_eq!(s["summaries"]["mock"]["hits"], 0);
    assert!(s.get("features").unwrap().as_object().unwrap().is_empty());

    let s = stats(&monoprobe(&["featurize", "--config", &config]));
    assert_eq!(s["summaries"]["mock"]["misses"], 0);

    let s = stats(&monoprobe(&["report", "--config", &config]));
    assert_eq!(s["features"]["setting-1"]["misses"], 0);
    assert_eq!(s["evaluations"], 3);
    let report = dir.path().join("out/report");
    for f in ["report.md", "report.json", "accuracy_grid.json"] {
        assert!(report.join(f).exists(), "{f}");
    }

    let out = monoprobe(&["export", "--config", &config, "--task", "citation_count"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("setting,index,sign,description\nsetting-1,74,positive,(unlabeled)\n"), "{csv}");
}

#[test]
fn seed_and_out_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let alt = dir.path().join("alt");
    stats(&monoprobe(&["bin", "--config", &config, "--seed", "9", "--out", alt.to_str().unwrap()]));
    let task: serde_json::Value = serde_json::from_str(&fs::read_to_string(alt.join("tasks/sjr.json")).unwrap()).unwrap();
    assert_eq!(task["seed"], 9);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn failures_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    fs::remove_file(dir.path().join("venues.jsonl")).unwrap();
    let out = monoprobe(&["report", "--config", &config]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest stage failed"));

    fs::write(dir.path().join("bad.toml"), "seed = 1\n").unwrap();
    let out = monoprobe(&["ingest", "--config", dir.path().join("bad.toml").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid run config"));

    let out = monoprobe(&["serve", "--config", &config]);
    assert!(!out.status.success());
}
