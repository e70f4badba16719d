use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maestrocut"));
    c.env_remove("MAESTROCUT_OUT");
    c
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Directory printed on the `run <id> -> <dir>` line.
fn run_dir(o: &Output) -> PathBuf {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("run ")).expect("run line");
    PathBuf::from(line.split(" -> ").nth(1).unwrap())
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("pass ")));
}

#[test]
fn excess_overhead_fails_dashboard() {
    let out = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let o = run(&[
        "suite",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--overhead",
        "0.03",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("fail") && l.contains("phasepad_overhead")));
    let dir = run_dir(&o);
    for f in ["tier1_metrics.csv", "tier2_metrics.csv", "dashboard.json", "config_echo.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let report = run(&["report", dir.to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(1));
}

#[test]
fn seeds_flag_sets_replicates() {
    let out = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let o = run(&[
        "tier1",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--seeds",
        "5",
    ]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(run_dir(&o).join("tier1_metrics.csv")).unwrap();
    let triples: BTreeSet<(String, String, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[2].to_string(), f[3].to_string())
        })
        .collect();
    // two workloads, three policies
    assert_eq!(triples.len(), 5 * 2 * 3);
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"tier1": {"stepz": 3}}"#).unwrap();
    let o = run(&["tier1", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tier1.stepz"));
}

#[test]
fn seed_flag_overrides_file() {
    let out = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let o = run(&[
        "tier2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--seed",
        "42",
        "--scenario",
        "baseline",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let dir = run_dir(&o);
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("seed42-"));
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config_echo.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 42);
    assert_eq!(echo["tier2"]["scenarios"].as_array().unwrap().len(), 1);
}

#[test]
fn output_root_from_environment() {
    let out = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let o = bin()
        .env("MAESTROCUT_OUT", out.path())
        .args(["tier2", "--config", cfg.to_str().unwrap(), "--scenario", "baseline"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(run_dir(&o).starts_with(out.path()));
}
