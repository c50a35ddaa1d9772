use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn amcmc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amcmc"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("AMCMC_SEED")
        .env_remove("AMCMC_CONFIG")
        .env_remove("AMCMC_OUT")
        .env_remove("AMCMC_FORMAT")
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn counterexample_exits_with_expected_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = amcmc(&["counterexample"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let orbit = std::fs::read_to_string(dir.path().join("orbit.csv")).unwrap();
    let mut lines = orbit.lines();
    assert_eq!(lines.next(), Some("k,x,s,running_average"));
    let states: Vec<&str> = lines
        .take(4)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(states, ["2", "3", "2", "3"]);
}

#[test]
fn identical_runs_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("waning-rare-ram.toml");
    let cfg = cfg.to_str().unwrap();
    for dir in [&a, &b] {
        let out = amcmc(&["--config", cfg, "--seed", "3", "waning"], dir.path());
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in ["ledger.csv", "waning.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs between runs");
    }
    let other = tempfile::tempdir().unwrap();
    amcmc(&["--config", cfg, "--seed", "4", "waning"], other.path());
    assert_ne!(
        std::fs::read(a.path().join("ledger.csv")).unwrap(),
        std::fs::read(other.path().join("ledger.csv")).unwrap()
    );
}

#[test]
fn diverging_lln_is_an_expected_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("lln-cyclic.toml");
    let out = amcmc(&["--config", cfg.to_str().unwrap(), "lln"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let table = std::fs::read_to_string(dir.path().join("lln.csv")).unwrap();
    assert!(table.starts_with("n,median_error"));
}

#[test]
fn converging_expectation_that_fails_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
n_grid = [1000, 10000]
replications = 4
x0 = 1
[family.builtin]
name = "cyclic"
[scheme]
kind = "sequence"
values = [0, 1]
"#,
    );
    let out = amcmc(
        &["--config", cfg.to_str().unwrap(), "lln"],
        &dir.path().join("out"),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn repeated_runs_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    amcmc(&["kernel-info"], dir.path());
    let out = amcmc(&["kernel-info"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 earlier run"));
    let log = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("record.json")).unwrap())
            .unwrap();
    assert_eq!(record["prior_runs"], 1);
    assert_eq!(record["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn json_format_writes_json_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("bounds-mixture.toml");
    let out = amcmc(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--format",
            "json",
            "bounds",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let json = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .count();
    assert!(json >= 2);
}

#[test]
fn bad_configs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "n = 10\nbogus = 1\n");
    let out = amcmc(
        &["--config", unknown.to_str().unwrap(), "lln"],
        &dir.path().join("o1"),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let bad_state = write_config(dir.path(), "[phi]\nkind = \"indicator\"\nstate = 9\n");
    let out = amcmc(
        &["--config", bad_state.to_str().unwrap(), "poisson"],
        &dir.path().join("o2"),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
