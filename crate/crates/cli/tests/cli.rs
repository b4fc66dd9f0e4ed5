use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use txfreq_cli::{artifacts, load_config, parse_config, report, run, CliError};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn txfreq(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_txfreq")).args(args).output().unwrap()
}

const SMALL: &str = r#"
[gateway]
c = 10.0
d = 15.0

[run]
duration = 60.0

[[devices]]
id = "dev1"
a = 2.0
gamma = 1.0
utility = [819.0, -18.0, -1.0, -1.0]
"#;

#[test]
fn bundled_configs_load() {
    for name in ["scenario_a.cfg", "scenario_b.cfg", "anomaly.cfg"] {
        load_config(&scenario(name)).unwrap();
    }
}

#[test]
fn gateway_section_rejects_utility_data() {
    let text = SMALL.replace("d = 15.0", "d = 15.0\nutility = [1.0]");
    assert!(matches!(parse_config(&text), Err(CliError::Config(_))));
    parse_config(SMALL).unwrap();
}

#[test]
fn config_failures_map_to_exit_codes() {
    let out = txfreq(&["solve", "--config", "/nonexistent/none.cfg"]);
    // unreadable file is an io failure; bad contents are a config failure
    assert_eq!(out.status.code(), Some(4));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[gateway]\nc = \"ten\"\n").unwrap();
    let out = txfreq(&["solve", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(txfreq(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn infeasible_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tight.cfg");
    std::fs::write(&path, SMALL.replace("c = 10.0", "c = 0.5")).unwrap();
    let out = txfreq(&["solve", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = txfreq(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_prints_the_optimum() {
    let out = txfreq(&["solve", "--config", scenario("scenario_b.cfg").to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("1381.22"), "{text}");
}

#[test]
fn report_needs_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let err = report(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn report_tables_agree_with_run() {
    let mut cfg = load_config(&scenario("scenario_a.cfg")).unwrap();
    cfg.run.duration = 120.0;
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&cfg, dir.path(), None).unwrap();
    report(dir.path()).unwrap();

    let mut last: BTreeMap<String, f64> = BTreeMap::new();
    for row in rows(&dir.path().join(artifacts::FREQUENCY)) {
        last.insert(row[1].clone(), row[2].parse().unwrap());
    }
    for row in rows(&dir.path().join(artifacts::SUMMARY)) {
        let est: f64 = row[2].parse().unwrap();
        assert_eq!(last[&row[0]], est);
        assert_eq!(outcome.artifacts.estimates[&row[0]], est);
    }

    let estimated = outcome.artifacts.arrivals.iter().filter(|p| p.estimated_rate.is_some()).count();
    let monitor = rows(&dir.path().join(artifacts::Z_MONITOR));
    assert_eq!(monitor.len(), estimated);
    for row in &monitor {
        let v: Vec<f64> = row[2..].iter().map(|s| s.parse().unwrap()).collect();
        assert!(((v[1] - v[0]).abs() - v[2]).abs() < 1e-12);
    }
    assert_eq!(
        std::fs::read(dir.path().join(artifacts::RESOURCES)).unwrap(),
        std::fs::read(dir.path().join(artifacts::RESOURCE_CONSUMPTION)).unwrap()
    );
}

#[test]
fn seed_override_changes_only_jitter_draws() {
    let mut cfg = load_config(&scenario("scenario_b.cfg")).unwrap();
    cfg.run.duration = 70.0;
    let dir = tempfile::tempdir().unwrap();
    let a = run(&cfg, &dir.path().join("a"), Some(1)).unwrap();
    let b = run(&cfg, &dir.path().join("b"), Some(2)).unwrap();
    assert_ne!(a.artifacts.wire_log, b.artifacts.wire_log);
    let (za, zb) = (a.artifacts.final_rates().unwrap(), b.artifacts.final_rates().unwrap());
    for (id, z) in za {
        assert!((z - zb[id]).abs() < 1e-3);
    }
}
