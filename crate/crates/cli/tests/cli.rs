use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nmh_core::experiments::{ExperimentKind, RunConfig};
use nmh_core::system::{benchmark_config, SystemConfig};

fn nmh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmh")).args(args).output().expect("run nmh")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// CSV contents with the named column blanked out.
fn csv_without(path: &Path, column: &str) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == column).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().enumerate().map(|(i, f)| if i == idx { String::new() } else { f.to_string() }).collect())
        .collect()
}

#[test]
fn malformed_config_exits_with_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "kind = \"solve\"\neps = [0.5,\n").unwrap();
    let out = nmh(&["solve", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "kind = \"solve\"\nepsilon = [0.5]\n").unwrap();
    assert_eq!(nmh(&["solve", "--config", unknown.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn non_dyadic_eps_is_rejected() {
    let out = nmh(&["no-loss-sweep", "--eps", "0.5,0.3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dyadic"));
}

#[test]
fn with_loss_below_threshold_needs_probe_flag() {
    let out = nmh(&["with-loss-sweep", "--sigma", "0.3", "--eps", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn radius_reports_interior_optimum_and_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let out = nmh(&["radius", "--A", "1", "--B", "1", "--C", "1", "--R", "10", "--p", "2", "--out", run.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("r* = 0.707107"), "{text}");
    assert!(text.contains("delta* = 0.353553"), "{text}");

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema"], "run-1");
    assert_eq!(manifest["kind"], "radius");
    assert_eq!(manifest["pass"], true);

    let again = dir.path().join("r2");
    let m = run.join("manifest.json");
    let out = nmh(&[
        "radius", "--A", "1", "--B", "1", "--C", "1", "--R", "10", "--p", "2", "--config", m.to_str().unwrap(), "--out",
        again.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(run.join("radius.json")).unwrap(), fs::read(again.join("radius.json")).unwrap());
}

#[test]
fn thresholds_single_row_and_table() {
    let out = nmh(&["thresholds", "--d", "2", "--p", "2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("sigma0   = 1.500000") && text.contains("c        = 1.333333"), "{text}");
    assert!(nmh(&["thresholds", "--d", "1", "--p", "1"]).status.success());
    assert!(stdout(&nmh(&["thresholds", "--d", "1", "--p", "1"])).contains("sigma_ES = N/A"));

    let dir = tempfile::tempdir().unwrap();
    let out = nmh(&["thresholds", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let table = fs::read_to_string(dir.path().join("thresholds.csv")).unwrap();
    assert!(table.starts_with("d,p,sigma_a,sigma_mr,sigma0,sigma1,sigma_es,c"));
    assert!(table.lines().any(|l| l.starts_with("2,2,0,2.000000,1.500000,1.000000,2.000000,1.333333,true,true")));
}

#[test]
fn sweep_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = nmh(&["no-loss-sweep", "--eps", "0.5", "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stdout(&out));
    }
    assert_eq!(csv_without(&a.join("no_loss.csv"), "wall_seconds"), csv_without(&b.join("no_loss.csv"), "wall_seconds"));
    let rows = csv_without(&a.join("no_loss.csv"), "wall_seconds");
    // the sweep row plus at least two probe rows, the last of which failed
    assert!(rows.len() >= 3);
    assert_eq!(rows.last().unwrap()[6], "false");
    assert!(a.join("traces/no_loss_eps_2^-1.jsonl").exists());
}

#[test]
fn shipped_configs_load_and_validate() {
    let dir = configs_dir();
    for (file, kind) in [
        ("no_loss.toml", ExperimentKind::NoLossSweep),
        ("with_loss.toml", ExperimentKind::WithLossSweep),
        ("estimates.toml", ExperimentKind::VerifyEstimates),
    ] {
        let cfg = RunConfig::load(&dir.join(file)).unwrap();
        assert_eq!(cfg.kind, kind, "{file}");
        cfg.validate().unwrap();
    }
    let sys: SystemConfig = toml::from_str(&fs::read_to_string(dir.join("benchmark_d1_p2.toml")).unwrap()).unwrap();
    assert_eq!(sys, benchmark_config(1, 2));
}
