use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pseudopde"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

/// Data rows of a CSV artifact as floats, skipping the hash and header lines.
fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

const HEAT: &str = r#"{
    "schema": 1,
    "seed": 5,
    "phases": ["simulate", "mild"],
    "problem": {
        "generator": {"kind": "brownian"},
        "driver": {"expr": "0"},
        "terminal_g": {"expr": "x1^2"},
        "horizon_T": 1.0
    },
    "grid": {"time_steps": 20, "space_min": [-4], "space_max": [4], "space_nodes": [21]},
    "mild": {"paths_per_cell": 10000, "storage": "streaming"}
}"#;

const SMALL: &str = r#"{
    "schema": 1,
    "seed": 9,
    "problem": {
        "generator": {"kind": "brownian"},
        "driver": {"expr": "0.5*y", "K_Y": 0.5},
        "terminal_g": "tanh(x1)",
        "horizon_T": 1.0
    },
    "grid": {"time_steps": 8, "space_min": [-3], "space_max": [3], "space_nodes": [7]},
    "mild": {"paths_per_cell": 300},
    "fbsde": {"paths": 4000, "basis": {"kind": "polynomial", "degree": 3}},
    "operators": {"paths": 2000, "time_steps": 4}
}"#;

#[test]
fn version_prints_the_package_version() {
    let out = bin().arg("version").output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), format!("pseudopde {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn validate_echoes_the_normalized_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", HEAT);
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let echo: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echo["fbsde"]["origins"][0]["x"][0], 0.0);
    assert_eq!(echo["mild"]["v_scheme"], "variance");
    assert_eq!(echo["problem"]["clock"]["kind"], "identity");
}

#[test]
fn validate_reports_every_violation_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace(r#""terminal_g": "tanh(x1)","#, "")
        .replace(r#""K_Y": 0.5"#, r#""K_Y": 2"#)
        .replace(r#""time_steps": 8"#, r#""time_steps": 1"#);
    let path = write_config(dir.path(), "c.json", &text);
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("problem.terminal_g: required"), "{stderr}");

    let text = SMALL.replace(r#""K_Y": 0.5"#, r#""K_Y": 2"#).replace(r#""time_steps": 8"#, r#""time_steps": 1"#);
    let path = write_config(dir.path(), "k.json", &text);
    let out = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("K_Y * dV < 1"), "{stderr}");
}

#[test]
fn heat_smoke_run_recovers_the_second_moment() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "heat.json", HEAT);
    let out_dir = dir.path().join("out");
    let out = run(&path, &out_dir, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let u = rows(&out_dir.join("u.csv"));
    let origin = u.iter().find(|r| r[0] == 0.0 && r[1] == 0.0).unwrap();
    let (value, stderr) = (origin[2], origin[3]);
    assert!((value - 1.0).abs() <= 3.0 * stderr, "u(0,0) = {value} +- {stderr}");
    assert_eq!(u.len(), 21 * 21);
    let m = manifest(&out_dir);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["mild"]["converged"], true);
    for name in ["u.csv", "v.csv", "deltas.csv"] {
        assert!(m["artifacts_sha256"][name].is_string(), "{name}");
    }
    assert!(!out_dir.join("crosscheck.csv").exists());
}

#[test]
fn artifacts_are_reproducible_and_named_by_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "small.json", SMALL);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(run(&path, &a, &["--threads", "1"]).status.code(), Some(0));
    assert_eq!(run(&path, &b, &["--threads", "2"]).status.code(), Some(0));
    // the emitted config copy reproduces the run
    assert_eq!(run(&a.join("config.json"), &c, &[]).status.code(), Some(0));
    let names = ["u.csv", "v.csv", "deltas.csv", "fbsde.csv", "crosscheck.csv", "operator_report.csv"];
    let hash = hex::encode(Sha256::digest(fs::read(a.join("config.json")).unwrap()));
    let m = manifest(&a);
    assert_eq!(m["config_sha256"], hash.as_str());
    for name in names {
        let bytes = fs::read(a.join(name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name} differs across thread counts");
        assert_eq!(bytes, fs::read(c.join(name)).unwrap(), "{name} differs from the config copy run");
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_sha256={hash}"));
        assert_eq!(m["artifacts_sha256"][name], hex::encode(Sha256::digest(&bytes)).as_str());
    }
    let header = fs::read_to_string(a.join("crosscheck.csv")).unwrap();
    assert_eq!(header.lines().nth(1), Some("s,x1,u,y0,v,z0,combined_stderr"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let flags = ["--phases", "mild"];
    assert_eq!(run(&path, &a, &flags).status.code(), Some(0));
    assert_eq!(run(&path, &b, &[&flags[..], &["--seed", "10"]].concat()).status.code(), Some(0));
    assert_eq!(manifest(&b)["seed"], 10);
    assert_ne!(fs::read(a.join("u.csv")).unwrap(), fs::read(b.join("u.csv")).unwrap());
}

#[test]
fn operators_phase_alone_writes_only_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "small.json", SMALL);
    let out_dir = dir.path().join("out");
    let out = run(&path, &out_dir, &["--phases", "operators"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["config.json", "manifest.json", "operator_report.csv"]);
    let report = fs::read_to_string(out_dir.join("operator_report.csv")).unwrap();
    assert_eq!(report.lines().nth(1), Some("check,generator,function,statistic,value,threshold,pass"));
    for check in ["martingale", "bracket", "gamma_nonnegative", "gamma_route_local_vs_generator"] {
        assert!(report.lines().any(|l| l.starts_with(&format!("{check},"))), "{check}");
    }
}

#[test]
fn non_convergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#""paths_per_cell": 300"#, r#""paths_per_cell": 300, "max_iterations": 1"#);
    let path = write_config(dir.path(), "c.json", &text);
    let out_dir = dir.path().join("out");
    let out = run(&path, &out_dir, &["--phases", "mild"]);
    assert_eq!(out.status.code(), Some(2));
    let m = manifest(&out_dir);
    assert_eq!(m["status"], "not_converged");
    assert_eq!(m["mild"]["converged"], false);
    assert!(out_dir.join("u.csv").exists());
}

#[test]
fn failures_exit_with_one_and_still_write_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bad.json", &SMALL.replace(r#""terminal_g": "tanh(x1)","#, ""));
    let out_dir = dir.path().join("out");
    let out = run(&path, &out_dir, &[]);
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(&out_dir);
    assert_eq!(m["status"], "error");
    assert_eq!(m["error"]["phase"], "config");
    assert!(m["error"]["messages"][0].as_str().unwrap().contains("problem.terminal_g"));

    // a phase failure skips later phases
    let text = SMALL.replace(r#""terminal_g": "tanh(x1)""#, r#""terminal_g": "log(x1 - 10)""#);
    let path = write_config(dir.path(), "nan.json", &text);
    let out = run(&path, &out_dir, &["--phases", "mild,operators"]);
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(&out_dir);
    assert_eq!(m["error"]["phase"], "mild");
    assert!(m["timings_seconds"].get("operators").is_none());
}

#[test]
fn unknown_phase_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "small.json", SMALL);
    let out = run(&path, &dir.path().join("out"), &["--phases", "mild,plot"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("unknown phase 'plot'"));
}
