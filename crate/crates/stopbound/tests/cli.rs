use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use stopbound::formats::{read_boundary_csv, TRACE_MAGIC};
use stopbound::manifest::verify;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stopbound"));
    c.env_remove("STOPBOUND_SEED");
    c
}

fn coarse_config(dir: &Path, params: &str, n_paths: usize) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{"schema_version": 1,
            "problem": {{"example": {{"name": "example1", "params": {{{params}}}}}}},
            "grid": {{"resolution": "coarse"}},
            "mc": {{"n_paths": {n_paths}, "diagnostic_paths": 1000, "seed": 3}}}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn example1_defaults_pass_and_stop_below_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = bin().args(["example", "example1", "--out"]).arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let gamma = 2.0 * 10f64.ln();
    let meta = json(&out.join("value_surface.json"));
    let g = &meta["slices"][0]["grid"]["axes"][0];
    let dx = (g["hi"].as_f64().unwrap() - g["lo"].as_f64().unwrap()) / (g["n"].as_f64().unwrap() - 1.0);
    let rows = read_boundary_csv(&fs::read_to_string(out.join("boundary.csv")).unwrap()).unwrap();
    let exact: Vec<_> = rows.iter().filter(|r| r.provenance == "pde-exact").collect();
    assert!(!exact.is_empty());
    assert!(exact.iter().all(|r| r.b <= gamma + dx));
    assert!(verify(&out).unwrap().is_empty());
    assert_eq!(json(&out.join("MANIFEST.json"))["complete"], Value::Bool(true));
}

#[test]
fn zero_paths_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = coarse_config(dir.path(), "", 0);
    let o = bin().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_paths"));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"schema_version": 1, "problem": {"example": {"name": "example1"}}, "paths": 5}"#).unwrap();
    assert_eq!(code(&bin().arg("run").arg(&cfg).output().unwrap()), 2);
}

#[test]
fn violated_conditions_are_informational() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = coarse_config(dir.path(), r#""c2": 0.0"#, 2000);
    let out = dir.path().join("o");
    let o = bin().arg("run").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let c = json(&out.join("conditions.json"));
    let cor = c["reports"].as_array().unwrap().iter().find(|r| r["tag"] == "Cor3.2-ii").unwrap();
    assert_eq!(cor["verdict"], "violated");
    assert!(!cor["witnesses"].as_array().unwrap().is_empty());
    assert_eq!(c["applicability"]["custom_path"], Value::Bool(true));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = coarse_config(dir.path(), "", 500);
    let seed_of = |env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(format!("o-{env:?}-{flag:?}"));
        let mut c = bin();
        c.arg("run").arg(&cfg).arg("--out").arg(&out);
        if let Some(e) = env {
            c.env("STOPBOUND_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert_eq!(code(&c.output().unwrap()), 0);
        json(&out.join("summary.json"))["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(None, None), 3);
    assert_eq!(seed_of(Some("7"), None), 7);
    assert_eq!(seed_of(Some("7"), Some("9")), 9);
}

#[test]
fn bad_seed_in_environment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = coarse_config(dir.path(), "", 500);
    let o = bin().arg("run").arg(&cfg).env("STOPBOUND_SEED", "x").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn probe_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = coarse_config(dir.path(), "", 500);
    let probes = dir.path().join("p.csv");
    fs::write(&probes, "t,x1\n# one point\n0.25,6.0\n").unwrap();
    let out = dir.path().join("o");
    let o = bin().arg("run").arg(&cfg).arg("--probes").arg(&probes).arg("--out").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0);
    let p = json(&out.join("probes.json"));
    assert_eq!(p["probes"].as_array().unwrap().len(), 1);
    assert_eq!(p["probes"][0]["x"][0].as_f64(), Some(6.0));
}

#[test]
fn traces_in_both_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let o = bin()
        .args(["trace", "example2a", "--x0", "0.5,0,0", "--paths", "3", "--dt", "0.25", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("path,step,t,x1,x2,x3,j11"));
    assert_eq!(lines.count(), 3 * 5);
    let bin_path = dir.path().join("t.bin");
    let o = bin()
        .args(["trace", "example2a", "--x0", "0.5,0,0", "--paths", "3", "--dt", "0.25", "--binary", "--out"])
        .arg(&bin_path)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let bytes = fs::read(&bin_path).unwrap();
    assert_eq!(&bytes[..8], TRACE_MAGIC);
    // Header plus 3 paths × 5 nodes × (3 states + 9 flow entries).
    assert_eq!(bytes.len(), 8 + 7 * 8 + 3 * 5 * 12 * 8);
}
