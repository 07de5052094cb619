//! Black-box tests of the `kb` binary: config rejection, verify output and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use kb_core::phase::read_fields_csv;
use serde_json::Value;

fn kb(args: &[&str], workdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kb")).args(args).current_dir(workdir).output().expect("kb binary runs")
}

const BASE: &str = r#"
scenario = "small"
output = "out"

[kernel]
lambda = 0.5
dim = 2

[grid]
Nx = 4
Nv = 4
Nsigma = 8
Nt = 2
T = 0.25

[regime.near_vacuum]
alpha = 1.0
beta = 1.0
fraction = 0.5
"#;

fn write_cfg(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).expect("stderr carries one JSON document")
}

#[test]
fn verify_json_is_one_document_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = kb(&["verify", "--json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["pass"], true);
    assert!(doc["items"].as_array().unwrap().len() >= 10);
    assert!(doc["seconds"].as_f64().unwrap() < 10.0);
}

#[test]
fn injected_sign_error_names_conservation() {
    let dir = tempfile::tempdir().unwrap();
    let o = kb(&["verify", "--inject-fault", "post-collision-sign"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("post_collision_conservation"));
}

#[test]
fn lambda_at_the_upper_limit_is_rejected_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &BASE.replace("lambda = 0.5", "lambda = 1.0").replace("Nx = 4", "Nx = 3"));
    let o = kb(&["run", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let doc = stderr_json(&o);
    let v = doc["violations"].as_array().unwrap();
    assert_eq!(v.len(), 2, "{v:?}");
    assert!(v[0].as_str().unwrap().contains("lambda < n - 1"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn smallness_violation_reports_the_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &BASE.replace("fraction = 0.5", "amplitude = 1.0"));
    let o = kb(&["run", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let doc = stderr_json(&o);
    assert_eq!(doc["error"], "smallness violated");
    assert!(doc["threshold"].as_f64().unwrap() < 1.0);
    assert!(doc["violations"][0].as_str().unwrap().contains("1/(4k)"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "scenario = ");
    let o = kb(&["run", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "invalid configuration");
}

#[test]
fn run_writes_the_artifact_layout_and_is_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{BASE}\n[checks]\nlist = [\"stability\"]\n"));
    let a = kb(&["run", &cfg, "--output", "a", "--workers", "1"], dir.path());
    let b = Command::new(env!("CARGO_BIN_EXE_kb"))
        .args(["run", &cfg, "--output", "b"])
        .env("KB_WORKERS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    // the coarse grid may fail a numerical check; both runs must agree either way
    assert!(matches!(a.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.status.code(), b.status.code());
    let root = dir.path();
    for name in ["fields.csv", "fields.json", "report.json", "manifest.json", "traces/gaps.csv", "traces/stability.csv"] {
        let x = std::fs::read(root.join("a/small").join(name)).unwrap();
        let y = std::fs::read(root.join("b/small").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between worker counts");
    }
    let timings: Value = serde_json::from_slice(&std::fs::read(root.join("b/small/timings.json")).unwrap()).unwrap();
    assert_eq!(timings["workers"], 2);
    let manifest: Value = serde_json::from_slice(&std::fs::read(root.join("a/small/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert!(manifest["verdicts"].as_array().unwrap().iter().any(|v| v["name"] == "stability"));
    let fields = read_fields_csv(&root.join("a/small/fields.csv")).unwrap();
    assert_eq!(fields.len(), 3);
    assert!(fields.iter().all(|f| f.values.iter().all(|v| v.is_finite())));
}

#[test]
fn bench_reports_determinism_and_sigma_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &BASE.replace("Nx = 4", "Nx = 6").replace("Nv = 4", "Nv = 6"));
    let o = kb(&["bench", &cfg, "--workers", "2", "--repeats", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["deterministic"], true);
    assert_eq!(doc["worker_invariant"], true);
    assert_eq!(doc["entries"].as_array().unwrap().len(), 2);
    let ratio = doc["sigma_cost_ratio"].as_f64().unwrap();
    assert!(ratio > 1.0, "doubling Nsigma should cost more, got {ratio}");
}
