//! Runs every example binary that `cargo test` builds alongside the tests.

use std::path::PathBuf;
use std::process::Command;

fn example_path(name: &str) -> PathBuf {
    // target/<profile>/deps/examples-<hash> -> target/<profile>/examples/<name>
    let exe = std::env::current_exe().unwrap();
    let dir = exe.parent().unwrap().parent().unwrap().join("examples");
    dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

fn run(name: &str) -> String {
    let path = example_path(name);
    assert!(path.exists(), "{} was not built", path.display());
    let out = Command::new(&path).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{name} failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn data_ingest() {
    assert!(run("data_ingest").contains("8 stations"));
}

#[test]
fn gam_smoothing() {
    assert!(run("gam_smoothing").contains("GP tail"));
}

#[test]
fn temperature_covariate() {
    assert!(run("temperature_covariate").contains("offset"));
}

#[test]
fn marginal_model() {
    assert!(run("marginal_model").contains("pooled PIT"));
}

#[test]
fn dependence_fit() {
    assert!(run("dependence_fit").contains("lambda1"));
}

#[test]
fn simulate_fields() {
    assert!(run("simulate_fields").contains("effective range"));
}

#[test]
fn extent_projection() {
    assert!(run("extent_projection").contains("SSP5-8.5"));
}

#[test]
fn pipeline_run() {
    let out = run("pipeline_run");
    assert!(out.contains("pass 2: ingest Skipped"), "{out}");
}
