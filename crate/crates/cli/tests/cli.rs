use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn nullheat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nullheat"))
        .args(args)
        .env_remove("NULLHEAT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn small_linear(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(scenario("linear")).unwrap().replace("nx = 64", "nx = 16").replace("nt = 64", "nt = 16");
    let p = dir.join("linear16.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn linear_run_exits_zero_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_linear(tmp.path());
    let out = tmp.path().join("run");
    let o = nullheat(&["--deterministic", "run", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["scenario.lock", "summary.json", "timing.json", "iterations.csv", "diagnostics.csv", "report.md", "y_end.csv", "f_end.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let head = fs::read_to_string(out.join("iterations.csv")).unwrap();
    assert!(head.starts_with("k,E,sqrtE,lambda,y_sup,s,order,c1,seconds"));
}

#[test]
fn picard_on_the_contrast_scenario_diverges() {
    let tmp = tempfile::tempdir().unwrap();
    let o = nullheat(&["run", "--scenario", scenario("picard_big").to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn missing_omega_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("linear")).unwrap().replace("omega = [0.2, 0.8]\n", "");
    let p = tmp.path().join("bad.toml");
    fs::write(&p, text).unwrap();
    let o = nullheat(&["run", "--scenario", p.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn unknown_flag_and_missing_file_are_config_errors() {
    assert_eq!(code(&nullheat(&["run", "--bogus"])), 3);
    assert_eq!(code(&nullheat(&["run", "--scenario", "/nonexistent/x.toml"])), 3);
}

#[test]
fn compare_needs_two_runs() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&nullheat(&["compare"])), 3);
    let o = nullheat(&["compare", tmp.path().to_str().unwrap(), "--out", tmp.path().join("c").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
}

#[test]
fn compare_merges_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_linear(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&nullheat(&["run", "--scenario", sc.to_str().unwrap(), "--out", d.to_str().unwrap()])), 0);
    }
    let out = tmp.path().join("cmp");
    let o = nullheat(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(csv.starts_with("run,scenario,method,outcome,iterations,sqrtE_final,terminal_norm,terminal_ratio,seconds"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn weights_dump_has_the_documented_header() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = small_linear(tmp.path());
    let out = tmp.path().join("w.csv");
    let o = nullheat(&["weights-dump", "--scenario", sc.to_str().unwrap(), "--s", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,t,theta,phi,xi,log_rho,log_rho0,log_rho1");
    assert!(text.lines().count() > 100);
}
