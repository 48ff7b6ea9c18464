use std::process::Command;

use ddmpc_core::harness::cstr_scenario;

fn ddmpc() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddmpc"));
    cmd.env("RUST_LOG", "off");
    cmd
}

#[test]
fn missing_scenario_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddmpc().args(["run", "missing.toml", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn malformed_scenario_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "duration = \"ten\"\n").unwrap();
    let out = ddmpc().arg("run").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_rejected() {
    let out = ddmpc().args(["bench", "cstr", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn run_writes_artifacts_for_a_scenario_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = cstr_scenario();
    sc.duration = 4.0;
    let path = dir.path().join("short.toml");
    std::fs::write(&path, sc.to_toml_string().unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = ddmpc()
        .arg("run")
        .arg(&path)
        .args(["--constraint", "squash", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("PASS [3]") || l.starts_with("FAIL [3]")));
    for name in ["report.json", "trajectory.csv", "solves.csv", "estimator.json"] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn identify_recovers_the_benchmark_plant() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = cstr_scenario();
    sc.duration = 2.0 + sc.config.horizon;
    sc.learning = false;
    let path = dir.path().join("s.toml");
    std::fs::write(&path, sc.to_toml_string().unwrap()).unwrap();
    let run = ddmpc().arg("run").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(run.status.success());
    let out = ddmpc().arg("identify").arg(dir.path().join("trajectory.csv")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("windows: 301"));
    assert!(stdout.contains("-17.9"), "{stdout}");
}
