use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpr_estimation::policy::PolicyTable;
use mpr_estimation::scenario::Scenario;

fn mpr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpr"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, edit: impl FnOnce(&mut Scenario)) -> String {
    let mut s = Scenario::preset("two_drones").unwrap();
    s.solver.centroids = 25;
    s.solver.paths = 5;
    s.solver.path_length = 60;
    s.sim.horizon = 400;
    s.sim.runs = 2;
    edit(&mut s);
    let path = dir.join("scenario.toml");
    fs::write(&path, s.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn probs_writes_one_normalized_csv_per_action() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpr(dir.path(), &["--preset", "two_drones", "probs"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = fs::read_dir(dir.path().join("probs")).unwrap().collect();
    assert_eq!(files.len(), 16);
    let text = fs::read_to_string(dir.path().join("probs/3-3.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("gamma_bits,probability"));
    let total: f64 = lines.map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn solve_then_simulate_round_trips_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = mpr(dir.path(), &["--config", &cfg, "solve", "--mu", "0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table_path = dir.path().join("policy.tbl");
    let text = fs::read_to_string(&table_path).unwrap();
    let table = PolicyTable::parse(&text).unwrap();
    assert_eq!(table.serialize(), text);
    assert_eq!(table.len(), 25);
    let table_arg = table_path.to_string_lossy().into_owned();
    let out = mpr(dir.path(), &["--config", &cfg, "simulate", "--policy", "table", "--table", &table_arg, "--trace"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.contains("mean_trace=") && metrics.contains("mean_power="));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,trace_P,total_power,gamma_bits\n"));
    assert_eq!(trace.lines().count(), 401);
}

#[test]
fn fixed_full_power_reports_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = mpr(dir.path(), &["--config", &cfg, "simulate", "--policy", "fixed", "--action", "3,3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean_power=2\n"));
}

#[test]
fn invalid_config_exits_with_code_two_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |s| s.solver.beta = 1.5);
    let out = mpr(dir.path(), &["--config", &cfg, "probs"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solver.beta"));
    let out = mpr(dir.path(), &["--preset", "three_drones", "probs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_policy_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = mpr(dir.path(), &["--config", &cfg, "simulate", "--policy", "table", "--table", "/nonexistent/policy.tbl"]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn solver_cap_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |s| s.solver.vi_max_iters = 3);
    let out = mpr(dir.path(), &["--config", &cfg, "solve"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("policy.tbl").exists());
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = mpr(
        dir.path(),
        &["--config", &cfg, "sweep", "--mu", "0,1e9", "--policies", "simple_tx,simple_rc,sic_m4,vi_sic_m2,fh3_nosic_m2"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("policy,mu,mean_power,mean_power_se,mean_trace,mean_trace_se,error\n"));
    assert_eq!(csv.lines().count(), 11);
    let priced_out: Vec<&str> = csv.lines().filter(|l| l.contains(",1000000000,")).collect();
    assert_eq!(priced_out.len(), 5);
    for line in priced_out {
        assert_eq!(line.split(',').nth(2), Some("0"), "{line}");
    }
    let out = mpr(dir.path(), &["--config", &cfg, "sweep", "--policies", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stability_and_regions_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpr(dir.path(), &["--preset", "two_drones", "stability", "--trace-csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("stability.txt")).unwrap();
    assert!(report.contains("detectable") && report.contains("cond1"));
    assert!(fs::read_to_string(dir.path().join("riccati.csv")).unwrap().starts_with("k,trace\n"));
    let out = mpr(dir.path(), &["--preset", "two_drones", "regions", "--grid", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("regions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 26);
}
