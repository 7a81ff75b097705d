use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const SCENARIO: &str = r#"duration = 119.0
seed = 4

[[trajectory]]
duration = 40.0
speed = 10.0

[[trajectory]]
duration = 15.0
speed = 6.0
yaw_rate = 0.1

[[nlos]]
start = 30.0
end = 119.0
fraction = 0.25
offsets = [{ weight = 1.0, mean = 30.0, std = 10.0 }]
"#;

fn ivm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivm")).args(args).output().expect("binary runs")
}

fn text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
}

#[test]
fn simulate_run_evaluate_on_two_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scenario.toml");
    let stream = dir.path().join("stream.txt");
    let est = dir.path().join("est.csv");
    let trace = dir.path().join("trace.txt");
    std::fs::write(&spec, SCENARIO).unwrap();

    let start = Instant::now();
    let out = ivm(&["simulate", p(&spec), "-o", p(&stream)]);
    assert!(out.status.success(), "{out:?}");
    let out = ivm(&["run", p(&stream), "--model", "ivm", "-o", p(&est), "--trace", p(&trace)]);
    assert!(out.status.success(), "{out:?}");
    let out = ivm(&["evaluate", p(&est), p(&stream)]);
    assert!(out.status.success(), "{out:?}");
    assert!(start.elapsed().as_secs_f64() < 60.0);

    let report = text(&out);
    assert_eq!(value(&report, "epochs"), 120.0);
    let mean = value(&report, "mean_ate_m");
    assert!(mean.is_finite() && mean < 3.0, "mean ATE {mean}");

    let csv = std::fs::read_to_string(&est).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "time,x,y,z,phi,delta,delta_dot,K,runtime_s");
    assert_eq!(csv.lines().count(), 121);
    let traced = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(traced.lines().filter(|l| l.starts_with("epoch ")).count(), 120);
}

#[test]
fn seed_flag_overrides_scenario_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scenario.toml");
    std::fs::write(&spec, "duration = 10.0\nseed = 1\n").unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    let c = dir.path().join("c.txt");
    assert!(ivm(&["simulate", p(&spec), "-o", p(&a)]).status.success());
    assert!(ivm(&["--seed", "1", "simulate", p(&spec), "-o", p(&b)]).status.success());
    assert!(ivm(&["simulate", p(&spec), "-o", p(&c), "--seed", "2"]).status.success());
    let read = |f: &Path| std::fs::read_to_string(f).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn sweep_prints_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scenario.toml");
    let stream = dir.path().join("urban.txt");
    let csv = dir.path().join("table.csv");
    std::fs::write(&spec, SCENARIO.replace("119.0", "39.0")).unwrap();
    assert!(ivm(&["simulate", p(&spec), "-o", p(&stream)]).status.success());
    let out = ivm(&["sweep", p(&stream), "--models", "gaussian,dcs,ivm", "--threads", "2", "--csv", p(&csv)]);
    assert!(out.status.success(), "{out:?}");
    let table = text(&out);
    for label in ["Gaussian", "DCS", "IVM", "urban"] {
        assert!(table.contains(label), "{label} missing from\n{table}");
    }
    let written = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(written.lines().next().unwrap(), "model,urban:ate_m,urban:time_s");
    assert_eq!(written.lines().count(), 4);
}

#[test]
fn config_file_is_applied_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scenario.toml");
    let stream = dir.path().join("s.txt");
    let est = dir.path().join("est.csv");
    std::fs::write(&spec, "duration = 15.0\nseed = 3\n").unwrap();
    assert!(ivm(&["simulate", p(&spec), "-o", p(&stream)]).status.success());

    let good = dir.path().join("good.toml");
    std::fs::write(&good, "model = \"sm_em\"\nfixed_k = 2\nwindow = 10.0\n").unwrap();
    let out = ivm(&["run", p(&stream), "--config", p(&good), "-o", p(&est)]);
    assert!(out.status.success(), "{out:?}");
    assert!(text(&out).starts_with("sm_em"));
    let ks: Vec<String> = std::fs::read_to_string(&est)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(7).unwrap().to_string())
        .collect();
    assert!(ks.iter().all(|k| k == "2"), "{ks:?}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "window = 0.0\nunknown_key = 1\n").unwrap();
    let out = ivm(&["run", p(&stream), "--config", p(&bad), "-o", p(&est)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ivm: error"));
}

#[test]
fn usage_and_io_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let out_csv = dir.path().join("o.csv");
    assert_eq!(ivm(&["run", p(&missing), "--model", "bogus", "-o", p(&out_csv)]).status.code(), Some(2));
    assert_eq!(ivm(&["frobnicate"]).status.code(), Some(2));
    let out = ivm(&["run", p(&missing), "-o", p(&out_csv)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    let stream = dir.path().join("bad.txt");
    std::fs::write(&stream, "pseudorange3 1 1 0 0 2e7 2e7 3\npseudorange3 0 2 0 0 2e7 2e7 3\n").unwrap();
    let out = ivm(&["run", p(&stream), "-o", p(&out_csv)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(ivm(&["--help"]).status.success());
}
