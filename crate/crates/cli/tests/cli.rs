use std::path::Path;
use std::process::{Command, Output};

fn msprr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msprr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_fit_report_traces() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let out = msprr(&["simulate", "--scenario", "1", "--seed", "4", "--out", arg(&sim)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sim.join("data.csv").exists());
    assert!(sim.join("truth.json").exists());

    let run = dir.path().join("run");
    let out = msprr(&[
        "fit",
        "--data",
        arg(&sim.join("data.csv")),
        "--variant",
        "constant-volatility",
        "--iterations",
        "6",
        "--burn-in",
        "2",
        "--thin",
        "2",
        "--seed",
        "9",
        "--out",
        arg(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let draws = std::fs::read_to_string(run.join("draws.ndjson")).unwrap();
    assert_eq!(draws.lines().count(), 2);
    assert!(run.join("checkpoint.json").exists());

    let out = msprr(&[
        "report",
        "--out",
        arg(&run),
        "--truth",
        arg(&sim.join("truth.json")),
        "--data",
        arg(&sim.join("data.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report[0]["draws"], 2);
    assert!(run.join("report.csv").exists());
    let csv = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(csv.starts_with("scenario,seed,variant,draws,mse,mspe"));

    let out = msprr(&["traces", "--out", arg(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traces = std::fs::read_to_string(run.join("traces.csv")).unwrap();
    assert!(traces.starts_with("sweep,quantity,state,index,value\n"));
    assert!(traces.lines().any(|l| l.starts_with("4,zeta,2,,")));
}

#[test]
fn scenario_replications_write_one_directory_each() {
    let dir = tempfile::tempdir().unwrap();
    let out = msprr(&[
        "fit",
        "--scenario",
        "3",
        "--replications",
        "2",
        "--iterations",
        "3",
        "--burn-in",
        "1",
        "--out",
        arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for rep in ["rep-001", "rep-002"] {
        let d = dir.path().join(rep);
        assert!(d.join("report.json").exists());
        assert_eq!(std::fs::read_to_string(d.join("draws.ndjson")).unwrap().lines().count(), 2);
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let out = msprr(&["report", "--out", arg(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(msprr(&["simulate", "--scenario", "2", "--out", arg(&sim)]).status.success());

    let out = msprr(&[
        "fit",
        "--data",
        arg(&sim.join("data.csv")),
        "--iterations",
        "5",
        "--burn-in",
        "5",
        "--out",
        arg(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("burn_in"));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "a_rho = 0.0\n").unwrap();
    let out = msprr(&[
        "fit",
        "--data",
        arg(&sim.join("data.csv")),
        "--config",
        arg(&cfg),
        "--iterations",
        "3",
        "--burn-in",
        "1",
        "--out",
        arg(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a_rho"));

    assert_eq!(msprr(&["simulate", "--scenario", "7", "--out", arg(&sim)]).status.code(), Some(1));
    assert_eq!(msprr(&["fit", "--out", arg(&sim)]).status.code(), Some(1));
    assert_eq!(msprr(&["--help"]).status.code(), Some(0));
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    // a huge response makes every likelihood non-finite
    let mut text = String::from("y1,y2,y3,x1,x2\n");
    for t in 0..40 {
        let big = if t == 7 { "1e300" } else { "0.5" };
        text.push_str(&format!("{big},{},{},{},{}\n", t % 3, t % 5, (t * 7) % 11, (t * 3) % 4));
    }
    std::fs::write(&data, text).unwrap();
    let out = msprr(&[
        "fit",
        "--data",
        arg(&data),
        "--iterations",
        "3",
        "--burn-in",
        "1",
        "--out",
        arg(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
