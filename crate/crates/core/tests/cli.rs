use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dispersion-lab"));
    cmd.env_remove("DISPERSION_LAB_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

#[test]
fn equilibrium_reports_nu() {
    let out = run(&["equilibrium", "--mu", "2"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert!((v["nu"].as_f64().unwrap() - 1.593624).abs() < 1e-6);
    assert_eq!(v["pmf"].as_array().unwrap().len(), 101);
}

#[test]
fn solve_row_count() {
    let out = run(&["solve", "--mu", "0.8", "--init", "split:100:0.008", "--t-end", "10"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("t,a,energy,p0,p1,"));
    assert!(header.ends_with(",p100"));
    assert_eq!(lines.count(), 1001);
}

#[test]
fn validation_failures_exit_one_with_json_report() {
    let out = run(&["solve", "--mu", "0.8", "--init", "delta:2"]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["error"], "validation");
    assert_eq!(report["schema_version"], 1);

    let out = run(&["reproduce", "7"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dump_config_round_trips() {
    let dir = tempdir().unwrap();
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let cfg = dir.path().join("solve.json");
    let args = ["solve", "--mu", "2", "--init", "delta:2", "--t-end", "1", "--nmax", "40"];

    let dumped = bin().args(args).args(["--out", csv_a.to_str().unwrap(), "--dump-config"]).output().unwrap();
    assert!(dumped.status.success());
    std::fs::write(&cfg, &dumped.stdout).unwrap();
    let v = json(&dumped);
    assert_eq!(v["n_max"], 40);
    assert_eq!(v["dt"], 0.01);
    assert!(!csv_a.exists(), "dump-config must not run the command");

    assert!(bin().args(args).args(["--out", csv_a.to_str().unwrap()]).output().unwrap().status.success());
    let from_cfg = bin()
        .args(["solve", "--config", cfg.to_str().unwrap(), "--out", csv_b.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(from_cfg.status.success());
    assert_eq!(std::fs::read(&csv_a).unwrap(), std::fs::read(&csv_b).unwrap());
}

#[test]
fn flags_override_config_file() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("eq.json");
    std::fs::write(&cfg, r#"{"mu": 3.0, "n_max": 50}"#).unwrap();
    let v = json(&run(&["equilibrium", "--config", cfg.to_str().unwrap(), "--mu", "2", "--dump-config"]));
    assert_eq!(v["mu"], 2.0);
    assert_eq!(v["n_max"], 50);
}

fn simulate(dir: &Path, name: &str, extra: &[&str], env_seed: Option<&str>) -> Vec<u8> {
    let out = dir.join(name);
    let summary = dir.join(format!("{name}.json"));
    let mut cmd = bin();
    if let Some(seed) = env_seed {
        cmd.env("DISPERSION_LAB_SEED", seed);
    }
    let status = cmd
        .args(["simulate", "--sites", "200", "--particles", "400", "--placement", "even"])
        .args(["--t-end", "3", "--samples", "linspace:0:3:7", "--replicates", "3"])
        .args(["--out", out.to_str().unwrap(), "--summary", summary.to_str().unwrap()])
        .args(extra)
        .status()
        .unwrap();
    assert!(status.success());
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(&summary).unwrap()).unwrap();
    assert_eq!(s["schema_version"], 1);
    assert_eq!(s["mean_occupancy"], 2.0);
    std::fs::read(out).unwrap()
}

#[test]
fn simulate_is_reproducible_across_job_counts() {
    let dir = tempdir().unwrap();
    let a = simulate(dir.path(), "a.csv", &["--seed", "5", "--jobs", "1"], None);
    let b = simulate(dir.path(), "b.csv", &["--seed", "5", "--jobs", "3"], None);
    let c = simulate(dir.path(), "c.csv", &[], Some("5"));
    let d = simulate(dir.path(), "d.csv", &["--seed", "6"], None);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_ne!(a, d);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("replicate,t,n,count\n"));
    // each replicate and sample time accounts for all 200 sites
    let mut totals = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *totals.entry((f[0].to_string(), f[1].to_string())).or_insert(0u64) += f[3].parse::<u64>().unwrap();
    }
    assert_eq!(totals.len(), 3 * 7);
    assert!(totals.values().all(|&n| n == 200));
}

#[test]
fn pgf_check_and_rates_on_saved_trajectory() {
    let dir = tempdir().unwrap();
    let traj = dir.path().join("traj.csv");
    let ok = bin()
        .args(["solve", "--mu", "2", "--init", "delta:2", "--t-end", "10", "--out", traj.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(ok.status.success());

    let v = json(&run(&["pgf-check", "--trajectory", traj.to_str().unwrap(), "--times", "1,5", "--grid", "16"]));
    assert!(v["max_residual_pgf"].as_f64().unwrap() < 1e-4);
    assert!(v["max_residual_volterra"].as_f64().unwrap() < 5e-3);
    assert!((v["nu"].as_f64().unwrap() - 1.593624).abs() < 1e-6);
    assert!(v["v_limit_error"].as_f64().unwrap() < 1e-3);

    let v = json(&run(&["rates", "--trajectory", traj.to_str().unwrap(), "--target", "ztp", "--window", "2:8"]));
    assert_eq!(v["theory_rate"], 1.0);
    assert!(v["rate"].as_f64().unwrap() >= 0.95);
    assert!(v["ratio"].as_f64().is_some());
}

#[test]
fn reproduce_energy_figure() {
    let dir = tempdir().unwrap();
    let out = run(&["reproduce", "5", "--mu", "0.8", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["pass"], true);
    assert!(dir.path().join("fig5_energy_mu0.8.csv").exists());
    assert!(dir.path().join("fig5_report.json").exists());
}
