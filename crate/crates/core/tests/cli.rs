use std::path::Path;
use std::process::{Command, Output};

fn spinflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinflow")).args(args).env("SPINFLOW_THREADS", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn solve_fpk_writes_artifacts_and_passes_monotonicity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fpk");
    let o = spinflow(&[
        "solve-fpk", "--sites", "2", "--resolution", "8", "--tilt", "1.5", "--t-end", "0.2", "--every", "20",
        "--monotone-budget", "0", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["status"], "pass");
    assert_eq!(m["code_version"], env!("CARGO_PKG_VERSION"));
    for f in ["config.json", "trajectory.csv", "snapshots.csv", "report.json", "free_energy.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let artifacts: Vec<String> = serde_json::from_value(m["artifacts"].clone()).unwrap();
    let mut sorted = artifacts.clone();
    sorted.sort();
    assert_eq!(artifacts, sorted);
}

#[test]
fn run_config_reproduces_and_compares_to_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
  "name": "heat-circle",
  "model": {
    "manifold": {"kind": "circle", "resolution": 32},
    "sites": 1,
    "coupling": {"type": "nn", "J": 0.0},
    "psi": {"name": "cos_diff"},
    "beta": 0.0
  },
  "dynamics": {"kind": "fpk", "dt": 0.001, "t_end": 0.1, "every": 10},
  "initial": {"name": "tilted", "k": 2.0},
  "checks": [{"name": "free_energy_monotone"}],
  "outputs": {"dir": "unused"}
}"#,
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = spinflow(&["run", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(a.join("trajectory.csv")).unwrap(), std::fs::read(b.join("trajectory.csv")).unwrap());
    assert_eq!(manifest(&a), manifest(&b));
    let o = spinflow(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--metric", "w2"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max gap 0.000000e0"));
}

#[test]
fn malformed_config_exits_with_schema_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"name": "x", "model": {}, "bogus": 1}"#).unwrap();
    assert_eq!(code(&spinflow(&["run", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&spinflow(&["solve-fpk"])), 2);
}

#[test]
fn compare_refuses_different_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (d, m) in [(&a, "8"), (&b, "16")] {
        let o = spinflow(&["solve-fpk", "--sites", "1", "--resolution", m, "--t-end", "0.05", "--every", "10", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(code(&spinflow(&["compare", a.to_str().unwrap(), b.to_str().unwrap()])), 2);
}

#[test]
fn gamma_metric_and_plot_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let o = spinflow(&["gamma-metric", "--radius", "40", "--pairs", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let svg = tmp.path().join("g.svg");
    let o = spinflow(&["plot", out.join("gamma.csv").to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn langevin_jko_and_converge_subcommands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    let o = spinflow(&["simulate-langevin", "--sites", "2", "--resolution", "8", "--particles", "200", "--t-end", "0.05", "--every", "10", "--out", &p("l")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("l/observables.csv").exists());
    let o = spinflow(&["run-jko", "--sites", "2", "--resolution", "8", "--tilt", "1", "--h", "0.02", "--t-end", "0.1", "--monotone-budget", "0", "--out", &p("j")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = spinflow(&["converge", "--sites", "2", "--resolution", "8", "--t-end", "1", "--out", &p("c")]);
    assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("c/gap.csv").exists());
}
