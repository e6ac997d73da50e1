use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fqh-graviton")).args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    let out = dir.to_str().unwrap();
    all.extend(["--out", out]);
    run(&all)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn quench_reports_graviton_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["quench", "--n", "9", "--l2", "5.477", "--q", "0.18", "--tmax", "10", "--dt", "0.05"]);
    assert_ok(&o);
    let fit = json(&dir.path().join("bimetric_fit.json"));
    let e_g = fit["E_g"].as_f64().unwrap();
    assert!((e_g - 1.29).abs() <= 0.05, "E_g = {e_g}");
    let meta = json(&dir.path().join("run_meta.json"));
    assert_eq!(meta["command"], "quench");
    assert_eq!(meta["config"]["n"], 9);
    assert!(meta["version"].is_string());
    let trace = std::fs::read_to_string(dir.path().join("quench_trace.csv")).unwrap();
    assert_eq!(column(&trace, "t").len(), 201);
}

#[test]
fn zero_quench_gives_flat_trace() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run_in(dir.path(), &["quench", "--q", "0", "--n", "6", "--tmax", "2", "--dt", "0.1"]));
    let trace = std::fs::read_to_string(dir.path().join("quench_trace.csv")).unwrap();
    assert!(column(&trace, "Q_tilde").iter().all(|&q| q == 0.0));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["quench", "--q", "0.1"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    for bad in [["--n", "1"], ["--l2", "-1"], ["--dt", "0"], ["--shots", "0"]] {
        let o = run_in(dir.path(), &["quench", bad[0], bad[1]]);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
    }
    assert_eq!(run_in(dir.path(), &["trotter", "--shots", "0"]).status.code(), Some(2));
    assert_eq!(run_in(dir.path(), &["compare", "--n", "9"]).status.code(), Some(2));
    assert_eq!(run_in(dir.path(), &["bimetric-fit"]).status.code(), Some(2));
    assert!(!dir.path().join("run_meta.json").exists());
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "n = 5\nl2 = 6.0\ntmax = 2.0\ndt = 0.25\n").unwrap();
    let out = dir.path().join("o");
    let o = run(&["quench", "--config", cfg.to_str().unwrap(), "--n", "6", "--out", out.to_str().unwrap()]);
    assert_ok(&o);
    let meta = json(&out.join("run_meta.json"));
    assert_eq!(meta["config"]["n"], 6);
    assert_eq!(meta["config"]["l2"], 6.0);
    assert_eq!(meta["config"]["q"], 0.18);

    std::fs::write(&cfg, "n = 5\nunknown_key = 1\n").unwrap();
    assert_eq!(run(&["quench", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn spectrum_files_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run_in(dir.path(), &["spectrum", "--n", "5", "--eta", "0.05"]));
    let table = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    let mut squeezed = Vec::new();
    let mut fock0 = Vec::new();
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let e: f64 = f[2].parse().unwrap();
        match (f[0], f[1]) {
            ("squeezed", _) => squeezed.push(e),
            ("fock", "0") => fock0.push(e),
            _ => {}
        }
    }
    assert!(squeezed.iter().any(|e| e.abs() < 1e-9));
    for e in &squeezed {
        assert!(fock0.iter().any(|f| (f - e).abs() < 1e-8), "squeezed level {e} missing from the Fock K=0 sector");
    }

    let meta = json(&dir.path().join("run_meta.json"));
    let geom = fqh_graviton::basis::CylinderGeometry::new(5, 5.477).unwrap();
    let g = fqh_graviton::geometry::metric_from_params(fqh_graviton::geometry::MetricParams::new(0.18, 0.0));
    let e_g = fqh_graviton::dynamics::graviton_energy(geom, &g).unwrap().e_g;
    assert!((meta["results"]["graviton_energy"].as_f64().unwrap() - e_g).abs() < 1e-10);

    let sf = std::fs::read_to_string(dir.path().join("spectral_function.csv")).unwrap();
    assert!(sf.starts_with("omega,I\n"));
    assert!(column(&sf, "I").iter().all(|&i| i >= 0.0));
}

#[test]
fn variational_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["variational", "--n-list", "5,7", "--tmax", "1", "--dt", "0.5", "--seed", "11"];
    assert_ok(&run_in(a.path(), &args));
    assert_ok(&run_in(b.path(), &args));
    let ca = std::fs::read(a.path().join("trajectory.csv")).unwrap();
    assert_eq!(ca, std::fs::read(b.path().join("trajectory.csv")).unwrap());
    assert!(String::from_utf8(ca).unwrap().starts_with("N,t,alpha,beta,overlap\n"));
}

#[test]
fn extrapolation_needs_enough_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["extrapolate", "--n-list", "9", "--order", "3", "--tmax", "0.5", "--dt", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rank deficient"));

    assert_ok(&run_in(dir.path(), &["extrapolate", "--n-list", "5,7,9,11", "--tmax", "1", "--dt", "0.5"]));
    let fit = json(&dir.path().join("extrapolation.json"));
    assert_eq!(fit.as_object().unwrap().len(), 3);
    assert_eq!(fit["0.5"]["beta"]["coefficients"].as_array().unwrap().len(), 4);
}

#[test]
fn trotter_reports_pipelines_and_retention() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["trotter", "--n", "4", "--tmax", "1", "--dt", "0.5", "--k", "10", "--shots", "20000", "--noise-p2", "0.01"]);
    assert_ok(&o);
    let meta = json(&dir.path().join("run_meta.json"));
    let r = &meta["results"];
    assert_eq!(r["pipelines"].as_array().unwrap().len(), 3);
    let retention = r["mean_retention"].as_f64().unwrap();
    assert!(retention > 0.5 && retention < 1.0, "{retention}");
    assert_eq!(r["cnot_count"]["circuit"], r["cnot_count"]["state_prep"].as_u64().unwrap() + 10 * r["cnot_count"]["trotter_step"].as_u64().unwrap());
    let table = std::fs::read_to_string(dir.path().join("trotter_observables.csv")).unwrap();
    let (exact, circuit) = (column(&table, "F_exact"), column(&table, "F_circuit"));
    for (e, c) in exact.iter().zip(&circuit) {
        assert!((e - c).abs() < 0.02, "{e} vs {c}");
    }
}

#[test]
fn compare_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run_in(dir.path(), &["compare", "--n", "5", "--tmax", "4", "--dt", "0.2"]));
    let meta = json(&dir.path().join("run_meta.json"));
    assert!(meta["results"]["rms_q_difference"].as_f64().unwrap() < 0.05);
    let sweep = json(&dir.path().join("l2_sweep.json"));
    let points = sweep.as_array().unwrap();
    assert_eq!(points.len(), 3);
    assert_eq!(points[0]["trivial_dynamics"], true);
    assert_eq!(points[2]["trivial_dynamics"], false);
    assert!(dir.path().join("quench_trace_L2_2.75.csv").exists());
    assert!(dir.path().join("comparison.csv").exists());
}

#[test]
fn bimetric_fit_reads_quench_output() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q");
    assert_ok(&run(&["quench", "--out", q.to_str().unwrap()]));
    let trace = q.join("quench_trace.csv");
    let f = dir.path().join("f");
    assert_ok(&run(&["bimetric-fit", "--input", trace.to_str().unwrap(), "--out", f.to_str().unwrap()]));
    let a = json(&q.join("bimetric_fit.json"));
    let b = json(&f.join("bimetric_fit.json"));
    assert!((a["E_g"].as_f64().unwrap() - b["E_g"].as_f64().unwrap()).abs() < 1e-6);
}
