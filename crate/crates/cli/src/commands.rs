//! Subcommand bodies. Each writes its tables and a `run_meta.json` into the output directory.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde_json::{json, Value};

use fqh_graviton::basis::{momentum_of, root_occupation, CylinderGeometry, FockBasis, SqueezedBasis};
use fqh_graviton::circuits::{
    build_state_prep, build_trotter_circuit, cnot_count, estimate_observables_from_counts, post_select_counts, sample, trotter_step,
    NoiseModel,
};
use fqh_graviton::dynamics::{
    compare_full_truncated, eigendecompose, fit_quench, graviton_energy, observables, run_quench, spectral_function, Observables,
    SpectralKind,
};
use fqh_graviton::geometry::{fit_bimetric, metric_from_params, BimetricFit, Degeneracy, MetricParams, MetricTensor, MetricTrace};
use fqh_graviton::hamiltonian::{build_truncated_fock, build_truncated_hamiltonian, Couplings};
use fqh_graviton::io::{csv_table, fmt_g, round_sig};
use fqh_graviton::variational::{
    exact_states, extrapolate, optimal_trajectory, trajectory_from_csv, trajectory_to_csv, Budget, ExtrapolationFit, TrajectoryRow,
    TrajectorySettings,
};
use fqh_graviton::Error;

use crate::config::{Command, Settings};
use crate::CliError;

/// Root-fidelity floor reported alongside each sweep point.
pub const TRIVIAL_ROOT_FLOOR: f64 = 0.99;

pub fn execute(cmd: Command, s: &Settings) -> Result<(), CliError> {
    std::fs::create_dir_all(&s.out).map_err(|e| io_err(&s.out, e))?;
    let results = match cmd {
        Command::Quench => quench(s)?,
        Command::Spectrum => spectrum(s)?,
        Command::Variational => variational(s)?,
        Command::Extrapolate => extrapolation(s)?,
        Command::Trotter => trotter(s)?,
        Command::Compare => compare(s)?,
        Command::BimetricFit => bimetric_fit(s)?,
    };
    let meta = json!({
        "command": cmd,
        "version": env!("CARGO_PKG_VERSION"),
        "config": s,
        "results": results,
    });
    write(s, "run_meta.json", &serde_json::to_string_pretty(&meta)?)
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

fn write(s: &Settings, name: &str, contents: &str) -> Result<(), CliError> {
    let path = s.out.join(name);
    let mut text = contents.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Twelve significant digits; non-finite values become `null`.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(round_sig(x))
    } else {
        Value::Null
    }
}

fn geometry(n: usize, l2: f64) -> Result<CylinderGeometry, CliError> {
    Ok(CylinderGeometry::new(n, l2)?)
}

fn post_metric(s: &Settings) -> MetricTensor {
    metric_from_params(MetricParams::new(s.q, s.phi))
}

fn fit_json(fit: &BimetricFit) -> Value {
    json!({
        "A": num(fit.a),
        "E_g": num(fit.e_g),
        "residual": num(fit.residual),
        "E_g_from_phase": fit.e_g_from_phase.map(num),
        "converged": fit.converged,
        "degenerate": fit.degenerate,
    })
}

fn quench(s: &Settings) -> Result<Value, CliError> {
    let geom = geometry(s.n, s.l2)?;
    let trace = run_quench(geom, s.q, s.phi, &s.time_grid())?;
    let fit = fit_quench(&trace)?;
    let v10_pre = Couplings::new(&geom, &MetricTensor::identity()).v10;
    write(s, "quench_trace.csv", &trace.to_csv())?;
    write(s, "bimetric_fit.json", &serde_json::to_string_pretty(&fit_json(&fit))?)?;
    Ok(json!({
        "fit": fit_json(&fit),
        "unreliable_points": trace.unreliable_points(),
        "min_root_fidelity": num(trace.min_root_fidelity()),
        "max_loschmidt_deficit": num(trace.max_loschmidt_deficit()),
        "v10_post": num(trace.v10_post),
        "v10_pre": num(v10_pre),
        "E_g_pre_quench_units": num(fit.e_g * trace.v10_post / v10_pre),
    }))
}

fn bimetric_fit(s: &Settings) -> Result<Value, CliError> {
    let path = s.input.as_ref().ok_or_else(|| CliError::Usage("bimetric-fit needs --input".into()))?;
    let trace = MetricTrace::from_csv(&read(path)?)?;
    let fit = fit_bimetric(&trace)?;
    write(s, "bimetric_fit.json", &serde_json::to_string_pretty(&fit_json(&fit))?)?;
    Ok(json!({ "fit": fit_json(&fit), "points": trace.len() }))
}

fn spectrum(s: &Settings) -> Result<Value, CliError> {
    let geom = geometry(s.n, s.l2)?;
    let g = post_metric(s);
    let v10 = Couplings::new(&geom, &g).v10;
    let mut table = String::from("basis,K,E\n");

    let sq = SqueezedBasis::new(geom);
    let h = build_truncated_hamiltonian(&sq, &g)?.scaled(1.0 / v10);
    for e in eigendecompose(&h)?.values {
        table += &format!("squeezed,0,{}\n", fmt_g(e));
    }
    let k0 = momentum_of(root_occupation(s.n), &geom);
    let mut sectors = Vec::new();
    for dk in -s.k_span..=s.k_span {
        let fock = match FockBasis::new(geom, Some(k0 + dk)) {
            Ok(b) => b,
            Err(Error::EmptySector(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        let h = build_truncated_fock(&fock, &g)?.scaled(1.0 / v10);
        let eig = eigendecompose(&h)?;
        sectors.push(json!({ "K": dk, "dim": fock.dim(), "complete": eig.complete }));
        for e in eig.values {
            table += &format!("fock,{dk},{}\n", fmt_g(e));
        }
    }
    write(s, "spectrum.csv", &table)?;

    let omega = s.omega_grid();
    let intensity = spectral_function(geom, &g, &omega, s.eta, SpectralKind::Quadrupole)?;
    let rows: Vec<Vec<f64>> = omega.iter().zip(&intensity).map(|(&w, &i)| vec![w, i]).collect();
    write(s, "spectral_function.csv", &csv_table(&["omega", "I"], &rows))?;
    let peak = rows.iter().max_by(|a, b| a[1].total_cmp(&b[1])).map(|r| r[0]).unwrap_or(f64::NAN);

    let ge = graviton_energy(geom, &g)?;
    Ok(json!({
        "graviton_energy": num(ge.e_g),
        "graviton_weight": num(ge.weight),
        "first_gap": num(ge.first_gap),
        "spectral_peak": num(peak),
        "squeezed_dim": sq.dim(),
        "fock_sectors": sectors,
        "energy_unit": "V10 of the post-quench metric",
    }))
}

fn trajectory(s: &Settings) -> Result<Vec<TrajectoryRow>, CliError> {
    let settings = TrajectorySettings {
        l2: s.l2,
        q_post: s.q,
        phi_post: s.phi,
        budget: Budget { anneal: s.anneal, refine: s.refine },
        seed: s.seed,
    };
    Ok(optimal_trajectory(&settings, &s.time_grid(), &s.n_list)?)
}

fn trajectory_summary(rows: &[TrajectoryRow]) -> Value {
    let sizes: BTreeSet<usize> = rows.iter().map(|r| r.n).collect();
    json!({
        "sizes": sizes,
        "min_overlap": num(rows.iter().map(|r| r.overlap).fold(f64::INFINITY, f64::min)),
        "flagged_points": rows.iter().filter(|r| r.flagged).count(),
    })
}

fn variational(s: &Settings) -> Result<Value, CliError> {
    let rows = trajectory(s)?;
    write(s, "trajectory.csv", &trajectory_to_csv(&rows))?;
    Ok(trajectory_summary(&rows))
}

/// Largest relative difference of the extrapolated `beta` between two fits.
fn beta_spread(a: &ExtrapolationFit, b: &ExtrapolationFit) -> f64 {
    a.points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| {
            let (x, y) = (p.beta.coefficients[0], q.beta.coefficients[0]);
            (x - y).abs() / x.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max)
}

fn extrapolation(s: &Settings) -> Result<Value, CliError> {
    let rows = match &s.input {
        Some(path) => trajectory_from_csv(&read(path)?)?,
        None => {
            let rows = trajectory(s)?;
            write(s, "trajectory.csv", &trajectory_to_csv(&rows))?;
            rows
        }
    };
    let fit = extrapolate(&rows, s.order)?;
    write(s, "extrapolation.json", &fit.to_json()?)?;
    let other = extrapolate(&rows, 5 - s.order).ok();
    Ok(json!({
        "order": s.order,
        "trajectory": trajectory_summary(&rows),
        "beta_relative_spread_between_orders": other.map(|o| num(beta_spread(&fit, &o))),
    }))
}

fn observable_columns(prefix: &str, n_orb: usize, header: &mut Vec<String>) {
    header.push(format!("F_{prefix}"));
    for j in 0..n_orb {
        header.push(format!("n{j}_{prefix}"));
    }
    for i in 0..n_orb {
        for j in i..n_orb {
            header.push(format!("C{i}_{j}_{prefix}"));
        }
    }
}

fn observable_values(o: &Observables, row: &mut Vec<f64>) {
    row.push(o.root_fidelity);
    row.extend(&o.density);
    for (i, r) in o.corr.iter().enumerate() {
        row.extend(&r[i..]);
    }
}

fn trotter(s: &Settings) -> Result<Value, CliError> {
    let geom = geometry(s.n, s.l2)?;
    let g = post_metric(s);
    let grid = s.time_grid();
    let n_qubits = geom.n_registers();
    let noise = NoiseModel::depolarizing(s.noise_p1, s.noise_p2).with_readout(s.readout, n_qubits);
    noise.validate(n_qubits)?;
    let noisy = s.noise_p1 > 0.0 || s.noise_p2 > 0.0 || s.readout > 0.0;

    let (basis, states) = exact_states(geom, s.q, s.phi, &grid)?;
    let prep = build_state_prep(&geom, &MetricTensor::identity())?;
    let step_cnots = cnot_count(&trotter_step(&geom, &g, s.tmax / s.k as f64)?);

    let points: Vec<(Vec<f64>, Option<f64>)> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &t)| -> Result<_, CliError> {
            let mut row = vec![t];
            observable_values(&observables(&states[i], &basis)?, &mut row);
            let mut c = prep.clone();
            c.extend(&build_trotter_circuit(&geom, &g, t, s.k)?)?;
            let seed = s.seed.wrapping_add(2 * i as u64);
            let (kept, _) = post_select_counts(&sample(&c, None, s.shots, None, seed)?)?;
            observable_values(&estimate_observables_from_counts(&kept, &geom)?, &mut row);
            let mut retention = None;
            if noisy {
                let (kept, frac) = post_select_counts(&sample(&c, None, s.shots, Some(&noise), seed + 1)?)?;
                observable_values(&estimate_observables_from_counts(&kept, &geom)?, &mut row);
                retention = Some(frac);
            }
            Ok((row, retention))
        })
        .collect::<Result<_, _>>()?;

    let n_orb = geom.n_orbitals();
    let mut header = vec!["t".to_string()];
    let mut pipelines = vec!["exact", "circuit"];
    if noisy {
        pipelines.push("noisy");
    }
    for p in &pipelines {
        observable_columns(p, n_orb, &mut header);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = points.iter().map(|(r, _)| r.clone()).collect();
    write(s, "trotter_observables.csv", &csv_table(&header, &rows))?;

    let retention: Vec<f64> = points.iter().filter_map(|(_, r)| *r).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(json!({
        "pipelines": pipelines,
        "n_qubits": n_qubits,
        "cnot_count": {
            "state_prep": cnot_count(&prep),
            "trotter_step": step_cnots,
            "circuit": cnot_count(&prep) + s.k * step_cnots,
        },
        "retention": retention.iter().map(|&r| num(r)).collect::<Vec<_>>(),
        "mean_retention": num(mean(&retention)),
    }))
}

fn compare(s: &Settings) -> Result<Value, CliError> {
    let grid = s.time_grid();
    let c = compare_full_truncated(geometry(s.n, s.l2)?, s.q, &grid)?;
    write(s, "comparison.csv", &c.to_csv())?;

    let mut sweep = Vec::new();
    for &l2 in &s.l2_sweep {
        let trace = run_quench(geometry(s.sweep_n, l2)?, s.q, 0.0, &grid)?;
        let fit = fit_quench(&trace)?;
        write(s, &format!("quench_trace_L2_{}.csv", fmt_g(l2)), &trace.to_csv())?;
        let floor = trace.min_root_fidelity();
        sweep.push(json!({
            "L2": num(l2),
            "N": s.sweep_n,
            "min_root_fidelity": num(floor),
            "max_loschmidt_deficit": num(trace.max_loschmidt_deficit()),
            "root_floor_above_0.99": floor > TRIVIAL_ROOT_FLOOR,
            "trivial_dynamics": fit.degenerate == Some(Degeneracy::TrivialDynamics),
            "fit": fit_json(&fit),
        }));
    }
    write(s, "l2_sweep.json", &serde_json::to_string_pretty(&sweep)?)?;
    Ok(json!({
        "rms_q_difference": num(c.rms_q_difference()),
        "ground_state_overlap": num(c.ground_state_overlap),
        "l2_sweep": sweep,
    }))
}
