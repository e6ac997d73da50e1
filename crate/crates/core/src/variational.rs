//! Two-parameter and site-resolved variational ansatz, overlap optimization
//! and `1/N` extrapolation of the optimal angles.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{CylinderGeometry, SqueezedBasis};
use crate::dynamics::{post_quench_hamiltonian, Propagator};
use crate::error::{Error, Result};
use crate::geometry::{metric_from_params, MetricParams, MetricTensor};
use crate::hamiltonian::{ground_state_closed_form, Space, StateVector};
use crate::optim::{anneal, nelder_mead, AnnealingSchedule};

/// Uniform rotation angle `beta` and phase `alpha`, both on the circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl VariationalParams {
    /// Angles reduced to `[0, 2π)`.
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha: alpha.rem_euclid(TAU), beta: beta.rem_euclid(TAU) }
    }

    /// Equivalent representative with `beta` in `[0, π]`.
    ///
    /// `(alpha + π, -beta)` prepares the same state up to a global phase.
    pub fn canonical(self) -> Self {
        if self.beta > PI {
            Self::new(self.alpha + PI, -self.beta)
        } else {
            self
        }
    }

    /// Largest circular distance between matching angles.
    pub fn distance(&self, other: &Self) -> f64 {
        circular(self.alpha - other.alpha).max(circular(self.beta - other.beta))
    }
}

fn circular(d: f64) -> f64 {
    let d = d.rem_euclid(TAU);
    d.min(TAU - d)
}

/// Per-register angles; index `l` addresses register `l + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteResolvedParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl SiteResolvedParams {
    pub fn uniform(p: VariationalParams, n_registers: usize) -> Self {
        Self { alpha: vec![p.alpha; n_registers], beta: vec![p.beta; n_registers] }
    }
}

fn apply_layers(basis: &SqueezedBasis, alpha: &[f64], beta: &[f64]) -> Vec<Complex64> {
    let mut psi = vec![Complex64::new(0.0, 0.0); basis.dim()];
    psi[basis.index_of(0).expect("all-zero string present")] = Complex64::new(1.0, 0.0);
    for l in 0..basis.n_registers() {
        let bit = 1u64 << l;
        let (c, s) = (beta[l].cos(), Complex64::new(0.0, -beta[l].sin()));
        for (i, &x) in basis.states().iter().enumerate() {
            if x & bit != 0 || (l > 0 && x & (bit >> 1) != 0) {
                continue;
            }
            // the partner is missing only when register l+1 is already set,
            // which the left-to-right order never produces
            let Some(j) = basis.index_of(x | bit) else { continue };
            let (u, v) = (psi[i], psi[j]);
            psi[i] = c * u + s * v;
            psi[j] = s * u + c * v;
        }
        let phase = Complex64::from_polar(1.0, -alpha[l]);
        for (i, &x) in basis.states().iter().enumerate() {
            if x & bit != 0 {
                psi[i] *= phase;
            }
        }
    }
    psi
}

/// `Π_ℓ e^{-iα N_ℓ} e^{-iβ (1 - N_{ℓ-1}) X_ℓ}` on the all-𝟘 string, ascending `ℓ`.
pub fn build_ansatz(params: VariationalParams, basis: &SqueezedBasis) -> StateVector {
    let n = basis.n_registers();
    let amps = apply_layers(basis, &vec![params.alpha; n], &vec![params.beta; n]);
    StateVector { space: Space::of_squeezed(basis), amps }
}

pub fn build_site_resolved(params: &SiteResolvedParams, basis: &SqueezedBasis) -> Result<StateVector> {
    let n = basis.n_registers();
    if params.alpha.len() != n || params.beta.len() != n {
        return Err(Error::InvalidInput(format!(
            "site-resolved angles need {n} entries, got {} and {}",
            params.alpha.len(),
            params.beta.len()
        )));
    }
    let amps = apply_layers(basis, &params.alpha, &params.beta);
    Ok(StateVector { space: Space::of_squeezed(basis), amps })
}

/// Evaluation budget of one optimization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub anneal: usize,
    pub refine: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self { anneal: 2000, refine: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub params: VariationalParams,
    pub overlap: f64,
}

fn overlap_with(target: &StateVector, basis: &SqueezedBasis, x: &[f64]) -> f64 {
    let n = basis.n_registers();
    let amps = apply_layers(basis, &vec![x[0]; n], &vec![x[1]; n]);
    amps.iter().zip(&target.amps).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm()
}

fn refine_local(f: &impl Fn(&[f64]) -> f64, x: &[f64], refine: usize) -> Result<(Vec<f64>, f64)> {
    // nelder_mead counts iterations; one iteration costs about two evaluations
    let m = nelder_mead(f, x, &[0.05, 0.05], 1e-14, (refine / 2).max(1) as u64)?;
    Ok((m.x, m.value))
}

/// Maximize `|<target|ansatz(α, β)>|` by annealing on the torus followed by local refinement.
///
/// A seed adds a local-only warm start; the better of the two results is kept.
pub fn optimize(
    target: &StateVector,
    basis: &SqueezedBasis,
    seed_params: Option<VariationalParams>,
    budget: Budget,
    rng: &mut ChaCha8Rng,
) -> Result<Optimum> {
    target.space.ensure_eq(&Space::of_squeezed(basis))?;
    let tn = target.norm();
    if !(tn > 0.0) {
        return Err(Error::InvalidInput("zero target state".into()));
    }
    let f = |x: &[f64]| 1.0 - overlap_with(target, basis, x) / tn;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |cand: (Vec<f64>, f64)| {
        if best.as_ref().is_none_or(|b| cand.1 < b.1) {
            best = Some(cand);
        }
    };
    if let Some(s) = seed_params {
        consider(refine_local(&f, &[s.alpha, s.beta], budget.refine)?);
    }
    let global = anneal(&f, &[0.0, 0.0], &[TAU, TAU], None, budget.anneal, AnnealingSchedule::default(), rng);
    consider(refine_local(&f, &global.x, budget.refine)?);
    let (x, v) = best.expect("at least one candidate");
    Ok(Optimum { params: VariationalParams::new(x[0], x[1]).canonical(), overlap: 1.0 - v })
}

/// Site-resolved refinement started from a uniform optimum.
pub fn optimize_site_resolved(
    target: &StateVector,
    basis: &SqueezedBasis,
    start: VariationalParams,
    max_iters: u64,
) -> Result<(SiteResolvedParams, f64)> {
    target.space.ensure_eq(&Space::of_squeezed(basis))?;
    let n = basis.n_registers();
    let tn = target.norm();
    let f = |x: &[f64]| {
        let amps = apply_layers(basis, &x[..n], &x[n..]);
        1.0 - amps.iter().zip(&target.amps).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm() / tn
    };
    let mut x0 = vec![start.alpha; n];
    x0.extend(vec![start.beta; n]);
    let m = nelder_mead(&f, &x0, &vec![0.02; 2 * n], 1e-15, max_iters)?;
    let (x, v) = if m.value <= f(&x0) { (m.x, m.value) } else { (x0.clone(), f(&x0)) };
    Ok((SiteResolvedParams { alpha: x[..n].to_vec(), beta: x[n..].to_vec() }, 1.0 - v))
}

/// One row of an optimal-angle trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub n: usize,
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
    pub overlap: f64,
    /// Optimizer failure or overlap below the reliability threshold.
    pub flagged: bool,
}

/// Rows with a smaller overlap are flagged.
pub const TRAJECTORY_OVERLAP_FLAG: f64 = 0.99;

/// Trajectory-wide inputs shared by every system size.
#[derive(Clone, Copy, Debug)]
pub struct TrajectorySettings {
    pub l2: f64,
    pub q_post: f64,
    pub phi_post: f64,
    pub budget: Budget,
    pub seed: u64,
}

/// Independent stream per `(seed, N, time index)`.
pub fn point_rng(seed: u64, n: usize, t_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 32) | t_index as u64);
    rng
}

/// Exact quench states of one size on a time grid.
pub fn exact_states(geometry: CylinderGeometry, q_post: f64, phi_post: f64, t_grid: &[f64]) -> Result<(SqueezedBasis, Vec<StateVector>)> {
    let basis = SqueezedBasis::new(geometry);
    let psi0 = ground_state_closed_form(&basis, &MetricTensor::identity())?;
    let (h, _) = post_quench_hamiltonian(&basis, &metric_from_params(MetricParams::new(q_post, phi_post)))?;
    let states = Propagator::new(&h)?.trajectory(&psi0, t_grid)?;
    Ok((basis, states))
}

fn trajectory_for(n: usize, s: &TrajectorySettings, t_grid: &[f64]) -> Result<Vec<TrajectoryRow>> {
    let geometry = CylinderGeometry::new(n, s.l2)?;
    let (basis, states) = exact_states(geometry, s.q_post, s.phi_post, t_grid)?;
    let mut rows = Vec::with_capacity(t_grid.len());
    let mut prev: Option<VariationalParams> = None;
    for (i, (psi, &t)) in states.iter().zip(t_grid).enumerate() {
        let mut rng = point_rng(s.seed, n, i);
        match optimize(psi, &basis, prev, s.budget, &mut rng) {
            Ok(opt) => {
                let p = match prev {
                    Some(q) => closest_gauge(opt.params, q),
                    None => opt.params,
                };
                prev = Some(p);
                rows.push(TrajectoryRow {
                    n,
                    t,
                    alpha: p.alpha,
                    beta: p.beta,
                    overlap: opt.overlap,
                    flagged: opt.overlap < TRAJECTORY_OVERLAP_FLAG,
                });
            }
            Err(_) => rows.push(TrajectoryRow { n, t, alpha: f64::NAN, beta: f64::NAN, overlap: 0.0, flagged: true }),
        }
    }
    Ok(rows)
}

/// Of the two gauge-equivalent representatives, the one nearer `reference`.
pub fn closest_gauge(p: VariationalParams, reference: VariationalParams) -> VariationalParams {
    let other = VariationalParams::new(p.alpha + PI, -p.beta);
    if other.distance(&reference) < p.distance(&reference) {
        other
    } else {
        p
    }
}

/// Optimal `(α*, β*)` along the quench for every size, each time step seeded by the previous one.
pub fn optimal_trajectory(settings: &TrajectorySettings, t_grid: &[f64], n_list: &[usize]) -> Result<Vec<TrajectoryRow>> {
    if t_grid.is_empty() || n_list.is_empty() {
        return Err(Error::InvalidInput("empty time grid or size list".into()));
    }
    let per_n: Vec<Result<Vec<TrajectoryRow>>> = n_list.par_iter().map(|&n| trajectory_for(n, settings, t_grid)).collect();
    let mut rows = Vec::new();
    for r in per_n {
        rows.extend(r?);
    }
    Ok(rows)
}

/// CSV `N,t,alpha,beta,overlap`.
pub fn trajectory_to_csv(rows: &[TrajectoryRow]) -> String {
    let data: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.n as f64, r.t, r.alpha, r.beta, r.overlap]).collect();
    crate::io::csv_table(&["N", "t", "alpha", "beta", "overlap"], &data)
}

pub fn trajectory_from_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Parse("empty table".into()))?.split(',').map(str::trim).collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| Error::Parse(format!("missing column {name}")));
    let (cn, ct, ca, cb, co) = (col("N")?, col("t")?, col("alpha")?, col("beta")?, col("overlap")?);
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |i: usize| -> Result<f64> {
                f.get(i)
                    .ok_or_else(|| Error::Parse(format!("short row: {line}")))?
                    .parse()
                    .map_err(|e| Error::Parse(format!("{e} in row {line}")))
            };
            let overlap = get(co)?;
            Ok(TrajectoryRow {
                n: get(cn)? as usize,
                t: get(ct)?,
                alpha: get(ca)?,
                beta: get(cb)?,
                overlap,
                flagged: overlap < TRAJECTORY_OVERLAP_FLAG,
            })
        })
        .collect()
}

/// Polynomial in `1/N` fitted at one time point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialFit {
    /// `p_0 + p_1/N + p_2/N^2 (+ p_3/N^3)`.
    pub coefficients: Vec<f64>,
    /// Largest absolute misfit at the sampled sizes.
    pub residual: f64,
}

impl PolynomialFit {
    pub fn eval(&self, n: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc / n + c)
    }
}

/// Least-squares fit of `values` against powers of `1/N`.
pub fn fit_inverse_n(ns: &[f64], values: &[f64], order: usize) -> Result<PolynomialFit> {
    let distinct = {
        let mut v: Vec<f64> = ns.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct < order + 1 {
        return Err(Error::RankDeficient(format!("{distinct} distinct sizes for an order-{order} fit")));
    }
    let a = DMatrix::from_fn(ns.len(), order + 1, |r, c| ns[r].powi(-(c as i32)));
    let b = DVector::from_column_slice(values);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax {
        return Err(Error::RankDeficient("ill-conditioned design matrix".into()));
    }
    let x = svd.solve(&b, 1e-14 * smax).map_err(|e| Error::Optimizer(e.to_string()))?;
    let residual = (a * &x - b).amax();
    Ok(PolynomialFit { coefficients: x.iter().copied().collect(), residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationPoint {
    pub t: f64,
    pub alpha: PolynomialFit,
    pub beta: PolynomialFit,
}

/// Per-time `1/N` fits of `α*` and `β*`, ordered by time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationFit {
    pub order: usize,
    pub points: Vec<ExtrapolationPoint>,
}

impl ExtrapolationFit {
    /// JSON object keyed by the time value.
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, serde_json::Value> = self
            .points
            .iter()
            .map(|p| {
                let key = crate::io::fmt_g(p.t);
                let v = serde_json::json!({
                    "t": p.t,
                    "order": self.order,
                    "alpha": {"coefficients": p.alpha.coefficients, "residual": p.alpha.residual},
                    "beta": {"coefficients": p.beta.coefficients, "residual": p.beta.residual},
                });
                (key, v)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    /// Extrapolated angles at size `n` for every time point.
    pub fn params_at(&self, n: f64) -> Vec<(f64, VariationalParams)> {
        self.points.iter().map(|p| (p.t, VariationalParams::new(p.alpha.eval(n), p.beta.eval(n)))).collect()
    }
}

/// Fit every time point of a trajectory table with a polynomial of `order` (2 or 3).
///
/// Angles are unwrapped across sizes before fitting so branch jumps do not enter the fit.
pub fn extrapolate(rows: &[TrajectoryRow], order: usize) -> Result<ExtrapolationFit> {
    if !(order == 2 || order == 3) {
        return Err(Error::InvalidInput(format!("extrapolation order must be 2 or 3, got {order}")));
    }
    let mut by_t: BTreeMap<u64, Vec<&TrajectoryRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.alpha.is_finite() && r.beta.is_finite()) {
        by_t.entry(r.t.to_bits()).or_default().push(r);
    }
    let mut points = Vec::new();
    let mut times: Vec<f64> = by_t.keys().map(|&b| f64::from_bits(b)).collect();
    times.sort_by(f64::total_cmp);
    for t in times {
        let mut group = by_t[&t.to_bits()].clone();
        group.sort_by_key(|r| r.n);
        let ns: Vec<f64> = group.iter().map(|r| r.n as f64).collect();
        let alpha = unwrap_near(group.iter().map(|r| r.alpha));
        let beta = unwrap_near(group.iter().map(|r| r.beta));
        points.push(ExtrapolationPoint { t, alpha: fit_inverse_n(&ns, &alpha, order)?, beta: fit_inverse_n(&ns, &beta, order)? });
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("no usable trajectory rows".into()));
    }
    Ok(ExtrapolationFit { order, points })
}

fn unwrap_near(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for v in values {
        let v = match out.last() {
            Some(&p) => p + (v - p + PI).rem_euclid(TAU) - PI,
            None => v,
        };
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn basis(n: usize) -> SqueezedBasis {
        SqueezedBasis::new(CylinderGeometry::new(n, 5.477).unwrap())
    }

    fn dense_reference(p: VariationalParams, n: usize) -> Vec<Complex64> {
        // direct simulation on all 2^(N-1) register strings
        let nr = n - 1;
        let mut psi = vec![Complex64::new(0.0, 0.0); 1 << nr];
        psi[0] = Complex64::new(1.0, 0.0);
        for l in 0..nr {
            let mut new = psi.clone();
            let (c, s) = (p.beta.cos(), Complex64::new(0.0, -p.beta.sin()));
            for x in 0..(1usize << nr) {
                if (x >> l) & 1 == 1 || (l > 0 && (x >> (l - 1)) & 1 == 1) {
                    continue;
                }
                let y = x | (1 << l);
                new[x] = c * psi[x] + s * psi[y];
                new[y] = s * psi[x] + c * psi[y];
            }
            psi = new;
            for (x, a) in psi.iter_mut().enumerate() {
                if (x >> l) & 1 == 1 {
                    *a *= Complex64::from_polar(1.0, -p.alpha);
                }
            }
        }
        psi
    }

    #[test]
    fn matches_unconstrained_simulation_and_never_leaks() {
        let b = basis(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = VariationalParams::new(rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            let dense = dense_reference(p, 7);
            let ours = build_ansatz(p, &b);
            assert_abs_diff_eq!(ours.norm(), 1.0, epsilon = 1e-12);
            for (x, a) in dense.iter().enumerate() {
                let x = x as u64;
                match b.index_of(x) {
                    Some(i) => assert!((ours.amps[i] - a).norm() < 1e-13),
                    None => assert_eq!(*a, Complex64::new(0.0, 0.0)),
                }
            }
        }
    }

    #[test]
    fn trivial_angles() {
        let b = basis(6);
        let root = build_ansatz(VariationalParams::new(1.3, 0.0), &b);
        assert_abs_diff_eq!(root.amps[0].norm(), 1.0, epsilon = 1e-15);
        let b2 = basis(2);
        let flipped = build_ansatz(VariationalParams::new(0.0, PI / 2.0), &b2);
        assert_abs_diff_eq!(flipped.amps[b2.index_of(1).unwrap()].norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn periodicity_and_gauge() {
        let b = basis(8);
        let p = VariationalParams { alpha: 0.7, beta: 2.1 };
        let q = VariationalParams { alpha: 0.7 + TAU, beta: 2.1 };
        assert_eq!(build_ansatz(p, &b).amps, build_ansatz(q, &b).amps);
        let g = VariationalParams::new(0.7 + PI, -2.1);
        let f = build_ansatz(p, &b).fidelity(&build_ansatz(g, &b)).unwrap();
        assert_abs_diff_eq!(f, 1.0, epsilon = 1e-12);
        assert!(VariationalParams::new(1.0, 4.0).canonical().beta <= PI);
    }

    #[test]
    fn site_resolved_reduces_to_uniform() {
        let b = basis(7);
        let p = VariationalParams::new(0.4, 0.9);
        let s = build_site_resolved(&SiteResolvedParams::uniform(p, 6), &b).unwrap();
        assert_eq!(s.amps, build_ansatz(p, &b).amps);
        let zero = build_site_resolved(&SiteResolvedParams::uniform(VariationalParams::new(0.0, 0.0), 6), &b).unwrap();
        assert_eq!(zero.amps[0], Complex64::new(1.0, 0.0));
        assert!(build_site_resolved(&SiteResolvedParams { alpha: vec![0.0; 5], beta: vec![0.0; 6] }, &b).is_err());
    }

    #[test]
    fn in_family_round_trip_and_phase_invariance() {
        let b = basis(7);
        let p = VariationalParams::new(2.0, 0.6);
        let target = build_ansatz(p, &b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opt = optimize(&target, &b, None, Budget::default(), &mut rng).unwrap();
        assert!(opt.overlap > 1.0 - 1e-9, "{opt:?}");
        assert!(closest_gauge(opt.params, p).distance(&p) < 1e-4, "{opt:?}");
        let rotated = StateVector { space: target.space, amps: target.amps.iter().map(|a| a * Complex64::from_polar(1.0, 1.1)).collect() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opt2 = optimize(&rotated, &b, None, Budget::default(), &mut rng).unwrap();
        assert_abs_diff_eq!(opt2.overlap, opt.overlap, epsilon = 1e-9);
        let root = StateVector::basis_state(target.space, b.dim(), 0);
        let r = optimize(&root, &b, None, Budget::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.overlap > 1.0 - 1e-9);
        // cos β = ±1 both leave the root untouched
        assert!(circular(2.0 * r.params.beta) < 1e-4);
    }

    #[test]
    fn site_resolved_not_worse_than_uniform() {
        let (b, states) = exact_states(CylinderGeometry::new(7, 5.477).unwrap(), 0.18, 0.0, &[3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = optimize(&states[0], &b, None, Budget::default(), &mut rng).unwrap();
        let (_, ov) = optimize_site_resolved(&states[0], &b, u.params, 3000).unwrap();
        assert!(ov >= u.overlap - 1e-12);
    }

    #[test]
    fn polynomial_recovery_and_rank_checks() {
        let ns = [7.0, 9.0, 11.0, 13.0];
        let vals: Vec<f64> = ns.iter().map(|n| 0.5 - 1.0 / n + 2.0 / (n * n) - 3.0 / (n * n * n)).collect();
        let fit = fit_inverse_n(&ns, &vals, 3).unwrap();
        for (c, e) in fit.coefficients.iter().zip([0.5, -1.0, 2.0, -3.0]) {
            assert_abs_diff_eq!(*c, e, epsilon = 1e-7);
        }
        assert!(fit.residual < 1e-12);
        assert_abs_diff_eq!(fit.eval(9.0), vals[1], epsilon = 1e-12);
        assert!(matches!(fit_inverse_n(&[7.0, 7.0, 7.0, 7.0], &vals, 3), Err(Error::RankDeficient(_))));
        assert!(matches!(fit_inverse_n(&ns[..2], &vals[..2], 2), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn extrapolate_groups_by_time() {
        let mut rows = Vec::new();
        for n in [7usize, 9, 11, 13] {
            for t in [0.0, 1.0] {
                let x = 1.0 / n as f64;
                rows.push(TrajectoryRow { n, t, alpha: 1.0 + t + x, beta: 0.3 + x * x, overlap: 1.0, flagged: false });
            }
        }
        let fit = extrapolate(&rows, 2).unwrap();
        assert_eq!(fit.points.len(), 2);
        assert_abs_diff_eq!(fit.points[1].alpha.coefficients[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.points[0].beta.coefficients[0], 0.3, epsilon = 1e-9);
        let json = fit.to_json().unwrap();
        assert!(json.contains("\"1\""));
        assert!(extrapolate(&rows[..2], 3).is_err());
        let back = trajectory_from_csv(&trajectory_to_csv(&rows)).unwrap();
        assert_eq!(back.len(), rows.len());
        assert_eq!(back[3].n, rows[3].n);
    }

    #[test]
    fn unwrap_handles_branch_jumps() {
        let v = unwrap_near([6.2, 0.05, 6.25].into_iter());
        assert!(v.windows(2).all(|w| (w[1] - w[0]).abs() < 0.2));
    }

    #[test]
    fn trajectory_is_deterministic() {
        let s = TrajectorySettings { l2: 5.477, q_post: 0.18, phi_post: 0.0, budget: Budget { anneal: 300, refine: 100 }, seed: 7 };
        let a = optimal_trajectory(&s, &[0.0, 0.5], &[5, 6]).unwrap();
        let b = optimal_trajectory(&s, &[0.0, 0.5], &[5, 6]).unwrap();
        assert_eq!(trajectory_to_csv(&a), trajectory_to_csv(&b));
        assert_eq!(a.len(), 4);
    }
}
