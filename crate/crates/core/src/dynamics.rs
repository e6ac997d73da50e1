//! Exact diagonalization, time evolution and the geometric-quench pipeline.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{momentum_of, CylinderGeometry, FockBasis, Occupation, SqueezedBasis};
use crate::error::{Error, Result};
use crate::geometry::{fit_bimetric, metric_from_params, BimetricFit, Degeneracy, MetricParams, MetricTensor, MetricTrace};
use crate::hamiltonian::{
    build_full_hamiltonian, build_truncated_hamiltonian, ground_state_closed_form, project_to_squeezed, Couplings,
    SparseHermitian, Space, StateVector, DEFAULT_CUTOFF,
};
use crate::optim::nelder_mead;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Largest dimension handled by dense diagonalization.
pub const DENSE_LIMIT: usize = 4096;

/// Eigenpairs with ascending eigenvalues; `vectors` holds them as columns.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
    /// False when only the low-lying part of the spectrum was computed.
    pub complete: bool,
}

impl EigenSystem {
    pub fn vector(&self, n: usize) -> Vec<Complex64> {
        self.vectors.column(n).iter().copied().collect()
    }

    /// `<n|psi>` for every stored eigenvector.
    pub fn coefficients(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let v = DVector::from_column_slice(psi);
        (self.vectors.adjoint() * v).iter().copied().collect()
    }
}

fn sort_eigen(values: Vec<f64>, vectors: DMatrix<Complex64>) -> EigenSystem {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let vals = order.iter().map(|&i| values[i]).collect();
    let vecs = DMatrix::from_fn(vectors.nrows(), order.len(), |r, c| vectors[(r, order[c])]);
    EigenSystem { values: vals, vectors: vecs, complete: true }
}

/// Number of low-lying states computed by the iterative solver.
pub const KRYLOV_EIGENPAIRS: usize = 6;

/// Full dense decomposition up to [`DENSE_LIMIT`]; above it the lowest
/// [`KRYLOV_EIGENPAIRS`] states from Lanczos.
pub fn eigendecompose(h: &SparseHermitian) -> Result<EigenSystem> {
    if h.dim() == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    if h.dim() > DENSE_LIMIT {
        return lowest_eigenpairs(h, KRYLOV_EIGENPAIRS.min(h.dim()), 1e-10);
    }
    if let Some(m) = h.to_dense_real() {
        let e = m.symmetric_eigen();
        let vecs = e.eigenvectors.map(|x| Complex64::new(x, 0.0));
        Ok(sort_eigen(e.eigenvalues.iter().copied().collect(), vecs))
    } else {
        let e = h.to_dense().symmetric_eigen();
        Ok(sort_eigen(e.eigenvalues.iter().copied().collect(), e.eigenvectors))
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Lanczos basis with full reorthogonalization: `(alphas, betas, vectors)`.
fn lanczos(h: &SparseHermitian, start: &[Complex64], m: usize) -> (Vec<f64>, Vec<f64>, Vec<Vec<Complex64>>) {
    let n0 = norm(start);
    let mut vs: Vec<Vec<Complex64>> = vec![start.iter().map(|x| x / n0).collect()];
    let (mut alphas, mut betas) = (Vec::new(), Vec::new());
    for j in 0..m {
        let mut w = h.apply(&vs[j]);
        let a = dot(&vs[j], &w).re;
        alphas.push(a);
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for v in &vs {
                let c = dot(v, &w);
                w.iter_mut().zip(v).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = norm(&w);
        betas.push(b);
        if j + 1 == m || b < 1e-14 {
            break;
        }
        vs.push(w.iter().map(|x| x / b).collect());
    }
    (alphas, betas, vs)
}

fn tridiagonal(alphas: &[f64], betas: &[f64]) -> DMatrix<f64> {
    let k = alphas.len();
    DMatrix::from_fn(k, k, |r, c| {
        if r == c {
            alphas[r]
        } else if r + 1 == c {
            betas[r]
        } else if c + 1 == r {
            betas[c]
        } else {
            0.0
        }
    })
}

/// Lowest `k` eigenpairs by Lanczos with full reorthogonalization.
pub fn lowest_eigenpairs(h: &SparseHermitian, k: usize, tol: f64) -> Result<EigenSystem> {
    let dim = h.dim();
    let start: Vec<Complex64> = (0..dim).map(|i| Complex64::new(1.0 + 0.3 * ((i as f64) * 0.7).sin(), 0.0)).collect();
    let scale = h.max_abs().max(1e-300);
    let mut m = (4 * k + 40).min(dim);
    loop {
        let (alphas, betas, vs) = lanczos(h, &start, m);
        let t = tridiagonal(&alphas, &betas);
        let e = t.symmetric_eigen();
        let mut order: Vec<usize> = (0..alphas.len()).collect();
        order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
        let kk = k.min(alphas.len());
        let last = betas[alphas.len() - 1];
        let worst = order[..kk]
            .iter()
            .map(|&i| (last * e.eigenvectors[(alphas.len() - 1, i)]).abs())
            .fold(0.0, f64::max);
        if worst <= tol * scale || alphas.len() < m || m == dim {
            let mut vecs = DMatrix::from_element(dim, kk, ZERO);
            for (c, &i) in order[..kk].iter().enumerate() {
                for (j, v) in vs.iter().enumerate().take(alphas.len()) {
                    let y = e.eigenvectors[(j, i)];
                    for r in 0..dim {
                        vecs[(r, c)] += v[r] * y;
                    }
                }
            }
            let values = order[..kk].iter().map(|&i| e.eigenvalues[i]).collect();
            if worst > tol * scale && alphas.len() == m && m < dim {
                return Err(Error::NonConvergence { residual: worst, iterations: m });
            }
            return Ok(EigenSystem { values, vectors: vecs, complete: kk == dim });
        }
        if m >= 2000 {
            return Err(Error::NonConvergence { residual: worst, iterations: m });
        }
        m = (2 * m).min(dim);
    }
}

/// Krylov dimension of each short-time exponential step.
const KRYLOV_DIM: usize = 30;

/// `exp(-i H t) psi` by short Lanczos steps with an a-posteriori error bound.
pub fn krylov_evolve(h: &SparseHermitian, psi: &[Complex64], t: f64, tol: f64) -> Result<Vec<Complex64>> {
    let mut v = psi.to_vec();
    let n0 = norm(psi);
    let mut done = 0.0;
    let mut dt = t;
    let mut guard = 0usize;
    while (t - done).abs() > 1e-15 * t.abs().max(1.0) {
        guard += 1;
        if guard > 1_000_000 {
            return Err(Error::NonConvergence { residual: f64::NAN, iterations: guard });
        }
        let step = if t >= 0.0 { dt.min(t - done) } else { dt.max(t - done) };
        let (alphas, betas, vs) = lanczos(h, &v, KRYLOV_DIM.min(h.dim()));
        let k = alphas.len();
        let e = tridiagonal(&alphas, &betas).symmetric_eigen();
        // y = exp(-i T step) e1
        let y: Vec<Complex64> = (0..k)
            .map(|r| {
                (0..k)
                    .map(|n| {
                        e.eigenvectors[(r, n)] * e.eigenvectors[(0, n)] * Complex64::from_polar(1.0, -e.eigenvalues[n] * step)
                    })
                    .sum()
            })
            .collect();
        let err = if k < KRYLOV_DIM.min(h.dim()) { 0.0 } else { betas[k - 1] * y[k - 1].norm() };
        if err > tol && step.abs() > 1e-12 {
            dt = 0.5 * step;
            continue;
        }
        let nv = norm(&v);
        let mut out = vec![ZERO; v.len()];
        for (j, vj) in vs.iter().enumerate().take(k) {
            let c = y[j] * nv;
            out.iter_mut().zip(vj).for_each(|(o, x)| *o += c * x);
        }
        v = out;
        done += step;
        if err < 0.1 * tol {
            dt = 1.5 * step.abs() * t.signum();
        }
    }
    // guard against slow norm drift over many steps
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x *= n0 / nv);
    Ok(v)
}

/// Time-evolution engine bound to one Hamiltonian.
pub enum Propagator {
    Spectral { space: Space, eig: EigenSystem },
    Krylov { h: SparseHermitian },
}

impl Propagator {
    pub fn new(h: &SparseHermitian) -> Result<Self> {
        if h.dim() <= DENSE_LIMIT {
            Ok(Propagator::Spectral { space: h.space, eig: eigendecompose(h)? })
        } else {
            Ok(Propagator::Krylov { h: h.clone() })
        }
    }

    pub fn krylov(h: &SparseHermitian) -> Self {
        Propagator::Krylov { h: h.clone() }
    }

    pub fn space(&self) -> Space {
        match self {
            Propagator::Spectral { space, .. } => *space,
            Propagator::Krylov { h } => h.space,
        }
    }

    /// `psi(t)` for every time in `times`, in order.
    pub fn trajectory(&self, psi0: &StateVector, times: &[f64]) -> Result<Vec<StateVector>> {
        self.space().ensure_eq(&psi0.space)?;
        match self {
            Propagator::Spectral { eig, .. } => {
                let c = eig.coefficients(&psi0.amps);
                Ok(times
                    .par_iter()
                    .map(|&t| {
                        let phased: Vec<Complex64> =
                            c.iter().zip(&eig.values).map(|(c, e)| c * Complex64::from_polar(1.0, -e * t)).collect();
                        let amps = (&eig.vectors * DVector::from_vec(phased)).iter().copied().collect();
                        StateVector { space: psi0.space, amps }
                    })
                    .collect())
            }
            Propagator::Krylov { h } => {
                let mut out = Vec::with_capacity(times.len());
                let mut cur = psi0.amps.clone();
                let mut t_cur = 0.0;
                for &t in times {
                    cur = krylov_evolve(h, &cur, t - t_cur, 1e-13)?;
                    t_cur = t;
                    out.push(StateVector { space: psi0.space, amps: cur.clone() });
                }
                Ok(out)
            }
        }
    }

    pub fn evolve(&self, psi0: &StateVector, t: f64) -> Result<StateVector> {
        Ok(self.trajectory(psi0, &[t])?.pop().expect("one time"))
    }
}

/// `exp(-i H t) psi0`: spectral for dense sizes, Krylov above.
pub fn evolve(h: &SparseHermitian, psi0: &StateVector, t: f64) -> Result<StateVector> {
    h.space.ensure_eq(&psi0.space)?;
    Propagator::new(h)?.evolve(psi0, t)
}

/// Trial-state overlap in the space of squeeze-count classes.
///
/// The closed-form family only depends on the number of squeezes, so the
/// overlap with any state is fixed by the per-class amplitude sums.
#[derive(Clone, Debug)]
pub struct TrialFamily {
    l2: f64,
    counts: Vec<f64>,
}

impl TrialFamily {
    pub fn new(basis: &SqueezedBasis) -> Self {
        let mut counts = vec![0.0; basis.n_registers() + 1];
        for &s in basis.states() {
            counts[s.count_ones() as usize] += 1.0;
        }
        while counts.last() == Some(&0.0) {
            counts.pop();
        }
        Self { l2: basis.geometry.l2, counts }
    }

    /// Class-normalized components `A_s / sqrt(c_s)`.
    pub fn reduce(&self, basis: &SqueezedBasis, psi: &[Complex64]) -> Vec<Complex64> {
        let mut a = vec![ZERO; self.counts.len()];
        for (&s, &x) in basis.states().iter().zip(psi) {
            a[s.count_ones() as usize] += x;
        }
        a.iter_mut().zip(&self.counts).for_each(|(x, &c)| *x /= c.sqrt());
        a
    }

    pub fn lambda(&self, p: MetricParams) -> Complex64 {
        let g = metric_from_params(p);
        let b = 2.0 * std::f64::consts::PI * std::f64::consts::PI / (self.l2 * self.l2 * g.g11);
        // sqrt(V30/V10) = 3 e^{-4b}, arg V21 = 4 b g12
        Complex64::from_polar(3.0 * (-4.0 * b).exp(), 4.0 * b * g.g12)
    }

    fn unit_trial(&self, p: MetricParams) -> Vec<Complex64> {
        let ml = -self.lambda(p);
        let mut pw = Complex64::new(1.0, 0.0);
        let mut t: Vec<Complex64> = self
            .counts
            .iter()
            .map(|&c| {
                let v = pw * c.sqrt();
                pw *= ml;
                v
            })
            .collect();
        let n = norm(&t);
        t.iter_mut().for_each(|x| *x /= n);
        t
    }

    /// `|<trial(p)|psi>|` from reduced components.
    pub fn overlap(&self, reduced: &[Complex64], p: MetricParams) -> f64 {
        dot(&self.unit_trial(p), reduced).norm()
    }

    /// Squared distance of the reduced vector from the trial ray.
    pub fn residual(&self, reduced: &[Complex64], p: MetricParams) -> f64 {
        // the residual never exceeds one, so this walls off the overflow region
        if !(p.q.abs() <= MAX_SEARCH_Q) {
            return 2.0 + p.q.abs().min(1e6);
        }
        let t = self.unit_trial(p);
        let c = dot(&t, reduced);
        reduced.iter().zip(&t).map(|(a, t)| (a - c * t).norm_sqr()).sum()
    }
}

/// Result of maximizing the trial-state overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extraction {
    /// Folded representative (`Q >= 0`).
    pub params: MetricParams,
    /// Signed parameters reached by the local search, used to seed the next time step.
    pub signed: MetricParams,
    pub overlap: f64,
}

impl Extraction {
    pub fn reliable(&self) -> bool {
        self.overlap >= UNRELIABLE_OVERLAP
    }
}

/// Largest `|Q|` visited by the local search.
pub const MAX_SEARCH_Q: f64 = 20.0;

/// Extractions with a smaller overlap are flagged as unreliable.
pub const UNRELIABLE_OVERLAP: f64 = 0.9;
/// Coarse grid resolution per axis.
pub const EXTRACTION_GRID: usize = 64;

/// Search box `[0, 3 Q_post + 0.3]` for the stretch.
pub fn extraction_box(q_post: f64) -> f64 {
    3.0 * q_post.abs() + 0.3
}

fn refine(family: &TrialFamily, reduced: &[Complex64], seed: MetricParams) -> Result<MetricParams> {
    let f = |x: &[f64]| family.residual(reduced, MetricParams::new(x[0], x[1]));
    let m = nelder_mead(&f, &[seed.q, seed.phi], &[0.02, 0.1], 1e-22, 4000)?;
    // polish with a tight simplex around the first optimum
    let m = nelder_mead(&f, &m.x, &[1e-4, 1e-3], 1e-26, 4000)?;
    let best = MetricParams::new(m.x[0], m.x[1]);
    // exactly isotropic states sit at Q = 0 where the angle is arbitrary
    let at_zero = MetricParams::new(0.0, 0.0);
    if f(&[0.0, 0.0]) <= m.value {
        return Ok(at_zero);
    }
    Ok(best)
}

fn grid_search(family: &TrialFamily, reduced: &[Complex64], q_box: f64) -> MetricParams {
    let mut best = (f64::INFINITY, MetricParams::isotropic());
    for i in 0..EXTRACTION_GRID {
        let q = q_box * i as f64 / (EXTRACTION_GRID - 1) as f64;
        for j in 0..EXTRACTION_GRID {
            let p = MetricParams::new(q, TAU * j as f64 / EXTRACTION_GRID as f64);
            let r = family.residual(reduced, p);
            if r < best.0 {
                best = (r, p);
            }
        }
    }
    best.1
}

/// Intrinsic metric of `psi` by maximizing the overlap with the closed-form family.
///
/// Without a seed a `64 × 64` grid over `[0, q_box] × [0, 2π)` picks the
/// starting point; the local search then runs in signed `Q`.
pub fn extract_metric(
    psi: &StateVector,
    basis: &SqueezedBasis,
    family: &TrialFamily,
    q_box: f64,
    seed: Option<MetricParams>,
) -> Result<Extraction> {
    psi.space.ensure_eq(&Space::of_squeezed(basis))?;
    let reduced = family.reduce(basis, &psi.amps);
    let start = match seed {
        Some(s) => s,
        None => grid_search(family, &reduced, q_box),
    };
    let mut signed = refine(family, &reduced, start)?;
    let mut overlap = family.overlap(&reduced, signed);
    if seed.is_some() && overlap < UNRELIABLE_OVERLAP {
        let retry = refine(family, &reduced, grid_search(family, &reduced, q_box))?;
        let ov = family.overlap(&reduced, retry);
        if ov > overlap {
            signed = retry;
            overlap = ov;
        }
    }
    Ok(Extraction { params: signed.folded(), signed, overlap })
}

/// Root fidelity, orbital densities and density correlations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub root_fidelity: f64,
    pub density: Vec<f64>,
    /// `C_ij = -<n_i n_j> + <n_i><n_j>`.
    pub corr: Vec<Vec<f64>>,
}

/// Observables from a probability distribution over orbital occupations.
pub fn observables_from_distribution(probs: &[(Occupation, f64)], root: Occupation, n_orbitals: usize) -> Observables {
    let mut density = vec![0.0; n_orbitals];
    let mut nn = vec![vec![0.0; n_orbitals]; n_orbitals];
    let mut root_fidelity = 0.0;
    for &(occ, p) in probs {
        if p == 0.0 {
            continue;
        }
        if occ == root {
            root_fidelity += p;
        }
        let occupied: Vec<usize> = (0..n_orbitals).filter(|&j| (occ >> j) & 1 == 1).collect();
        for &i in &occupied {
            density[i] += p;
            for &j in &occupied {
                nn[i][j] += p;
            }
        }
    }
    let corr = (0..n_orbitals)
        .map(|i| (0..n_orbitals).map(|j| -nn[i][j] + density[i] * density[j]).collect())
        .collect();
    Observables { root_fidelity, density, corr }
}

/// Observables of a squeezed-basis state over the `N_phi - 2` kept orbitals.
pub fn observables(psi: &StateVector, basis: &SqueezedBasis) -> Result<Observables> {
    psi.space.ensure_eq(&Space::of_squeezed(basis))?;
    let n = basis.geometry.n_electrons;
    let probs: Vec<(Occupation, f64)> = (0..basis.dim()).map(|i| (basis.orbital_image(i), psi.amps[i].norm_sqr())).collect();
    Ok(observables_from_distribution(&probs, crate::basis::root_occupation(n), basis.geometry.n_orbitals()))
}

/// Observables of a Fock-basis state.
pub fn observables_fock(psi: &StateVector, basis: &FockBasis) -> Result<Observables> {
    psi.space.ensure_eq(&Space::of_fock(basis))?;
    let probs: Vec<(Occupation, f64)> = basis.states().iter().zip(&psi.amps).map(|(&o, a)| (o, a.norm_sqr())).collect();
    Ok(observables_from_distribution(&probs, crate::basis::root_occupation(basis.geometry.n_electrons), basis.n_orbitals()))
}

/// Which per-time data to keep besides the metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuenchOptions {
    pub record_density: bool,
    pub record_correlations: bool,
}

impl Default for QuenchOptions {
    fn default() -> Self {
        Self { record_density: true, record_correlations: false }
    }
}

/// Time series produced by a geometric quench.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QuenchTrace {
    pub times: Vec<f64>,
    pub metric: MetricTrace,
    pub overlap_max: Vec<f64>,
    pub root_fidelity: Vec<f64>,
    /// `|<psi(0)|psi(t)>|^2`.
    pub loschmidt: Vec<f64>,
    pub energy: Vec<f64>,
    pub norm: Vec<f64>,
    pub density: Vec<Vec<f64>>,
    pub corr: Vec<Vec<Vec<f64>>>,
    /// `V_{1,0}` of the post-quench metric; the time unit is its inverse.
    pub v10_post: f64,
}

impl QuenchTrace {
    pub fn unreliable_points(&self) -> usize {
        self.overlap_max.iter().filter(|&&o| o < UNRELIABLE_OVERLAP).count()
    }

    pub fn min_root_fidelity(&self) -> f64 {
        self.root_fidelity.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_loschmidt_deficit(&self) -> f64 {
        self.loschmidt.iter().map(|l| 1.0 - l).fold(0.0, f64::max)
    }

    /// CSV `t,Q_tilde,phi_tilde,overlap,root_fidelity`.
    pub fn to_csv(&self) -> String {
        let phi = self.metric.phi_mod();
        let rows: Vec<Vec<f64>> = (0..self.times.len())
            .map(|i| vec![self.times[i], self.metric.q[i], phi[i], self.overlap_max[i], self.root_fidelity[i]])
            .collect();
        crate::io::csv_table(&["t", "Q_tilde", "phi_tilde", "overlap", "root_fidelity"], &rows)
    }
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::InvalidInput("empty time grid".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) || t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("time grid must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Post-quench Hamiltonian in units of its own `V_{1,0}`.
pub fn post_quench_hamiltonian(basis: &SqueezedBasis, g: &MetricTensor) -> Result<(SparseHermitian, f64)> {
    let v10 = Couplings::new(&basis.geometry, g).v10;
    Ok((build_truncated_hamiltonian(basis, g)?.scaled(1.0 / v10), v10))
}

/// Quench the isotropic ground state to `g(q_post, phi_post)` and track it on `t_grid`.
pub fn run_quench(geometry: CylinderGeometry, q_post: f64, phi_post: f64, t_grid: &[f64]) -> Result<QuenchTrace> {
    run_quench_with(geometry, q_post, phi_post, t_grid, QuenchOptions::default())
}

pub fn run_quench_with(
    geometry: CylinderGeometry,
    q_post: f64,
    phi_post: f64,
    t_grid: &[f64],
    opts: QuenchOptions,
) -> Result<QuenchTrace> {
    check_grid(t_grid)?;
    let basis = SqueezedBasis::new(geometry);
    let g_post = metric_from_params(MetricParams::new(q_post, phi_post));
    let psi0 = ground_state_closed_form(&basis, &MetricTensor::identity())?;
    let (h, v10) = post_quench_hamiltonian(&basis, &g_post)?;
    let states = Propagator::new(&h)?.trajectory(&psi0, t_grid)?;
    let family = TrialFamily::new(&basis);
    let q_box = extraction_box(q_post);

    let mut trace = QuenchTrace { times: t_grid.to_vec(), v10_post: v10, ..Default::default() };
    let (mut qs, mut phis) = (Vec::new(), Vec::new());
    let mut seed = None;
    for psi in &states {
        let ex = extract_metric(psi, &basis, &family, q_box, seed)?;
        seed = Some(ex.signed);
        qs.push(ex.params.q);
        phis.push(ex.params.phi);
        trace.overlap_max.push(ex.overlap);
        trace.loschmidt.push(psi0.fidelity(psi)?);
        trace.energy.push(h.expectation(psi)?);
        trace.norm.push(psi.norm());
        let obs = observables(psi, &basis)?;
        trace.root_fidelity.push(obs.root_fidelity);
        if opts.record_density {
            trace.density.push(obs.density);
        }
        if opts.record_correlations {
            trace.corr.push(obs.corr);
        }
    }
    trace.metric = MetricTrace::new(t_grid.to_vec(), qs, phis)?;
    Ok(trace)
}

/// Quenches whose state never moves further than this from its start are degenerate.
pub const TRIVIAL_LOSCHMIDT_DEFICIT: f64 = 1e-4;

/// Bimetric fit of a quench trace, flagging quenches without resolvable dynamics.
pub fn fit_quench(trace: &QuenchTrace) -> Result<BimetricFit> {
    let mut fit = fit_bimetric(&trace.metric)?;
    if fit.degenerate.is_none() && trace.max_loschmidt_deficit() < TRIVIAL_LOSCHMIDT_DEFICIT {
        fit.degenerate = Some(Degeneracy::TrivialDynamics);
    }
    Ok(fit)
}

/// What the spectral weights measure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralKind {
    /// `|<n|∂_Q H|0>|^2` with the derivative taken at the isotropic point.
    #[default]
    Quadrupole,
    /// `|<n|psi_0(pre)>|^2`, the work distribution of the quench.
    WorkDistribution,
}

/// Transition energies (units of `V_{1,0}`) and their weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralLines {
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SpectralLines {
    /// `Σ_n w_n (η/π) / ((ω - ω_n)^2 + η^2)`.
    pub fn broadened(&self, omega: &[f64], eta: f64) -> Vec<f64> {
        omega
            .iter()
            .map(|&w| {
                self.energies
                    .iter()
                    .zip(&self.weights)
                    .map(|(&e, &wt)| wt * (eta / std::f64::consts::PI) / ((w - e).powi(2) + eta * eta))
                    .sum()
            })
            .collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn dominant(&self) -> Option<(f64, f64)> {
        self.energies
            .iter()
            .zip(&self.weights)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(&e, &w)| (e, w))
    }
}

/// Step of the central difference defining the quadrupole operator.
pub const QUADRUPOLE_STEP: f64 = 1e-5;

/// Excitation lines out of the post-quench ground state.
pub fn spectral_lines(geometry: CylinderGeometry, g_post: &MetricTensor, kind: SpectralKind) -> Result<SpectralLines> {
    let basis = SqueezedBasis::new(geometry);
    let (h, v10) = post_quench_hamiltonian(&basis, g_post)?;
    let eig = eigendecompose(&h)?;
    let probe: Vec<Complex64> = match kind {
        SpectralKind::Quadrupole => {
            let hp = build_truncated_hamiltonian(&basis, &metric_from_params(MetricParams::new(QUADRUPOLE_STEP, 0.0)))?;
            let hm = build_truncated_hamiltonian(&basis, &metric_from_params(MetricParams::new(-QUADRUPOLE_STEP, 0.0)))?;
            let op = hp.combine(1.0 / (2.0 * QUADRUPOLE_STEP * v10), &hm, -1.0 / (2.0 * QUADRUPOLE_STEP * v10))?;
            op.apply(&eig.vector(0))
        }
        SpectralKind::WorkDistribution => ground_state_closed_form(&basis, &MetricTensor::identity())?.amps,
    };
    let c = eig.coefficients(&probe);
    let e0 = eig.values[0];
    let (energies, weights) = (1..eig.values.len()).map(|n| (eig.values[n] - e0, c[n].norm_sqr())).unzip();
    Ok(SpectralLines { energies, weights })
}

/// Lorentzian-broadened spectral function on `omega_grid`.
pub fn spectral_function(
    geometry: CylinderGeometry,
    g_post: &MetricTensor,
    omega_grid: &[f64],
    eta: f64,
    kind: SpectralKind,
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("broadening must be positive, got {eta}")));
    }
    Ok(spectral_lines(geometry, g_post, kind)?.broadened(omega_grid, eta))
}

/// The excited state carrying most of the quench weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GravitonEnergy {
    pub e_g: f64,
    pub weight: f64,
    /// All `(energy, weight)` within 1% of the maximum weight, ascending in energy.
    pub candidates: Vec<(f64, f64)>,
    /// Lowest excitation energy above the ground state.
    pub first_gap: f64,
    /// Excitation energies in units of `V_{1,0}` of the post-quench metric.
    pub spectrum: Vec<f64>,
}

pub fn graviton_energy(geometry: CylinderGeometry, g_post: &MetricTensor) -> Result<GravitonEnergy> {
    let lines = spectral_lines(geometry, g_post, SpectralKind::WorkDistribution)?;
    let (_, w_max) = lines.dominant().ok_or(Error::InvalidInput("no excited states".into()))?;
    let mut candidates: Vec<(f64, f64)> = lines
        .energies
        .iter()
        .zip(&lines.weights)
        .filter(|(_, &w)| w >= 0.99 * w_max)
        .map(|(&e, &w)| (e, w))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (e_g, weight) = candidates[0];
    Ok(GravitonEnergy { e_g, weight, candidates, first_gap: lines.energies[0], spectrum: lines.energies })
}

/// Paired metric traces from the full and the truncated model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTraces {
    pub truncated: MetricTrace,
    pub full: MetricTrace,
    pub truncated_overlap: Vec<f64>,
    pub full_overlap: Vec<f64>,
    /// `|<psi_full(0)|psi_trunc(0)>|` of the two pre-quench ground states.
    pub ground_state_overlap: f64,
    pub full_energy: Vec<f64>,
    pub full_momentum: Vec<f64>,
    pub full_norm: Vec<f64>,
}

impl ComparisonTraces {
    pub fn rms_q_difference(&self) -> f64 {
        let n = self.full.q.len() as f64;
        (self.full.q.iter().zip(&self.truncated.q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// CSV `t,Q_full,phi_full,Q_trunc,phi_trunc,overlap_full,overlap_trunc`.
    pub fn to_csv(&self) -> String {
        let (pf, pt) = (self.full.phi_mod(), self.truncated.phi_mod());
        let rows: Vec<Vec<f64>> = (0..self.full.times.len())
            .map(|i| {
                vec![
                    self.full.times[i],
                    self.full.q[i],
                    pf[i],
                    self.truncated.q[i],
                    pt[i],
                    self.full_overlap[i],
                    self.truncated_overlap[i],
                ]
            })
            .collect();
        crate::io::csv_table(&["t", "Q_full", "phi_full", "Q_trunc", "phi_trunc", "overlap_full", "overlap_trunc"], &rows)
    }
}

/// Largest electron number accepted by [`compare_full_truncated`].
pub const MAX_FULL_ELECTRONS: usize = 8;

/// Same quench under the full and the truncated Hamiltonian, each from its own ground state.
///
/// The full-model state is projected on the squeezed images before extraction.
pub fn compare_full_truncated(geometry: CylinderGeometry, q_post: f64, t_grid: &[f64]) -> Result<ComparisonTraces> {
    if geometry.n_electrons > MAX_FULL_ELECTRONS {
        return Err(Error::InvalidInput(format!(
            "full Hamiltonian limited to N <= {MAX_FULL_ELECTRONS}, got {}",
            geometry.n_electrons
        )));
    }
    check_grid(t_grid)?;
    let trunc = run_quench_with(geometry, q_post, 0.0, t_grid, QuenchOptions { record_density: false, record_correlations: false })?;

    let squeezed = SqueezedBasis::new(geometry);
    let fock = FockBasis::new(geometry, Some(0))?;
    let g_post = metric_from_params(MetricParams::new(q_post, 0.0));
    let v10 = Couplings::new(&geometry, &g_post).v10;
    let h_pre = build_full_hamiltonian(&fock, &MetricTensor::identity(), DEFAULT_CUTOFF)?;
    let h_post = build_full_hamiltonian(&fock, &g_post, DEFAULT_CUTOFF)?.scaled(1.0 / v10);
    let ground = eigendecompose(&h_pre)?;
    let psi0 = StateVector::normalized(Space::of_fock(&fock), ground.vector(0))?;
    let trunc0 = crate::hamiltonian::embed_squeezed(&ground_state_closed_form(&squeezed, &MetricTensor::identity())?, &squeezed, &fock)?;
    let ground_state_overlap = psi0.inner(&trunc0)?.norm();

    let states = Propagator::new(&h_post)?.trajectory(&psi0, t_grid)?;
    let family = TrialFamily::new(&squeezed);
    let q_box = extraction_box(q_post);
    let k_labels: Vec<f64> = fock.states().iter().map(|&o| momentum_of(o, &geometry) as f64).collect();
    let (mut qs, mut phis, mut ovs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut energy, mut momentum, mut norms) = (Vec::new(), Vec::new(), Vec::new());
    let mut seed = None;
    for psi in &states {
        let proj = project_to_squeezed(psi, &squeezed, &fock)?;
        let ex = extract_metric(&proj, &squeezed, &family, q_box, seed)?;
        seed = Some(ex.signed);
        qs.push(ex.params.q);
        phis.push(ex.params.phi);
        ovs.push(ex.overlap);
        energy.push(h_post.expectation(psi)?);
        momentum.push(psi.amps.iter().zip(&k_labels).map(|(a, k)| a.norm_sqr() * k).sum());
        norms.push(psi.norm());
    }
    Ok(ComparisonTraces {
        truncated: trunc.metric,
        full: MetricTrace::new(t_grid.to_vec(), qs, phis)?,
        truncated_overlap: trunc.overlap_max,
        full_overlap: ovs,
        ground_state_overlap,
        full_energy: energy,
        full_momentum: momentum,
        full_norm: norms,
    })
}

/// Von Neumann entropy across the cut between registers `cut` and `cut + 1`.
pub fn entanglement_entropy(psi: &StateVector, basis: &SqueezedBasis, cut: usize) -> Result<f64> {
    psi.space.ensure_eq(&Space::of_squeezed(basis))?;
    let n = basis.n_registers();
    if cut > n {
        return Err(Error::InvalidInput(format!("cut {cut} beyond {n} registers")));
    }
    let mask = (1u64 << cut) - 1;
    let mut left: Vec<u64> = basis.states().iter().map(|s| s & mask).collect();
    let mut right: Vec<u64> = basis.states().iter().map(|s| s >> cut).collect();
    left.sort_unstable();
    left.dedup();
    right.sort_unstable();
    right.dedup();
    let mut m = DMatrix::from_element(left.len(), right.len(), ZERO);
    for (&s, &a) in basis.states().iter().zip(&psi.amps) {
        let r = left.binary_search(&(s & mask)).expect("left part present");
        let c = right.binary_search(&(s >> cut)).expect("right part present");
        m[(r, c)] = a;
    }
    let sv = m.singular_values();
    let total: f64 = sv.iter().map(|s| s * s).sum();
    Ok(sv
        .iter()
        .map(|s| s * s / total)
        .filter(|&p| p > 1e-300)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0))
}
