//! Unimodular metrics, bimetric equations of motion and oscillation fits.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::levenberg_marquardt;

/// Stretch `Q` and rotation angle `phi` of a unimodular metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub q: f64,
    pub phi: f64,
}

impl MetricParams {
    pub fn new(q: f64, phi: f64) -> Self {
        Self { q, phi }
    }

    pub fn isotropic() -> Self {
        Self { q: 0.0, phi: 0.0 }
    }

    /// Representative with `q >= 0` and `phi` in `[0, 2π)`.
    pub fn folded(self) -> Self {
        let (q, phi) = fold_branch(self.q, self.phi);
        Self { q, phi }
    }

    pub fn tensor(self) -> MetricTensor {
        metric_from_params(self)
    }
}

/// Symmetric 2x2 metric with unit determinant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTensor {
    pub g11: f64,
    pub g12: f64,
    pub g22: f64,
}

impl MetricTensor {
    pub fn identity() -> Self {
        Self { g11: 1.0, g12: 0.0, g22: 1.0 }
    }

    pub fn det(&self) -> f64 {
        self.g11 * self.g22 - self.g12 * self.g12
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.g11, self.g12, self.g22].iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidMetric("non-finite entry".into()));
        }
        if self.g11 <= 0.0 {
            return Err(Error::InvalidMetric(format!("g11 = {} is not positive", self.g11)));
        }
        let scale = self.g11.max(self.g22).max(1.0);
        if (self.det() - 1.0).abs() > 1e-10 * scale * scale {
            return Err(Error::InvalidMetric(format!("det g = {} differs from 1", self.det())));
        }
        Ok(())
    }
}

/// Map `(Q, phi)` to `g`. `(Q, phi)` and `(-Q, phi + π)` give the same tensor.
pub fn metric_from_params(p: MetricParams) -> MetricTensor {
    let (s, c) = (p.q.sinh(), p.q.cosh());
    MetricTensor {
        g11: c + p.phi.cos() * s,
        g12: p.phi.sin() * s,
        g22: c - p.phi.cos() * s,
    }
}

/// Inverse of [`metric_from_params`] on the `Q >= 0` branch. `phi = 0` at the identity.
pub fn params_from_metric(g: MetricTensor) -> Result<MetricParams> {
    g.validate()?;
    let x = 0.5 * (g.g11 - g.g22);
    let sinh_q = x.hypot(g.g12);
    let q = sinh_q.asinh();
    let phi = if sinh_q == 0.0 { 0.0 } else { g.g12.atan2(x).rem_euclid(TAU) };
    Ok(MetricParams { q, phi })
}

/// Fold a signed stretch into `q >= 0`, `phi` in `[0, 2π)`.
pub fn fold_branch(q: f64, phi: f64) -> (f64, f64) {
    if q < 0.0 {
        (-q, (phi + PI).rem_euclid(TAU))
    } else {
        (q, phi.rem_euclid(TAU))
    }
}

/// Remove `2π` jumps from a sequence of angles.
pub fn unwrap_angles(phi: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(phi.len());
    let mut offset = 0.0f64;
    for (i, &p) in phi.iter().enumerate() {
        if i > 0 {
            let d = p + offset - out[i - 1];
            offset -= TAU * (d / TAU).round();
        }
        out.push(p + offset);
    }
    out
}

/// Bimetric coefficients: anisotropy `A`, frequency scale `Omega`, tuning `gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimetricParams {
    pub a: f64,
    pub omega: f64,
    pub gamma: f64,
}

impl BimetricParams {
    pub fn new(a: f64, omega: f64, gamma: f64) -> Result<Self> {
        if gamma >= 1.0 {
            return Err(Error::InvalidInput(format!("gamma = {gamma} must be below 1 for a gapped phase")));
        }
        if !(omega > 0.0) {
            return Err(Error::InvalidInput(format!("Omega = {omega} must be positive")));
        }
        Ok(Self { a, omega, gamma })
    }

    /// `Omega` chosen so that the gap equals `e_g`.
    pub fn from_gap(a: f64, e_g: f64, gamma: f64) -> Result<Self> {
        Self::new(a, e_g / (2.0 * (1.0 - gamma)), gamma)
    }

    pub fn e_g(&self) -> f64 {
        2.0 * self.omega * (1.0 - self.gamma)
    }
}

/// Below this `|Q|` the right-hand side switches to the linearized limit.
pub const SINGULAR_Q: f64 = 1e-6;

/// Time derivatives `(dQ/dt, dphi/dt)` of the bimetric equations.
///
/// With `allow_series = false` the call fails inside the singular band
/// instead of using the small-`Q` limit `dphi/dt = -E_g/2`.
pub fn bimetric_rhs(q: f64, phi: f64, p: &BimetricParams, allow_series: bool) -> Result<(f64, f64)> {
    let (sa, ca) = (p.a.sinh(), p.a.cosh());
    let (sq, cq) = (q.sinh(), q.cosh());
    let (sp, cp) = phi.sin_cos();
    let f = p.gamma + sa * sq * cp - ca * cq;
    let dq = -2.0 * p.omega * sp * sa * f;
    if q.abs() < SINGULAR_Q {
        if !allow_series {
            return Err(Error::SingularPoint(q));
        }
        return Ok((dq, -0.5 * p.e_g()));
    }
    let dphi = -2.0 * p.omega * (sa * cq * cp - ca * sq) * f / sq;
    Ok((dq, dphi))
}

/// `(Q, phi)` of the linear-regime solution on the given branch (`+1` or `-1`),
/// folded to `Q >= 0`.
pub fn linearized_solution(t: f64, a: f64, e_g: f64, branch: i8) -> (f64, f64) {
    let s = if branch < 0 { -1.0 } else { 1.0 };
    let q = s * 2.0 * a * (0.5 * e_g * t).sin();
    let phi = PI - s * 0.5 * PI - 0.5 * e_g * t;
    fold_branch(q, phi)
}

/// Sampled metric trajectory. `phi` holds the unwrapped angle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub phi: Vec<f64>,
}

impl MetricTrace {
    /// Build from folded samples; the angle is unwrapped.
    pub fn new(times: Vec<f64>, q: Vec<f64>, phi_mod: Vec<f64>) -> Result<Self> {
        if times.len() != q.len() || times.len() != phi_mod.len() {
            return Err(Error::InvalidInput("trace arrays differ in length".into()));
        }
        let phi = unwrap_angles(&phi_mod);
        Ok(Self { times, q, phi })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn phi_mod(&self) -> Vec<f64> {
        self.phi.iter().map(|p| p.rem_euclid(TAU)).collect()
    }

    /// CSV with header `t,Q_tilde,phi_tilde` (angle reduced to `[0, 2π)`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,Q_tilde,phi_tilde\n");
        for ((t, q), p) in self.times.iter().zip(&self.q).zip(self.phi_mod()) {
            s += &format!("{},{},{}\n", crate::io::fmt_g(*t), crate::io::fmt_g(*q), crate::io::fmt_g(p));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty trace".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::Parse(format!("missing column {name}")))
        };
        let (it, iq, ip) = (find("t")?, find("Q_tilde")?, find("phi_tilde")?);
        let (mut t, mut q, mut p) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |i: usize| -> Result<f64> {
                f.get(i)
                    .ok_or_else(|| Error::Parse(format!("short row: {line}")))?
                    .parse()
                    .map_err(|e| Error::Parse(format!("{e} in row {line}")))
            };
            t.push(get(it)?);
            q.push(get(iq)?);
            p.push(get(ip)?);
        }
        Self::new(t, q, p)
    }
}

/// Fixed-step RK4 integration of the bimetric equations on `t_grid`.
///
/// The internal step is `min(grid spacing, 0.01/Omega)`. The integration
/// runs in signed `Q`; output is folded to `Q >= 0`. Starting at `Q0 = 0`
/// the first step follows the linearized solution.
pub fn integrate_bimetric(p: &BimetricParams, q0: f64, phi0: f64, t_grid: &[f64]) -> Result<MetricTrace> {
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("time grid must be strictly increasing".into()));
    }
    let h_max = 0.01 / p.omega;
    let rhs = |y: [f64; 2]| bimetric_rhs(y[0], y[1], p, true);
    let mut y = [q0, phi0];
    let mut t = t_grid.first().copied().unwrap_or(0.0);
    let (mut qs, mut ps) = (Vec::with_capacity(t_grid.len()), Vec::with_capacity(t_grid.len()));
    for &target in t_grid {
        while t < target {
            let h = (target - t).min(h_max);
            if h <= f64::EPSILON * t.abs().max(1.0) {
                if target - t > 1e-12 * t.abs().max(1.0) {
                    return Err(Error::NonFinite(t));
                }
                t = target;
                break;
            }
            if y[0].abs() < SINGULAR_Q && p.a != 0.0 {
                // leave the singular point along the linear-regime solution
                let e = p.e_g();
                let branch = if (y[1].rem_euclid(TAU)) < PI { 1.0 } else { -1.0 };
                y = [y[0] + branch * 2.0 * p.a * (0.5 * e * h).sin(), y[1] - 0.5 * e * h];
                t += h;
                continue;
            }
            let k1 = rhs(y)?;
            let k2 = rhs([y[0] + 0.5 * h * k1.0, y[1] + 0.5 * h * k1.1])?;
            let k3 = rhs([y[0] + 0.5 * h * k2.0, y[1] + 0.5 * h * k2.1])?;
            let k4 = rhs([y[0] + h * k3.0, y[1] + h * k3.1])?;
            y[0] += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            y[1] += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            t += h;
            if !(y[0].is_finite() && y[1].is_finite()) {
                return Err(Error::NonFinite(t));
            }
        }
        let (q, phi) = fold_branch(y[0], y[1]);
        qs.push(q);
        ps.push(phi);
    }
    MetricTrace::new(t_grid.to_vec(), qs, ps)
}

/// Outcome of fitting `Q(t) = 2A |sin(E_g t / 2)|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimetricFit {
    pub a: f64,
    pub e_g: f64,
    /// RMS misfit of `Q(t)`.
    pub residual: f64,
    /// `-2 ×` the fitted slope of the unwrapped angle.
    pub e_g_from_phase: Option<f64>,
    pub converged: bool,
    pub degenerate: Option<Degeneracy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// `Q(t)` vanishes identically, so the frequency is undetermined.
    ZeroAmplitude,
    /// The state barely moves; the oscillation is not resolved.
    TrivialDynamics,
}

/// Amplitudes below this are treated as a vanishing trace.
pub const ZERO_AMPLITUDE: f64 = 1e-9;

fn fft_seed(times: &[f64], q: &[f64]) -> Option<f64> {
    let n = times.len();
    if n < 4 {
        return None;
    }
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    let mean = q.iter().sum::<f64>() / n as f64;
    let m = (8 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = (0..m)
        .map(|i| Complex64::new(if i < n { q[i] - mean } else { 0.0 }, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let (k, _) = buf[1..m / 2]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))?;
    // |sin(E t / 2)| repeats with angular frequency E
    Some(TAU * (k + 1) as f64 / (m as f64 * dt))
}

fn fit_q_model(times: &[f64], q: &[f64], a0: f64, e0: f64) -> (Vec<f64>, f64, bool) {
    let res = |p: &[f64]| {
        let r = DVector::from_iterator(
            times.len(),
            times.iter().zip(q).map(|(&t, &y)| 2.0 * p[0] * (0.5 * p[1] * t).sin().abs() - y),
        );
        let jac = DMatrix::from_fn(times.len(), 2, |i, c| {
            let x = 0.5 * p[1] * times[i];
            let s = x.sin();
            if c == 0 {
                2.0 * s.abs()
            } else {
                p[0] * s.signum() * x.cos() * times[i]
            }
        });
        (r, jac)
    };
    levenberg_marquardt(res, &[a0, e0], 500)
}

fn phase_slope(trace: &MetricTrace, q_floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = trace
        .times
        .iter()
        .zip(&trace.phi)
        .zip(&trace.q)
        .filter(|(_, &q)| q > q_floor)
        .map(|((&t, &p), _)| (t, p))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    // jumps of ±π mark branch switches through Q = 0; remove them
    let mut adj: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    let mut offset = 0.0f64;
    for (i, &(t, p)) in pts.iter().enumerate() {
        if i > 0 {
            let d = p + offset - adj[i - 1].1;
            offset -= PI * (d / PI).round();
        }
        adj.push((t, p + offset));
    }
    let n = adj.len() as f64;
    let mt = adj.iter().map(|p| p.0).sum::<f64>() / n;
    let mp = adj.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = adj.iter().map(|p| (p.0 - mt) * (p.1 - mp)).sum();
    let sxx: f64 = adj.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (sxx > 0.0).then(|| -2.0 * sxy / sxx)
}

/// Least-squares fit of `Q(t)` to `2A |sin(E_g t / 2)|`.
///
/// `E_g` is seeded from the FFT peak of `Q(t)` and `A` from `max Q / 2`;
/// a few frequency multiples of the seed are tried and the best fit kept.
pub fn fit_bimetric(trace: &MetricTrace) -> Result<BimetricFit> {
    if trace.len() < 4 {
        return Err(Error::InvalidInput("need at least 4 samples to fit".into()));
    }
    let q_max = trace.q.iter().cloned().fold(0.0, f64::max);
    if q_max < ZERO_AMPLITUDE {
        return Ok(BimetricFit {
            a: 0.0,
            e_g: f64::NAN,
            residual: (trace.q.iter().map(|q| q * q).sum::<f64>() / trace.len() as f64).sqrt(),
            e_g_from_phase: None,
            converged: true,
            degenerate: Some(Degeneracy::ZeroAmplitude),
        });
    }
    let span = trace.times[trace.len() - 1] - trace.times[0];
    let e_fft = fft_seed(&trace.times, &trace.q).unwrap_or(TAU / span);
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for mult in [1.0, 0.5, 2.0, 0.75, 1.5] {
        let fit = fit_q_model(&trace.times, &trace.q, 0.5 * q_max, mult * e_fft);
        if best.as_ref().is_none_or(|b| fit.1 < b.1) {
            best = Some(fit);
        }
    }
    let (p, cost, converged) = best.expect("at least one start");
    let residual = (cost / trace.len() as f64).sqrt();
    if !(p[0].is_finite() && p[1].is_finite()) {
        return Err(Error::NonConvergence { residual, iterations: 500 });
    }
    // the model is invariant under A -> -A and E -> -E
    Ok(BimetricFit {
        a: p[0].abs(),
        e_g: p[1].abs(),
        residual,
        e_g_from_phase: phase_slope(trace, 0.25 * q_max),
        converged,
        degenerate: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_diagonal_examples() {
        let g = metric_from_params(MetricParams::new(0.0, 1.234));
        assert_eq!(g, MetricTensor::identity());
        let g = metric_from_params(MetricParams::new(0.18, 0.0));
        // exp(Q (2 d d^T - I)) with d = (1, 0)
        assert_abs_diff_eq!(g.g11, 0.18f64.exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(g.g22, (-0.18f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(g.g12, 0.0);
        assert_abs_diff_eq!(g.g11, 1.1972, epsilon = 1e-4);
        assert_abs_diff_eq!(g.g22, 0.8353, epsilon = 1e-4);
    }

    #[test]
    fn identity_inverts_to_zero_angle() {
        let p = params_from_metric(MetricTensor::identity()).unwrap();
        assert_eq!((p.q, p.phi), (0.0, 0.0));
        let p = params_from_metric(MetricTensor { g11: 0.18f64.exp(), g12: 0.0, g22: (-0.18f64).exp() }).unwrap();
        assert_abs_diff_eq!(p.q, 0.18, epsilon = 1e-12);
        assert_abs_diff_eq!(p.phi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_invalid_tensors() {
        assert!(params_from_metric(MetricTensor { g11: 2.0, g12: 0.0, g22: 2.0 }).is_err());
        assert!(params_from_metric(MetricTensor { g11: -1.0, g12: 0.0, g22: -1.0 }).is_err());
    }

    #[test]
    fn unit_determinant_for_many_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let p = MetricParams::new(rng.random_range(-2.0..2.0), rng.random_range(0.0..TAU));
            assert!((metric_from_params(p).det() - 1.0).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn branch_symmetry(q in -3.0f64..3.0, phi in 0.0f64..TAU) {
            let a = metric_from_params(MetricParams::new(q, phi));
            let b = metric_from_params(MetricParams::new(-q, phi + PI));
            prop_assert!((a.g11 - b.g11).abs() < 1e-12);
            prop_assert!((a.g12 - b.g12).abs() < 1e-12);
            prop_assert!((a.g22 - b.g22).abs() < 1e-12);
        }

        #[test]
        fn round_trip(q in 0.0f64..3.0, phi in 0.0f64..TAU) {
            let g = metric_from_params(MetricParams::new(q, phi));
            let back = metric_from_params(params_from_metric(g).unwrap());
            prop_assert!((g.g11 - back.g11).abs() < 1e-10);
            prop_assert!((g.g12 - back.g12).abs() < 1e-10);
            prop_assert!((g.g22 - back.g22).abs() < 1e-10);
        }
    }

    #[test]
    fn rhs_without_anisotropy_keeps_q() {
        let p = BimetricParams::new(0.0, 0.7, 0.1).unwrap();
        for (q, phi) in [(0.3, 0.2), (1.0, 2.0), (0.05, 4.0)] {
            let (dq, _) = bimetric_rhs(q, phi, &p, false).unwrap();
            assert_eq!(dq, 0.0);
        }
    }

    #[test]
    fn rhs_vanishes_at_equilibrium_angle_rate() {
        let p = BimetricParams::new(0.3, 1.0, 0.2).unwrap();
        // sinh A cosh Q = cosh A sinh Q at phi = 0 means Q = A
        let (_, dphi) = bimetric_rhs(0.3, 0.0, &p, false).unwrap();
        assert_abs_diff_eq!(dphi, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn rhs_singular_band() {
        let p = BimetricParams::new(0.1, 1.0, 0.2).unwrap();
        assert!(matches!(bimetric_rhs(1e-8, 0.5, &p, false), Err(Error::SingularPoint(_))));
        let (_, dphi) = bimetric_rhs(1e-8, 0.5, &p, true).unwrap();
        assert_abs_diff_eq!(dphi, -0.5 * p.e_g());
    }

    #[test]
    fn rhs_matches_linearized_derivative() {
        let (a, e) = (0.09, 1.29);
        let p = BimetricParams::from_gap(a, e, 0.3).unwrap();
        for t in [0.4, 0.9, 1.7] {
            let h = 1e-6;
            // signed linear solution on the + branch
            let qf = |t: f64| 2.0 * a * (0.5 * e * t).sin();
            let pf = |t: f64| 0.5 * PI - 0.5 * e * t;
            let dq_fd = (qf(t + h) - qf(t - h)) / (2.0 * h);
            let dp_fd = (pf(t + h) - pf(t - h)) / (2.0 * h);
            let (dq, dp) = bimetric_rhs(qf(t), pf(t), &p, false).unwrap();
            let scale = p.omega;
            assert!((dq - dq_fd).abs() < 4.0 * a * a * scale, "{dq} vs {dq_fd}");
            assert!((dp - dp_fd).abs() < 4.0 * a * scale, "{dp} vs {dp_fd}");
        }
    }

    #[test]
    fn linearized_examples() {
        let (q, _) = linearized_solution(0.0, 0.09, 1.29, 1);
        assert_eq!(q, 0.0);
        let (q, _) = linearized_solution(PI / 1.29, 0.09, 1.29, 1);
        assert_abs_diff_eq!(q, 0.18, epsilon = 1e-14);
        let (q1, p1) = linearized_solution(1.0, 0.09, 1.29, 1);
        let (q2, p2) = linearized_solution(1.0, 0.09, 1.29, -1);
        assert_abs_diff_eq!(q1, q2, epsilon = 1e-15);
        let d = (p1 - p2).rem_euclid(TAU);
        assert!(d.min(TAU - d) < 1e-12);
        let (_, pa) = linearized_solution(1.0, 0.09, 1.29, 1);
        let (_, pb) = linearized_solution(1.2, 0.09, 1.29, 1);
        assert_abs_diff_eq!((pb - pa) / 0.2, -1.29 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn integration_without_anisotropy_stays_put() {
        let p = BimetricParams::new(0.0, 0.8, 0.2).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        let tr = integrate_bimetric(&p, 0.0, 0.0, &grid).unwrap();
        assert!(tr.q.iter().all(|&q| q == 0.0));
        let tr = integrate_bimetric(&p, 0.4, 1.0, &grid).unwrap();
        assert!(tr.q.iter().all(|&q| q == 0.4));
    }

    #[test]
    fn small_anisotropy_tracks_linear_solution() {
        let (a, e) = (0.01, 1.29);
        let p = BimetricParams::from_gap(a, e, 0.3).unwrap();
        let period = TAU / e;
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * period / 200.0).collect();
        let tr = integrate_bimetric(&p, 0.0, 0.5 * PI, &grid).unwrap();
        let max_dev = grid
            .iter()
            .zip(&tr.q)
            .map(|(&t, &q)| (q - linearized_solution(t, a, e, 1).0).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= 0.05 * 2.0 * a, "max deviation {max_dev}");
        let slope = phase_slope(&tr, 0.5 * a).unwrap() / -2.0;
        assert!((slope + 0.5 * e).abs() / (0.5 * e) < 0.02, "slope {slope}");
    }

    #[test]
    fn step_halving_converges() {
        let p = BimetricParams::new(0.2, 1.0, 0.3).unwrap();
        let coarse = integrate_bimetric(&p, 0.1, 0.7, &[0.0, 3.0]).unwrap();
        // grid spacing 0.005 halves the internal step of 0.01
        let grid: Vec<f64> = (0..=600).map(|i| i as f64 * 0.005).collect();
        let fine = integrate_bimetric(&p, 0.1, 0.7, &grid).unwrap();
        assert!((coarse.q[1] - fine.q[600]).abs() <= 1e-6);
        assert!((coarse.phi[1] - fine.phi[600]).abs() <= 1e-6);
    }

    #[test]
    fn fit_recovers_synthetic_linear_trace() {
        let (a, e) = (0.09, 1.29);
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
        let (q, phi): (Vec<f64>, Vec<f64>) = grid.iter().map(|&t| linearized_solution(t, a, e, 1)).unzip();
        let tr = MetricTrace::new(grid, q, phi).unwrap();
        let fit = fit_bimetric(&tr).unwrap();
        assert!((fit.a - a).abs() < 1e-6 && (fit.e_g - e).abs() < 1e-6, "{fit:?}");
        assert!(fit.residual < 1e-9);
        assert!((fit.e_g_from_phase.unwrap() - e).abs() < 1e-6);
    }

    #[test]
    fn fit_flags_zero_trace() {
        let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let tr = MetricTrace::new(grid.clone(), vec![0.0; 50], vec![0.0; 50]).unwrap();
        let fit = fit_bimetric(&tr).unwrap();
        assert_eq!(fit.a, 0.0);
        assert!(fit.e_g.is_nan());
        assert_eq!(fit.degenerate, Some(Degeneracy::ZeroAmplitude));
    }

    #[test]
    fn csv_round_trip() {
        let tr = MetricTrace::new(vec![0.0, 0.5], vec![0.0, 0.1], vec![1.0, 6.0]).unwrap();
        let back = MetricTrace::from_csv(&tr.to_csv()).unwrap();
        assert_eq!(back.times, tr.times);
        assert!(back.q.iter().zip(&tr.q).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(MetricTrace::from_csv("t,Q\n0,1\n").is_err());
    }

    #[test]
    fn unwrap_removes_jumps() {
        let u = unwrap_angles(&[6.0, 0.1, 0.4]);
        assert_abs_diff_eq!(u[1], 0.1 + TAU, epsilon = 1e-12);
    }
}
