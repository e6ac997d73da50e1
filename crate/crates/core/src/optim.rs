//! Derivative-free and least-squares minimizers shared by the fitting,
//! metric-extraction and variational code.
//!
//! Nelder–Mead is delegated to `argmin`; the generalized simulated annealing
//! used for the variational search and the small Levenberg–Marquardt solver
//! used for oscillation fits live here.

use std::cell::Cell;
use std::f64::consts::PI;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Result of a local or global minimization.
#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

struct Objective<'a, F> {
    f: &'a F,
    evals: &'a Cell<usize>,
}

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        self.evals.set(self.evals.get() + 1);
        let v = (self.f)(p);
        Ok(if v.is_finite() { v } else { f64::MAX })
    }
}

/// Nelder–Mead from `x0` with an axis-aligned initial simplex of edge `steps[i]`.
///
/// Stops when the standard deviation of the simplex values drops below
/// `value_tol` or after `max_iters` iterations.
pub fn nelder_mead<F>(f: &F, x0: &[f64], steps: &[f64], value_tol: f64, max_iters: u64) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64,
{
    let mut simplex = vec![x0.to_vec()];
    for (i, s) in steps.iter().enumerate() {
        let mut v = x0.to_vec();
        v[i] += s;
        simplex.push(v);
    }
    let evals = Cell::new(0);
    let solver = NelderMead::new(simplex).with_sd_tolerance(value_tol)?;
    let res = Executor::new(Objective { f, evals: &evals }, solver)
        .configure(|s| s.max_iters(max_iters))
        .run()?;
    let state = res.state();
    let x = state.get_best_param().cloned().unwrap_or_else(|| x0.to_vec());
    Ok(Minimum {
        value: state.get_best_cost(),
        x,
        evaluations: evals.get(),
    })
}

/// Levenberg–Marquardt for small dense problems.
///
/// `residuals(p)` returns the residual vector and its Jacobian (rows = residuals).
/// Returns the parameters, the final sum of squares and whether the relative
/// step criterion was met.
pub fn levenberg_marquardt<F>(residuals: F, p0: &[f64], max_iters: usize) -> (Vec<f64>, f64, bool)
where
    F: Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let mut p = DVector::from_column_slice(p0);
    let (mut r, mut jac) = residuals(p.as_slice());
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    for _ in 0..max_iters {
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                mu *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let (r_new, jac_new) = residuals(trial.as_slice());
            let c_new = r_new.norm_squared();
            if c_new.is_finite() && c_new <= cost {
                let small = step.norm() <= 1e-14 * (1.0 + p.norm());
                p = trial;
                r = r_new;
                jac = jac_new;
                let improvement = cost - c_new;
                cost = c_new;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if small || improvement <= 1e-30 + 1e-15 * cost {
                    return (p.as_slice().to_vec(), cost, true);
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            // no downhill step at any damping: stationary point
            return (p.as_slice().to_vec(), cost, true);
        }
    }
    (p.as_slice().to_vec(), cost, false)
}

/// Schedule constants of the generalized simulated annealing search.
///
/// Visiting parameter `qv`, acceptance parameter `qa`, initial temperature
/// and the restart ratio follow the usual dual-annealing defaults.
#[derive(Clone, Copy, Debug)]
pub struct AnnealingSchedule {
    pub visit: f64,
    pub accept: f64,
    pub initial_temperature: f64,
    pub restart_ratio: f64,
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        Self {
            visit: 2.62,
            accept: -5.0,
            initial_temperature: 5230.0,
            restart_ratio: 2e-5,
        }
    }
}

/// Generalized simulated annealing on a periodic box `[lo_i, lo_i + period_i)`.
///
/// Every coordinate is wrapped back into its period, so the search runs on a
/// torus. Visits follow the Tsallis distorted Cauchy–Lorentz distribution and
/// the temperature decays as `T0 (2^{qv-1} - 1) / ((1 + t)^{qv-1} - 1)`. Each
/// temperature level runs a Markov chain of length `2 dim` (first a full-vector
/// move per step, then single-coordinate moves). The search stops after
/// `budget` objective evaluations.
pub fn anneal<F, R>(
    f: &F,
    lo: &[f64],
    period: &[f64],
    start: Option<&[f64]>,
    budget: usize,
    schedule: AnnealingSchedule,
    rng: &mut R,
) -> Minimum
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let dim = lo.len();
    let qv = schedule.visit;
    let qa = schedule.accept;
    let t0 = schedule.initial_temperature;

    let factor2 = ((4.0 - qv) * (qv - 1.0).ln()).exp();
    let factor3 = ((2.0 - qv) * 2f64.ln() / (qv - 1.0)).exp();
    let factor4_p = PI.sqrt() * factor2 / (factor3 * (3.0 - qv));
    let factor5 = 1.0 / (qv - 1.0) - 0.5;
    let d1 = 2.0 - factor5;
    let factor6 = PI * (1.0 - factor5) / (PI * (1.0 - factor5)).sin() / libm::lgamma(d1).exp();
    let tail = 1e8;

    let wrap = |x: &mut [f64]| {
        for i in 0..dim {
            x[i] = lo[i] + (x[i] - lo[i]).rem_euclid(period[i]);
        }
    };
    let visit = |temperature: f64, rng: &mut R| -> f64 {
        let factor1 = (temperature.ln() / (qv - 1.0)).exp();
        let factor4 = factor4_p * factor1;
        let sigma = (-(qv - 1.0) * (factor6 / factor4).ln() / (3.0 - qv)).exp();
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let den = ((qv - 1.0) * y.abs().ln() / (3.0 - qv)).exp();
        let v = x * sigma / den;
        if v.is_finite() {
            v.clamp(-tail, tail)
        } else {
            tail * x.signum()
        }
    };
    let random_point = |rng: &mut R| -> Vec<f64> {
        (0..dim).map(|i| lo[i] + rng.random::<f64>() * period[i]).collect()
    };

    let mut evals = 0usize;
    let mut current = match start {
        Some(s) => {
            let mut s = s.to_vec();
            wrap(&mut s);
            s
        }
        None => random_point(rng),
    };
    let mut current_e = f(&current);
    evals += 1;
    let mut best = current.clone();
    let mut best_e = current_e;

    let t_qv = 2f64.powf(qv - 1.0) - 1.0;
    let mut step = 0usize;
    while evals < budget {
        let s = step as f64 + 1.0;
        let temperature = t0 * t_qv / ((1.0 + s).powf(qv - 1.0) - 1.0);
        step += 1;
        if temperature < t0 * schedule.restart_ratio {
            current = random_point(rng);
            current_e = f(&current);
            evals += 1;
            step = 0;
            if current_e < best_e {
                best_e = current_e;
                best.clone_from(&current);
            }
            continue;
        }
        let temperature_step = temperature / s;
        for j in 0..2 * dim {
            if evals >= budget {
                break;
            }
            let mut cand = current.clone();
            if j < dim {
                for c in cand.iter_mut() {
                    *c += visit(temperature, rng);
                }
            } else {
                cand[j - dim] += visit(temperature, rng);
            }
            wrap(&mut cand);
            let e = f(&cand);
            evals += 1;
            let accept = if e < current_e {
                true
            } else {
                let p = 1.0 - (1.0 - qa) * (e - current_e) / temperature_step;
                let p = if p <= 0.0 { 0.0 } else { (p.ln() / (1.0 - qa)).exp() };
                rng.random::<f64>() <= p
            };
            if accept {
                current = cand;
                current_e = e;
                if e < best_e {
                    best_e = e;
                    best.clone_from(&current);
                }
            }
        }
    }
    Minimum {
        x: best,
        value: best_e,
        evaluations: evals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.25).powi(2);
        let m = nelder_mead(&f, &[0.0, 0.0], &[0.1, 0.1], 1e-20, 2000).unwrap();
        assert!((m.x[0] - 1.5).abs() < 1e-7, "{:?}", m.x);
        assert!((m.x[1] + 0.25).abs() < 1e-7);
    }

    #[test]
    fn lm_fits_exponential_decay() {
        let ts: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.0 * (-0.7 * t).exp()).collect();
        let res = |p: &[f64]| {
            let r = DVector::from_iterator(ts.len(), ts.iter().zip(&ys).map(|(t, y)| p[0] * (-p[1] * t).exp() - y));
            let j = DMatrix::from_fn(ts.len(), 2, |i, c| {
                let e = (-p[1] * ts[i]).exp();
                if c == 0 { e } else { -p[0] * ts[i] * e }
            });
            (r, j)
        };
        let (p, cost, ok) = levenberg_marquardt(res, &[1.0, 0.3], 200);
        assert!(ok);
        assert!(cost < 1e-20);
        assert!((p[0] - 2.0).abs() < 1e-9 && (p[1] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn annealing_escapes_local_minima_on_torus() {
        // Rastrigin-like landscape with the global minimum at (1, 5).
        let f = |x: &[f64]| {
            let a = x[0] - 1.0;
            let b = x[1] - 5.0;
            2.0 - (3.0 * a).cos() - (3.0 * b).cos() + 0.1 * (a.sin().powi(2) + b.sin().powi(2))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let two_pi = 2.0 * PI;
        let m = anneal(&f, &[0.0, 0.0], &[two_pi, two_pi], None, 4000, AnnealingSchedule::default(), &mut rng);
        assert_eq!(m.evaluations, 4000);
        assert!(m.value < 0.05, "{m:?}");
    }

    #[test]
    fn annealing_is_reproducible() {
        let f = |x: &[f64]| x[0].sin() + x[1].cos();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            anneal(&f, &[0.0, 0.0], &[6.0, 6.0], None, 500, AnnealingSchedule::default(), &mut rng).x
        };
        assert_eq!(run(3), run(3));
    }
}
