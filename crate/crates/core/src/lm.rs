//! Levenberg-Marquardt for small dense least-squares problems.
//!
//! Each step minimizes `‖J·v + r‖² + λ‖D·v‖²` with Marquardt's scaling
//! `D = diag(‖J_c‖)`, solved as a stacked least-squares problem so that `JᵀJ`
//! is never formed. The step gets a geodesic-acceleration correction: the
//! second directional derivative of the residuals along `v` is estimated by
//! finite differences and the same damped system is solved for the
//! curvature term `a`, giving the step `v + a/2` whenever `2‖D·a‖ ≤ α‖D·v‖`.
//! Damping follows the gain ratio of each step (Nielsen's update). After a
//! step whose gain ratio exceeds [`GAUSS_NEWTON_TRUST`], the next iteration
//! first tries the undamped minimum-norm Gauss-Newton step.

use nalgebra::{DMatrix, DVector};

use crate::system::max_norm;

const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-20;

// Finite-difference step for the second directional derivative, and the
// largest accepted ratio of acceleration to velocity.
const GEODESIC_PROBE: f64 = 0.1;
const GEODESIC_RATIO: f64 = 0.75;

const GAUSS_NEWTON_TRUST: f64 = 0.9;

pub(crate) trait LeastSquares {
    fn residual_count(&self) -> usize;
    fn unknowns(&self) -> usize;
    fn residuals(&self, z: &[f64], out: &mut [f64]);
    fn jacobian(&self, z: &[f64], jac: &mut DMatrix<f64>);
    /// Projects a trial point onto the feasible set.
    fn clip(&self, _z: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Settings {
    pub max_iterations: usize,
    pub residual_tolerance: f64,
    pub step_tolerance: f64,
    pub damping_init: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub z: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

struct State {
    z: Vec<f64>,
    r: Vec<f64>,
    cost: f64,
}

pub(crate) fn minimize<S: LeastSquares>(sys: &S, mut z: Vec<f64>, settings: &Settings) -> Outcome {
    let m = sys.residual_count();
    let p = sys.unknowns();
    sys.clip(&mut z);
    let mut r = vec![0.0; m];
    sys.residuals(&z, &mut r);
    let cost = sum_sq(&r);
    let mut iterations = 0;
    if !cost.is_finite() {
        return Outcome {
            z,
            residual_norm: f64::INFINITY,
            iterations,
            converged: false,
        };
    }
    let mut state = State { z, r, cost };

    let mut jac = DMatrix::zeros(m, p);
    let mut stacked = DMatrix::zeros(m + p, p);
    let mut rhs = DVector::zeros(m + p);
    let mut probe = vec![0.0; p];
    let mut r_probe = vec![0.0; m];
    let mut trial = State {
        z: vec![0.0; p],
        r: vec![0.0; m],
        cost: 0.0,
    };

    let mut lambda = settings.damping_init;
    let mut growth = 2.0;
    let mut fresh_jacobian = false;
    let mut last_gain = 0.0;

    let evaluate = |step: &DVector<f64>, from: &State, into: &mut State| {
        for (t, (zi, si)) in into.z.iter_mut().zip(from.z.iter().zip(step.iter())) {
            *t = zi + si;
        }
        sys.clip(&mut into.z);
        sys.residuals(&into.z, &mut into.r);
        into.cost = sum_sq(&into.r);
    };

    while max_norm(&state.r) > settings.residual_tolerance && iterations < settings.max_iterations {
        if !fresh_jacobian {
            sys.jacobian(&state.z, &mut jac);
            fresh_jacobian = true;
        }
        iterations += 1;

        if last_gain > GAUSS_NEWTON_TRUST {
            last_gain = 0.0;
            let svd = jac.clone().svd(true, true);
            let cutoff = svd.singular_values.max() * f64::EPSILON * (m.max(p) as f64);
            let neg_r = DVector::from_iterator(m, state.r.iter().map(|v| -v));
            if let Ok(step) = svd.solve(&neg_r, cutoff) {
                evaluate(&step, &state, &mut trial);
                if trial.cost.is_finite() && trial.cost < state.cost {
                    std::mem::swap(&mut state, &mut trial);
                    fresh_jacobian = false;
                    lambda = (lambda / 3.0).max(MIN_DAMPING);
                    last_gain = 1.0;
                    continue;
                }
            }
        }

        let scale: Vec<f64> = (0..p).map(|c| jac.column(c).norm()).collect();
        let floor = scale.iter().cloned().fold(1.0, f64::max) * 1e-12;
        let scale: Vec<f64> = scale.into_iter().map(|s| s.max(floor)).collect();
        stacked.fill(0.0);
        stacked.view_mut((0, 0), (m, p)).copy_from(&jac);
        let sqrt_lambda = lambda.sqrt();
        for (c, s) in scale.iter().enumerate() {
            stacked[(m + c, c)] = sqrt_lambda * s;
        }
        let svd = stacked.clone().svd(true, true);

        rhs.fill(0.0);
        for (i, v) in state.r.iter().enumerate() {
            rhs[i] = -v;
        }
        let velocity = match svd.solve(&rhs, 0.0) {
            Ok(v) if v.iter().all(|x| x.is_finite()) => v,
            _ => {
                lambda *= growth;
                growth *= 2.0;
                if lambda > MAX_DAMPING {
                    break;
                }
                continue;
            }
        };

        let jv = &jac * &velocity;
        let linearized: f64 = state
            .r
            .iter()
            .zip(jv.iter())
            .map(|(a, b)| (a + b).powi(2))
            .sum();
        let predicted = state.cost - linearized;

        let mut step = velocity.clone();
        for (q, (zi, vi)) in probe.iter_mut().zip(state.z.iter().zip(velocity.iter())) {
            *q = zi + GEODESIC_PROBE * vi;
        }
        sys.residuals(&probe, &mut r_probe);
        rhs.fill(0.0);
        for i in 0..m {
            let second =
                (2.0 / GEODESIC_PROBE) * ((r_probe[i] - state.r[i]) / GEODESIC_PROBE - jv[i]);
            rhs[i] = -second;
        }
        if let Ok(accel) = svd.solve(&rhs, 0.0) {
            let scaled = |v: &DVector<f64>| {
                v.iter()
                    .zip(&scale)
                    .map(|(x, s)| (x * s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            if accel.iter().all(|x| x.is_finite())
                && 2.0 * scaled(&accel) <= GEODESIC_RATIO * scaled(&velocity)
            {
                step.axpy(0.5, &accel, 1.0);
            }
        }

        evaluate(&step, &state, &mut trial);
        let gain = if predicted > 0.0 {
            (state.cost - trial.cost) / predicted
        } else {
            -1.0
        };

        if trial.cost.is_finite() && trial.cost < state.cost && gain > 0.0 {
            let moved = distance(&trial.z, &state.z);
            let size = state.z.iter().map(|v| v * v).sum::<f64>().sqrt();
            std::mem::swap(&mut state, &mut trial);
            fresh_jacobian = false;
            lambda =
                (lambda * (1.0 / 3.0f64).max(1.0 - (2.0 * gain - 1.0).powi(3))).max(MIN_DAMPING);
            growth = 2.0;
            last_gain = gain;
            if moved <= settings.step_tolerance * (size + settings.step_tolerance) {
                break;
            }
        } else {
            last_gain = 0.0;
            lambda *= growth;
            growth *= 2.0;
            if lambda > MAX_DAMPING {
                break;
            }
        }
    }

    let residual_norm = max_norm(&state.r);
    Outcome {
        z: state.z,
        residual_norm,
        iterations,
        converged: residual_norm <= settings.residual_tolerance,
    }
}
