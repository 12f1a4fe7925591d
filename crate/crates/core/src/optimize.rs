//! Scaled conjugate gradients (Møller 1993, as in Netlab's `scg`).
//!
//! SCG avoids line searches: each iteration estimates the curvature along the
//! search direction from one extra gradient evaluation and regulates the step
//! with a Levenberg–Marquardt style scale `λ`. Everything is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Stop once `‖∇f‖_∞` falls to this value.
    pub grad_tol: f64,
    /// Stop once an accepted step changes `f` by at most this fraction of `|f|`.
    pub f_tol: f64,
    /// Record the objective after every accepted step.
    pub trace: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { max_iters: 1000, grad_tol: 1e-6, f_tol: 1e-9, trace: false }
    }
}

impl OptimConfig {
    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.f_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "optimiser tolerances must be positive (grad_tol={}, f_tol={})",
                self.grad_tol, self.f_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// The scale parameter saturated without further progress, which happens
    /// when `f` can no longer be decreased at floating-point resolution.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective at the start and after each accepted step (empty unless tracing).
    pub trace: Vec<f64>,
}

impl Minimum {
    pub fn gradient_norm(&self) -> f64 {
        inf_norm(&self.gradient)
    }
}

const SIGMA0: f64 = 1e-4;
const LAMBDA_MIN: f64 = 1e-15;
const LAMBDA_MAX: f64 = 1e100;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimises `f`, where `f(x, grad)` returns the value and overwrites `grad`.
pub fn minimize<F>(mut f: F, x0: &[f64], config: &OptimConfig) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    config.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut fold = f(&x, &mut grad);
    let mut evaluations = 1;
    if !fold.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("objective is {fold} at the starting point")));
    }
    let mut trace = Vec::new();
    if config.trace {
        trace.push(fold);
    }
    let finish = |x: Vec<f64>, value, gradient, iterations, evaluations, termination, trace| {
        Ok(Minimum { x, value, gradient, iterations, evaluations, termination, trace })
    };
    if n == 0 || inf_norm(&grad) <= config.grad_tol {
        return finish(x, fold, grad, 0, evaluations, Termination::GradientTolerance, trace);
    }

    let mut grad_old = grad.clone();
    let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut gplus = vec![0.0; n];
    let mut gnew = vec![0.0; n];
    let mut xtrial = vec![0.0; n];
    let mut lambda = 1.0;
    let mut success = true;
    let mut successes = 0;
    let mut failures_since_success = 0usize;
    let (mut mu, mut kappa, mut theta) = (0.0, 0.0, 0.0);

    for iter in 1..=config.max_iters {
        if success {
            mu = dot(&d, &grad);
            if mu >= 0.0 {
                for (di, gi) in d.iter_mut().zip(&grad) {
                    *di = -gi;
                }
                mu = dot(&d, &grad);
            }
            kappa = dot(&d, &d);
            if kappa < f64::EPSILON * f64::EPSILON {
                return finish(x, fold, grad, iter - 1, evaluations, Termination::GradientTolerance, trace);
            }
            let sigma = SIGMA0 / kappa.sqrt();
            for i in 0..n {
                xtrial[i] = x[i] + sigma * d[i];
            }
            let fp = f(&xtrial, &mut gplus);
            evaluations += 1;
            theta = if fp.is_finite() && gplus.iter().all(|g| g.is_finite()) {
                d.iter().zip(gplus.iter().zip(&grad)).map(|(di, (gp, g))| di * (gp - g)).sum::<f64>() / sigma
            } else {
                0.0
            };
        }

        let mut delta = theta + lambda * kappa;
        if delta <= 0.0 {
            delta = lambda * kappa;
            lambda -= theta / kappa;
        }
        let alpha = -mu / delta;
        for i in 0..n {
            xtrial[i] = x[i] + alpha * d[i];
        }
        let fnew = f(&xtrial, &mut gnew);
        evaluations += 1;
        let finite = fnew.is_finite() && gnew.iter().all(|g| g.is_finite());
        let comparison = if finite { 2.0 * (fnew - fold) / (alpha * mu) } else { f64::NEG_INFINITY };

        success = comparison >= 0.0;
        if success {
            failures_since_success = 0;
            successes += 1;
            std::mem::swap(&mut x, &mut xtrial);
            grad_old.copy_from_slice(&grad);
            grad.copy_from_slice(&gnew);
            let change = (fold - fnew).abs();
            let scale = fold.abs().max(fnew.abs());
            fold = fnew;
            if config.trace {
                trace.push(fold);
            }
            if inf_norm(&grad) <= config.grad_tol {
                return finish(x, fold, grad, iter, evaluations, Termination::GradientTolerance, trace);
            }
            if change <= config.f_tol * scale {
                return finish(x, fold, grad, iter, evaluations, Termination::FunctionTolerance, trace);
            }
        } else {
            failures_since_success += 1;
        }

        if comparison < 0.25 {
            lambda = (4.0 * lambda).min(LAMBDA_MAX);
        }
        if comparison > 0.75 {
            lambda = (0.5 * lambda).max(LAMBDA_MIN);
        }
        if lambda >= LAMBDA_MAX {
            if !finite && failures_since_success > 1 {
                return Err(Error::Optimisation(format!(
                    "objective stayed non-finite along the search direction after {iter} iterations (last finite value {fold})"
                )));
            }
            return finish(x, fold, grad, iter, evaluations, Termination::Stalled, trace);
        }

        if successes == n {
            for (di, gi) in d.iter_mut().zip(&grad) {
                *di = -gi;
            }
            successes = 0;
        } else if success {
            let beta = (dot(&grad_old, &grad) - dot(&grad, &grad)) / mu;
            for (di, gi) in d.iter_mut().zip(&grad) {
                *di = beta * *di - gi;
            }
        }
    }
    finish(x, fold, grad, config.max_iters, evaluations, Termination::MaxIterations, trace)
}

/// Maximises `f` by minimising `−f`; the returned value and gradient refer to `f`.
pub fn maximize<F>(mut f: F, x0: &[f64], config: &OptimConfig) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut result = minimize(
        |x, g| {
            let v = f(x, g);
            for gi in g.iter_mut() {
                *gi = -*gi;
            }
            -v
        },
        x0,
        config,
    )?;
    result.value = -result.value;
    for g in &mut result.gradient {
        *g = -*g;
    }
    for t in &mut result.trace {
        *t = -*t;
    }
    Ok(result)
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("objective is not finite near coordinate {i}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}
