//! Unnormalised log-posteriors `ln p̃(w | θ, D)` with gradients and Hessians.
//!
//! A [`LogDensity`] owns the data and the structural choices (basis centres,
//! likelihood family). Conditioning it on a vector of log-hyperparameters
//! yields a [`Conditioned`] density over the weights `w` alone, which caches
//! everything that depends only on `θ` (the feature matrix, for RBF models).
//!
//! Every value includes the prior normalising constant so that derivatives
//! with respect to `ln α` are exact; the evidence `Z` is never included.

mod features;
mod glm;

pub use features::{kmeans, rbf_features, FeatureMap};
pub use glm::{ConjugatePosterior, Design, GlmPosterior, HyperKind, Likelihood};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable unnormalised log-posterior family indexed by hyperparameters.
pub trait LogDensity: Sync {
    /// Number of weights `P`.
    fn dim(&self) -> usize;

    /// Number of continuous hyperparameters (all handled in log space).
    fn hyper_dim(&self) -> usize;

    /// Fixes the hyperparameters, given as logarithms.
    fn condition(&self, log_hyper: &[f64]) -> Result<Box<dyn Conditioned + '_>>;
}

/// `ln p̃(· | θ, D)` at one fixed `θ`.
///
/// Implementations are pure: evaluating twice at the same `w` gives the same bits.
pub trait Conditioned: Sync {
    fn dim(&self) -> usize;

    fn hyper_dim(&self) -> usize;

    fn value(&self, w: &[f64]) -> f64;

    /// Overwrites `grad_w` with `∇_w ln p̃` and `grad_hyper` with the
    /// derivatives with respect to the log-hyperparameters; returns the value.
    fn gradient(&self, w: &[f64], grad_w: &mut [f64], grad_hyper: &mut [f64]) -> f64;

    /// `∇∇_w ln p̃`.
    fn hessian(&self, w: &[f64]) -> DMatrix<f64>;

    /// Evaluates every row of `ws` as a weight vector. When `grads` is given,
    /// row `s` of the two matrices receives the weight and hyperparameter
    /// gradients of sample `s`.
    fn batch(&self, ws: &DMatrix<f64>, grads: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>) -> Vec<f64> {
        let p = self.dim();
        let h = self.hyper_dim();
        let mut w = vec![0.0; p];
        let mut gw = vec![0.0; p];
        let mut gh = vec![0.0; h];
        let mut values = Vec::with_capacity(ws.nrows());
        match grads {
            None => {
                for s in 0..ws.nrows() {
                    for (j, wj) in w.iter_mut().enumerate() {
                        *wj = ws[(s, j)];
                    }
                    values.push(self.value(&w));
                }
            }
            Some((grad_w, grad_hyper)) => {
                for s in 0..ws.nrows() {
                    for (j, wj) in w.iter_mut().enumerate() {
                        *wj = ws[(s, j)];
                    }
                    values.push(self.gradient(&w, &mut gw, &mut gh));
                    for j in 0..p {
                        grad_w[(s, j)] = gw[j];
                    }
                    for j in 0..h {
                        grad_hyper[(s, j)] = gh[j];
                    }
                }
            }
        }
        values
    }
}

impl<T: Conditioned + ?Sized> Conditioned for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn hyper_dim(&self) -> usize {
        (**self).hyper_dim()
    }
    fn value(&self, w: &[f64]) -> f64 {
        (**self).value(w)
    }
    fn gradient(&self, w: &[f64], grad_w: &mut [f64], grad_hyper: &mut [f64]) -> f64 {
        (**self).gradient(w, grad_w, grad_hyper)
    }
    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        (**self).hessian(w)
    }
    fn batch(&self, ws: &DMatrix<f64>, grads: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>) -> Vec<f64> {
        (**self).batch(ws, grads)
    }
}

/// Value, gradients and Hessian of a log-posterior at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Derivatives with respect to the log-hyperparameters (e.g. `∂/∂ln γ`, `∂/∂ln α`).
    pub hyper_gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

pub fn evaluate(model: &dyn LogDensity, w: &[f64], log_hyper: &[f64]) -> Result<Evaluation> {
    if w.len() != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "weight vector has length {}, model expects {}",
            w.len(),
            model.dim()
        )));
    }
    let cond = model.condition(log_hyper)?;
    let mut gw = vec![0.0; cond.dim()];
    let mut gh = vec![0.0; cond.hyper_dim()];
    let value = cond.gradient(w, &mut gw, &mut gh);
    Ok(Evaluation {
        value,
        gradient: DVector::from_vec(gw),
        hyper_gradient: DVector::from_vec(gh),
        hessian: cond.hessian(w),
    })
}

/// Positive continuous hyperparameters in natural units.
///
/// `width` is present for RBF designs and `gamma` for the Cauchy likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl Hyperparameters {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, width: None, gamma: None }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = Some(width);
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")))
            }
        };
        check("alpha", self.alpha)?;
        if let Some(w) = self.width {
            check("width", w)?;
        }
        if let Some(g) = self.gamma {
            check("gamma", g)?;
        }
        Ok(())
    }
}
