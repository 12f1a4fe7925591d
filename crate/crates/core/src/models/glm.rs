//! Generalised linear log-posteriors over a (possibly RBF) design matrix.
//!
//! All four likelihoods share one structure: linear predictors
//! `a_nk = φ_nᵀ w_k`, a per-row log-likelihood `ℓ(a_n; y_n)`, and an
//! isotropic Gaussian prior `N(w | 0, α⁻¹ I_P)`. Gradients, Hessians and
//! `ln width` derivatives follow from the per-row first and second
//! derivatives of `ℓ` through the chain rule.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Conditioned, FeatureMap, Hyperparameters, LogDensity};
use crate::error::{Error, Result};
use crate::util::{log_sum_exp, sigmoid, softplus};

/// Observation model for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    /// Cauchy noise with scale `γ` (a hyperparameter).
    Cauchy,
    /// Binary labels in `{0, 1}` through the logistic sigmoid.
    Bernoulli,
    /// 1-of-K labels through the softmax.
    Softmax { classes: usize },
    /// Gaussian noise with fixed precision `β`; the conjugate test oracle.
    Gaussian { precision: f64 },
}

impl Likelihood {
    /// Number of linear predictors per row.
    pub fn outputs(&self) -> usize {
        match self {
            Likelihood::Softmax { classes } => *classes,
            _ => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Likelihood::Bernoulli | Likelihood::Softmax { .. })
    }
}

/// Where the features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    /// A fixed feature matrix `Φ` (no width hyperparameter).
    Fixed(DMatrix<f64>),
    /// RBF features of raw inputs; the map's width is the default `θ` value only.
    Rbf { inputs: DMatrix<f64>, map: FeatureMap },
}

/// Identity of each entry of the log-hyperparameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperKind {
    Alpha,
    Width,
    Gamma,
}

/// An unnormalised GLM log-posterior: `Σ_n ℓ(Φ_n W; y_n) + Σ ln N(w | 0, α⁻¹I)`.
#[derive(Debug, Clone)]
pub struct GlmPosterior {
    design: Design,
    likelihood: Likelihood,
    /// `N × outputs`: reals, `{0,1}` labels, or one-hot rows.
    targets: DMatrix<f64>,
}

impl GlmPosterior {
    pub fn new(design: Design, likelihood: Likelihood, targets: DMatrix<f64>) -> Result<Self> {
        let rows = match &design {
            Design::Fixed(phi) => {
                if phi.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("feature matrix contains non-finite entries".into()));
                }
                if phi.ncols() == 0 {
                    return Err(Error::InvalidArgument("feature matrix has no columns".into()));
                }
                phi.nrows()
            }
            Design::Rbf { inputs, map } => {
                map.validate()?;
                if inputs.nrows() == 0 {
                    return Err(Error::InvalidArgument("input matrix is empty".into()));
                }
                if inputs.ncols() != map.input_dim() {
                    return Err(Error::InvalidArgument(format!(
                        "inputs have {} columns but centres have {}",
                        inputs.ncols(),
                        map.input_dim()
                    )));
                }
                if inputs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("inputs contain non-finite entries".into()));
                }
                inputs.nrows()
            }
        };
        if targets.nrows() != rows {
            return Err(Error::InvalidArgument(format!(
                "{} target rows for {} input rows",
                targets.nrows(),
                rows
            )));
        }
        if targets.ncols() != likelihood.outputs() {
            return Err(Error::InvalidArgument(format!(
                "targets have {} columns, likelihood expects {}",
                targets.ncols(),
                likelihood.outputs()
            )));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("targets contain non-finite entries".into()));
        }
        match likelihood {
            Likelihood::Bernoulli => {
                if let Some(n) = (0..rows).find(|&n| targets[(n, 0)] != 0.0 && targets[(n, 0)] != 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "binary label {} at row {n} is not in {{0, 1}}",
                        targets[(n, 0)]
                    )));
                }
            }
            Likelihood::Softmax { classes } => {
                if classes < 2 {
                    return Err(Error::InvalidArgument("softmax needs at least two classes".into()));
                }
                for n in 0..rows {
                    let row = targets.row(n);
                    let valid = row.iter().all(|&v| v == 0.0 || v == 1.0) && row.sum() == 1.0;
                    if !valid {
                        return Err(Error::InvalidArgument(format!("row {n} of Y is not a 1-of-K code")));
                    }
                }
            }
            Likelihood::Gaussian { precision } => {
                if !(precision.is_finite() && precision > 0.0) {
                    return Err(Error::InvalidArgument(format!("noise precision must be positive, got {precision}")));
                }
            }
            Likelihood::Cauchy => {}
        }
        Ok(Self { design, likelihood, targets })
    }

    /// Cauchy regression on RBF features.
    pub fn cauchy(inputs: DMatrix<f64>, y: &[f64], map: FeatureMap) -> Result<Self> {
        let t = DMatrix::from_column_slice(y.len(), 1, y);
        Self::new(Design::Rbf { inputs, map }, Likelihood::Cauchy, t)
    }

    /// Binary logistic regression on RBF features; labels in `{0, 1}`.
    pub fn logistic(inputs: DMatrix<f64>, labels: &[f64], map: FeatureMap) -> Result<Self> {
        let t = DMatrix::from_column_slice(labels.len(), 1, labels);
        Self::new(Design::Rbf { inputs, map }, Likelihood::Bernoulli, t)
    }

    /// Softmax regression on RBF features; `onehot` is `N × K`.
    pub fn multiclass(inputs: DMatrix<f64>, onehot: DMatrix<f64>, map: FeatureMap) -> Result<Self> {
        let classes = onehot.ncols();
        Self::new(Design::Rbf { inputs, map }, Likelihood::Softmax { classes }, onehot)
    }

    /// Bayesian linear regression with known noise precision on fixed features.
    pub fn gaussian_linear(features: DMatrix<f64>, y: &[f64], precision: f64) -> Result<Self> {
        let t = DMatrix::from_column_slice(y.len(), 1, y);
        Self::new(Design::Fixed(features), Likelihood::Gaussian { precision }, t)
    }

    /// The same model structure (design kind, centres, likelihood) over other data.
    pub fn with_data(&self, inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        let design = match &self.design {
            Design::Fixed(_) => Design::Fixed(inputs),
            Design::Rbf { map, .. } => Design::Rbf { inputs, map: map.clone() },
        };
        Self::new(design, self.likelihood, targets)
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn rows(&self) -> usize {
        self.targets.nrows()
    }

    /// Feature dimension `D`.
    pub fn feature_dim(&self) -> usize {
        match &self.design {
            Design::Fixed(phi) => phi.ncols(),
            Design::Rbf { map, .. } => map.output_dim(),
        }
    }

    pub fn feature_map(&self) -> Option<&FeatureMap> {
        match &self.design {
            Design::Rbf { map, .. } => Some(map),
            Design::Fixed(_) => None,
        }
    }

    /// Order of the log-hyperparameter vector: `ln α`, then `ln width`
    /// (RBF designs), then `ln γ` (Cauchy).
    pub fn hyper_layout(&self) -> Vec<HyperKind> {
        let mut layout = vec![HyperKind::Alpha];
        if matches!(self.design, Design::Rbf { .. }) {
            layout.push(HyperKind::Width);
        }
        if self.likelihood == Likelihood::Cauchy {
            layout.push(HyperKind::Gamma);
        }
        layout
    }

    pub fn log_hyper(&self, hyper: &Hyperparameters) -> Result<Vec<f64>> {
        hyper.validate()?;
        self.hyper_layout()
            .into_iter()
            .map(|kind| match kind {
                HyperKind::Alpha => Ok(hyper.alpha.ln()),
                HyperKind::Width => hyper
                    .width
                    .map(f64::ln)
                    .ok_or_else(|| Error::InvalidArgument("RBF model needs a width".into())),
                HyperKind::Gamma => hyper
                    .gamma
                    .map(f64::ln)
                    .ok_or_else(|| Error::InvalidArgument("Cauchy model needs gamma".into())),
            })
            .collect()
    }

    pub fn hyperparameters(&self, log_hyper: &[f64]) -> Result<Hyperparameters> {
        let layout = self.hyper_layout();
        if log_hyper.len() != layout.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} log-hyperparameters, got {}",
                layout.len(),
                log_hyper.len()
            )));
        }
        let mut h = Hyperparameters::new(f64::NAN);
        for (kind, v) in layout.iter().zip(log_hyper) {
            match kind {
                HyperKind::Alpha => h.alpha = v.exp(),
                HyperKind::Width => h.width = Some(v.exp()),
                HyperKind::Gamma => h.gamma = Some(v.exp()),
            }
        }
        h.validate()?;
        Ok(h)
    }

    /// Features (and their `ln width` derivative for RBF designs) at the given hyperparameters.
    pub fn features(&self, hyper: &Hyperparameters) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        match &self.design {
            Design::Fixed(phi) => (phi.clone(), None),
            Design::Rbf { inputs, map } => {
                let width = hyper.width.unwrap_or(map.width);
                let (phi, dphi) = map.features_with_derivative(inputs, width);
                (phi, Some(dphi))
            }
        }
    }

    pub fn conditioned(&self, log_hyper: &[f64]) -> Result<ConditionedGlm<'_>> {
        let hyper = self.hyperparameters(log_hyper)?;
        let (phi, dphi) = self.features(&hyper);
        Ok(ConditionedGlm {
            model: self,
            phi_t: phi.transpose(),
            phi,
            dphi_t: dphi.map(|d| d.transpose()),
            alpha: hyper.alpha,
            gamma: hyper.gamma.unwrap_or(1.0),
            gamma_index: self.hyper_layout().iter().position(|k| *k == HyperKind::Gamma),
            width_index: self.hyper_layout().iter().position(|k| *k == HyperKind::Width),
        })
    }

    /// Closed-form posterior and evidence of the Gaussian-likelihood model.
    pub fn conjugate_posterior(&self, log_hyper: &[f64]) -> Result<ConjugatePosterior> {
        let Likelihood::Gaussian { precision } = self.likelihood else {
            return Err(Error::InvalidArgument("closed form exists only for the Gaussian likelihood".into()));
        };
        let hyper = self.hyperparameters(log_hyper)?;
        let (phi, _) = self.features(&hyper);
        let d = phi.ncols();
        let n = phi.nrows();
        let y = self.targets.column(0).into_owned();
        let prec = DMatrix::identity(d, d) * hyper.alpha + phi.transpose() * &phi * precision;
        let chol = prec
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NonFinite("posterior precision is not positive definite".into()))?;
        let covariance = chol.inverse();
        let mean = &covariance * (phi.transpose() * &y) * precision;

        // y ~ N(0, β⁻¹ I + α⁻¹ Φ Φᵀ)
        let marginal_cov = DMatrix::identity(n, n) / precision + &phi * phi.transpose() / hyper.alpha;
        let log_evidence = gaussian_log_density(&y, &DVector::zeros(n), &marginal_cov)?;
        Ok(ConjugatePosterior { mean, covariance, log_evidence, precision })
    }
}

impl LogDensity for GlmPosterior {
    fn dim(&self) -> usize {
        self.feature_dim() * self.likelihood.outputs()
    }

    fn hyper_dim(&self) -> usize {
        self.hyper_layout().len()
    }

    fn condition(&self, log_hyper: &[f64]) -> Result<Box<dyn Conditioned + '_>> {
        Ok(Box::new(self.conditioned(log_hyper)?))
    }
}

/// Exact posterior `N(mean, covariance)` and `ln Z` for the conjugate model.
#[derive(Debug, Clone)]
pub struct ConjugatePosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_evidence: f64,
    pub precision: f64,
}

impl ConjugatePosterior {
    /// `ln ∫ N(y | Φw, β⁻¹I) N(w | mean, covariance) dw` for held-out rows.
    pub fn log_predictive(&self, features: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
        let n = features.nrows();
        let cov = DMatrix::identity(n, n) / self.precision + features * &self.covariance * features.transpose();
        let mean = features * &self.mean;
        gaussian_log_density(&DVector::from_column_slice(y), &mean, &cov)
    }
}

fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if n == 0 {
        return Ok(0.0);
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NonFinite("covariance is not positive definite".into()))?;
    let diff = x - mean;
    let sol = chol.l().solve_lower_triangular(&diff).expect("Cholesky factor is nonsingular");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * (2.0 * PI).ln() + log_det + sol.norm_squared()))
}

/// A GLM posterior at fixed hyperparameters with its features cached.
pub struct ConditionedGlm<'a> {
    model: &'a GlmPosterior,
    phi: DMatrix<f64>,
    phi_t: DMatrix<f64>,
    dphi_t: Option<DMatrix<f64>>,
    alpha: f64,
    gamma: f64,
    gamma_index: Option<usize>,
    width_index: Option<usize>,
}

struct RowDerivs {
    value: f64,
    /// `dℓ/d ln γ` (Cauchy only).
    dlog_gamma: f64,
}

impl ConditionedGlm<'_> {
    pub fn features(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Linear predictors `A_k = W_k Φᵀ`, one `S × N` matrix per output.
    pub fn predictors(&self, ws: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let d = self.phi.ncols();
        (0..self.model.likelihood.outputs())
            .map(|k| ws.columns(k * d, d) * &self.phi_t)
            .collect()
    }

    /// `ℓ(a; y)` for one row, writing `dℓ/da` into `grad` when given.
    fn row(&self, a: &[f64], n: usize, grad: Option<&mut [f64]>) -> RowDerivs {
        let y = &self.model.targets;
        match self.model.likelihood {
            Likelihood::Cauchy => {
                let r = y[(n, 0)] - a[0];
                let g2 = self.gamma * self.gamma;
                let denom = g2 + r * r;
                if let Some(g) = grad {
                    g[0] = 2.0 * r / denom;
                }
                RowDerivs {
                    value: -(PI * self.gamma).ln() - (r / self.gamma).powi(2).ln_1p(),
                    dlog_gamma: (r * r - g2) / denom,
                }
            }
            Likelihood::Bernoulli => {
                let t = y[(n, 0)];
                if let Some(g) = grad {
                    g[0] = t - sigmoid(a[0]);
                }
                RowDerivs { value: t * a[0] - softplus(a[0]), dlog_gamma: 0.0 }
            }
            Likelihood::Softmax { classes } => {
                let lse = log_sum_exp(a);
                let mut value = 0.0;
                for k in 0..classes {
                    value += y[(n, k)] * a[k];
                }
                if let Some(g) = grad {
                    for k in 0..classes {
                        g[k] = y[(n, k)] - (a[k] - lse).exp();
                    }
                }
                RowDerivs { value: value - lse, dlog_gamma: 0.0 }
            }
            Likelihood::Gaussian { precision } => {
                let r = y[(n, 0)] - a[0];
                if let Some(g) = grad {
                    g[0] = precision * r;
                }
                RowDerivs {
                    value: 0.5 * (precision / (2.0 * PI)).ln() - 0.5 * precision * r * r,
                    dlog_gamma: 0.0,
                }
            }
        }
    }

    /// `d²ℓ/da da'` for one row (`outputs × outputs`, row-major).
    fn row_curvature(&self, a: &[f64], n: usize, out: &mut [f64]) {
        match self.model.likelihood {
            Likelihood::Cauchy => {
                let r = self.model.targets[(n, 0)] - a[0];
                let g2 = self.gamma * self.gamma;
                out[0] = 2.0 * (r * r - g2) / (g2 + r * r).powi(2);
            }
            Likelihood::Bernoulli => {
                let s = sigmoid(a[0]);
                out[0] = -s * (1.0 - s);
            }
            Likelihood::Softmax { classes } => {
                let lse = log_sum_exp(a);
                let p: Vec<f64> = a.iter().map(|v| (v - lse).exp()).collect();
                for k in 0..classes {
                    for l in 0..classes {
                        let delta = if k == l { p[k] } else { 0.0 };
                        out[k * classes + l] = -(delta - p[k] * p[l]);
                    }
                }
            }
            Likelihood::Gaussian { precision } => out[0] = -precision,
        }
    }

    /// Per-row log-likelihoods `ℓ(a_{s,n}; y_n)` for every sample (`S × N`).
    pub fn pointwise_log_likelihood(&self, ws: &DMatrix<f64>) -> DMatrix<f64> {
        let preds = self.predictors(ws);
        let outputs = preds.len();
        let n_rows = self.phi.nrows();
        let mut a = vec![0.0; outputs];
        DMatrix::from_fn(ws.nrows(), n_rows, |s, n| {
            for k in 0..outputs {
                a[k] = preds[k][(s, n)];
            }
            self.row(&a, n, None).value
        })
    }

    fn prior_value(&self, sq_norm: f64) -> f64 {
        let p = self.dim() as f64;
        -0.5 * self.alpha * sq_norm + 0.5 * p * (self.alpha / (2.0 * PI)).ln()
    }
}

impl Conditioned for ConditionedGlm<'_> {
    fn dim(&self) -> usize {
        self.phi.ncols() * self.model.likelihood.outputs()
    }

    fn hyper_dim(&self) -> usize {
        self.model.hyper_layout().len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let ws = DMatrix::from_row_slice(1, w.len(), w);
        self.batch(&ws, None)[0]
    }

    fn gradient(&self, w: &[f64], grad_w: &mut [f64], grad_hyper: &mut [f64]) -> f64 {
        let ws = DMatrix::from_row_slice(1, w.len(), w);
        let mut gw = DMatrix::zeros(1, w.len());
        let mut gh = DMatrix::zeros(1, grad_hyper.len());
        let v = self.batch(&ws, Some((&mut gw, &mut gh)))[0];
        grad_w.copy_from_slice(gw.as_slice());
        grad_hyper.copy_from_slice(gh.as_slice());
        v
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let ws = DMatrix::from_row_slice(1, w.len(), w);
        let preds = self.predictors(&ws);
        let outputs = preds.len();
        let d = self.phi.ncols();
        let n_rows = self.phi.nrows();
        let mut curv = vec![0.0; outputs * outputs];
        let mut a = vec![0.0; outputs];
        // weights[k*K + l][n] = d²ℓ_n / da_k da_l
        let mut weights = vec![DVector::zeros(n_rows); outputs * outputs];
        for n in 0..n_rows {
            for k in 0..outputs {
                a[k] = preds[k][(0, n)];
            }
            self.row_curvature(&a, n, &mut curv);
            for (idx, c) in curv.iter().enumerate() {
                weights[idx][n] = *c;
            }
        }
        let p = d * outputs;
        let mut hess = DMatrix::zeros(p, p);
        for k in 0..outputs {
            for l in k..outputs {
                let mut scaled = self.phi.clone();
                for n in 0..n_rows {
                    let c = weights[k * outputs + l][n];
                    scaled.row_mut(n).scale_mut(c);
                }
                let block = &self.phi_t * scaled;
                hess.view_mut((k * d, l * d), (d, d)).copy_from(&block);
                if l != k {
                    hess.view_mut((l * d, k * d), (d, d)).copy_from(&block.transpose());
                }
            }
        }
        for i in 0..p {
            hess[(i, i)] -= self.alpha;
        }
        hess
    }

    fn batch(&self, ws: &DMatrix<f64>, grads: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>) -> Vec<f64> {
        let s_count = ws.nrows();
        let d = self.phi.ncols();
        let outputs = self.model.likelihood.outputs();
        let n_rows = self.phi.nrows();
        let preds = self.predictors(ws);
        let want_grad = grads.is_some();
        let mut resid: Vec<DMatrix<f64>> = if want_grad {
            vec![DMatrix::zeros(s_count, n_rows); outputs]
        } else {
            Vec::new()
        };
        let mut values = vec![0.0; s_count];
        let mut dlog_gamma = vec![0.0; s_count];
        let mut a = vec![0.0; outputs];
        let mut g = vec![0.0; outputs];
        for n in 0..n_rows {
            for s in 0..s_count {
                for k in 0..outputs {
                    a[k] = preds[k][(s, n)];
                }
                let r = self.row(&a, n, want_grad.then_some(&mut g[..]));
                values[s] += r.value;
                dlog_gamma[s] += r.dlog_gamma;
                if want_grad {
                    for k in 0..outputs {
                        resid[k][(s, n)] = g[k];
                    }
                }
            }
        }
        for s in 0..s_count {
            let sq: f64 = ws.row(s).iter().map(|v| v * v).sum();
            values[s] += self.prior_value(sq);
        }
        if let Some((grad_w, grad_hyper)) = grads {
            let p = (d * outputs) as f64;
            for k in 0..outputs {
                let block = &resid[k] * &self.phi;
                grad_w.columns_mut(k * d, d).copy_from(&block);
            }
            *grad_w -= ws * self.alpha;
            grad_hyper.fill(0.0);
            for s in 0..s_count {
                let sq: f64 = ws.row(s).iter().map(|v| v * v).sum();
                grad_hyper[(s, 0)] = 0.5 * p - 0.5 * self.alpha * sq;
            }
            if let (Some(idx), Some(dphi_t)) = (self.width_index, &self.dphi_t) {
                for k in 0..outputs {
                    let b = ws.columns(k * d, d) * dphi_t;
                    for s in 0..s_count {
                        let mut acc = 0.0;
                        for n in 0..n_rows {
                            acc += resid[k][(s, n)] * b[(s, n)];
                        }
                        grad_hyper[(s, idx)] += acc;
                    }
                }
            }
            if let Some(idx) = self.gamma_index {
                for s in 0..s_count {
                    grad_hyper[(s, idx)] = dlog_gamma[s];
                }
            }
        }
        values
    }
}
