//! Laplace-seeded Gaussian families and their fixed-sample lower bounds.
//!
//! Each family writes posterior draws as `w_s = μ + C z_s` where the root `C`
//! is built from the Laplace decompositions:
//!
//! | family    | root            | free parameters |
//! |-----------|-----------------|-----------------|
//! | `MviMu`   | `C_LA`          | `μ`             |
//! | `MviEig`  | `Q_LA diag(r)`  | `μ, r`          |
//! | `MviLr`   | `C_LA + U Vᵀ`   | `μ, U, V`       |
//! | `ViDiag`  | `diag(σ)`       | `μ, σ`          |
//!
//! The draws `z_s` are frozen in a [`FixedSampleSet`], which turns the Monte
//! Carlo bound into a deterministic function that a batch optimiser can
//! maximise. Positive vectors (`r`, `σ`) are parameterised by their logs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::LaplaceResult;
use crate::models::LogDensity;
use crate::optimize::{maximize, OptimConfig, Termination};
use crate::util::{rng_from_seed, standard_normal};

/// Rows evaluated per batch call; also the unit of the fixed reduction order.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MviMu,
    MviEig,
    MviLr,
    ViDiag,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::MviMu, Family::MviEig, Family::MviLr, Family::ViDiag];

    pub fn name(&self) -> &'static str {
        match self {
            Family::MviMu => "mvi_mu",
            Family::MviEig => "mvi_eig",
            Family::MviLr => "mvi_lr",
            Family::ViDiag => "vi_diag",
        }
    }

    /// Number of free distribution parameters (hyperparameters excluded).
    pub fn parameter_count(&self, p: usize) -> usize {
        match self {
            Family::MviMu => p,
            Family::MviEig | Family::ViDiag => 2 * p,
            Family::MviLr => 3 * p,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown family '{s}'")))
    }
}

/// How the standard-normal draws are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleScheme {
    /// Independent draws.
    #[default]
    Iid,
    /// Pairs `(z, −z)`; the sample mean is exactly zero.
    Antithetic,
    /// Antithetic pairs whitened so the sample covariance is exactly `I`,
    /// which makes the bound exact for quadratic log-densities.
    MomentMatched,
}

/// `S × P` standard-normal draws frozen for a whole optimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedSampleSet {
    z: DMatrix<f64>,
    seed: u64,
    scheme: SampleScheme,
}

impl FixedSampleSet {
    pub fn draw(count: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::draw_with(count, dim, seed, SampleScheme::Iid)
    }

    pub fn draw_with(count: usize, dim: usize, seed: u64, scheme: SampleScheme) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let mut rng = rng_from_seed(seed);
        // Rows are drawn sample by sample so that a prefix of columns does not
        // depend on the total dimension.
        let z = match scheme {
            SampleScheme::Iid => DMatrix::from_row_iterator(
                count,
                dim,
                (0..count * dim).map(|_| standard_normal(&mut rng)),
            ),
            SampleScheme::Antithetic | SampleScheme::MomentMatched => {
                if !count.is_multiple_of(2) {
                    return Err(Error::InvalidArgument(format!(
                        "antithetic sampling needs an even sample count, got {count}"
                    )));
                }
                let half = count / 2;
                let base: DMatrix<f64> = DMatrix::from_row_iterator(
                    half,
                    dim,
                    (0..half * dim).map(|_| standard_normal(&mut rng)),
                );
                let mut z = DMatrix::zeros(count, dim);
                z.rows_mut(0, half).copy_from(&base);
                z.rows_mut(half, half).copy_from(&(-base));
                if scheme == SampleScheme::MomentMatched && dim > 0 {
                    let cov = z.transpose() * &z / count as f64;
                    let chol = cov.cholesky().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "{count} samples cannot be whitened in {dim} dimensions"
                        ))
                    })?;
                    // Z L^-T has sample covariance L^-1 (Z'Z/S) L^-T = I.
                    let zt = chol.l().solve_lower_triangular(&z.transpose()).expect("nonsingular factor");
                    z = zt.transpose();
                }
                z
            }
        };
        Ok(Self { z, seed, scheme })
    }

    /// The first `dim` columns, sharing the same seed.
    pub fn leading_columns(&self, dim: usize) -> Result<Self> {
        if dim > self.dim() {
            return Err(Error::InvalidArgument(format!(
                "sample set has {} columns, {dim} requested",
                self.dim()
            )));
        }
        Ok(Self { z: self.z.columns(0, dim).into_owned(), seed: self.seed, scheme: self.scheme })
    }

    pub fn from_matrix(z: DMatrix<f64>) -> Self {
        Self { z, seed: 0, scheme: SampleScheme::Iid }
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn count(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scheme(&self) -> SampleScheme {
        self.scheme
    }
}

/// Family-specific free parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Shape {
    MviMu,
    MviEig {
        #[serde(with = "crate::serde_matrix::vector")]
        log_r: DVector<f64>,
    },
    MviLr {
        #[serde(with = "crate::serde_matrix::vector")]
        u: DVector<f64>,
        #[serde(with = "crate::serde_matrix::vector")]
        v: DVector<f64>,
    },
    ViDiag {
        #[serde(with = "crate::serde_matrix::vector")]
        log_sigma: DVector<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    #[serde(with = "crate::serde_matrix::vector")]
    pub mu: DVector<f64>,
    pub shape: Shape,
    pub log_hyper: Vec<f64>,
}

/// Initial standard deviation for the diagonal baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagInit {
    /// `σ² = diag(Σ_LA)`.
    Laplace,
    /// `σ² = 10⁻⁴` everywhere.
    Small,
}

impl VariationalParams {
    pub fn family(&self) -> Family {
        match self.shape {
            Shape::MviMu => Family::MviMu,
            Shape::MviEig { .. } => Family::MviEig,
            Shape::MviLr { .. } => Family::MviLr,
            Shape::ViDiag { .. } => Family::ViDiag,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Free parameters as one vector: `μ`, the shape block, then `ln θ` when learned.
    pub fn pack(&self, learn_hyper: bool) -> Vec<f64> {
        let mut x: Vec<f64> = self.mu.iter().copied().collect();
        match &self.shape {
            Shape::MviMu => {}
            Shape::MviEig { log_r } => x.extend(log_r.iter()),
            Shape::MviLr { u, v } => {
                x.extend(u.iter());
                x.extend(v.iter());
            }
            Shape::ViDiag { log_sigma } => x.extend(log_sigma.iter()),
        }
        if learn_hyper {
            x.extend(&self.log_hyper);
        }
        x
    }

    /// Inverse of [`pack`](Self::pack), keeping `self`'s family and (if not learned) `θ`.
    pub fn unpack(&self, x: &[f64], learn_hyper: bool) -> Result<Self> {
        let p = self.dim();
        let expected = self.family().parameter_count(p) + if learn_hyper { self.log_hyper.len() } else { 0 };
        if x.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "packed vector has length {}, expected {expected}",
                x.len()
            )));
        }
        let block = |i: usize| DVector::from_column_slice(&x[i * p..(i + 1) * p]);
        let shape = match self.shape {
            Shape::MviMu => Shape::MviMu,
            Shape::MviEig { .. } => Shape::MviEig { log_r: block(1) },
            Shape::MviLr { .. } => Shape::MviLr { u: block(1), v: block(2) },
            Shape::ViDiag { .. } => Shape::ViDiag { log_sigma: block(1) },
        };
        let used = self.family().parameter_count(p);
        let log_hyper = if learn_hyper { x[used..].to_vec() } else { self.log_hyper.clone() };
        Ok(Self { mu: block(0), shape, log_hyper })
    }
}

/// Starting point of each family: `μ = μ_LA`, `θ = θ_LA`, `r = r_LA`,
/// `U, V ~ N(0, 0.01 I)` and `σ` per `diag_init`.
pub fn initialise(family: Family, laplace: &LaplaceResult, seed: u64, diag_init: DiagInit) -> VariationalParams {
    let p = laplace.dim();
    let shape = match family {
        Family::MviMu => Shape::MviMu,
        Family::MviEig => Shape::MviEig { log_r: laplace.eigen_scales.map(f64::ln) },
        Family::MviLr => {
            let mut rng = rng_from_seed(seed);
            let mut draw = || DVector::from_fn(p, |_, _| 0.1 * standard_normal(&mut rng));
            let u = draw();
            let v = draw();
            Shape::MviLr { u, v }
        }
        Family::ViDiag => {
            let log_sigma = match diag_init {
                DiagInit::Laplace => laplace.covariance.diagonal().map(|s| 0.5 * s.ln()),
                DiagInit::Small => DVector::from_element(p, 0.5 * 1e-4f64.ln()),
            };
            Shape::ViDiag { log_sigma }
        }
    };
    VariationalParams { mu: laplace.mode.clone(), shape, log_hyper: laplace.log_hyper.clone() }
}

/// A Gaussian `N(mean, root rootᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGaussian {
    #[serde(with = "crate::serde_matrix::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub root: DMatrix<f64>,
}

impl PosteriorGaussian {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.root * self.root.transpose()
    }

    /// `w_s = mean + root z_s` for every row of `z`.
    pub fn transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut w = z * self.root.transpose();
        for mut row in w.row_iter_mut() {
            row += self.mean.transpose();
        }
        w
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn covariance_root(params: &VariationalParams, laplace: &LaplaceResult) -> PosteriorGaussian {
    let root = match &params.shape {
        Shape::MviMu => laplace.cholesky.clone(),
        Shape::MviEig { log_r } => {
            let mut q = laplace.eigenvectors.clone();
            for (mut col, lr) in q.column_iter_mut().zip(log_r.iter()) {
                col *= lr.exp();
            }
            q
        }
        Shape::MviLr { u, v } => &laplace.cholesky + u * v.transpose(),
        Shape::ViDiag { log_sigma } => DMatrix::from_diagonal(&log_sigma.map(f64::exp)),
    };
    PosteriorGaussian { mean: params.mu.clone(), root }
}

fn lr_terms(laplace: &LaplaceResult, u: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let c_inv_u = laplace
        .cholesky
        .solve_lower_triangular(u)
        .ok_or_else(|| Error::NonFinite("Laplace Cholesky factor is singular".into()))?;
    let kappa = 1.0 + v.dot(&c_inv_u);
    if !(kappa.abs() >= 1e-12) {
        return Err(Error::SingularRoot(kappa.abs()));
    }
    Ok((c_inv_u, kappa))
}

/// Differential entropy of the family's Gaussian.
pub fn entropy(params: &VariationalParams, laplace: &LaplaceResult) -> Result<f64> {
    let p = params.dim() as f64;
    let base = 0.5 * p * (2.0 * PI * std::f64::consts::E).ln();
    let log_det_c: f64 = laplace.cholesky.diagonal().iter().map(|d| d.abs().ln()).sum();
    Ok(base
        + match &params.shape {
            Shape::MviMu => log_det_c,
            Shape::MviEig { log_r } => log_r.sum(),
            Shape::ViDiag { log_sigma } => log_sigma.sum(),
            Shape::MviLr { u, v } => {
                // det(C + UVᵀ) = det(C) (1 + Vᵀ C⁻¹ U)
                let (_, kappa) = lr_terms(laplace, u, v)?;
                log_det_c + kappa.abs().ln()
            }
        })
}

/// The fixed-sample bound `(1/S) Σ_s ln p̃(μ + C z_s | θ) + H[q]`.
pub fn elbo_estimate(
    params: &VariationalParams,
    samples: &FixedSampleSet,
    model: &dyn LogDensity,
    laplace: &LaplaceResult,
) -> Result<f64> {
    Ok(evaluate_bound(params, samples, model, laplace, None)?.0)
}

/// The bound and its gradient with respect to `params.pack(learn_hyper)`.
pub fn elbo_gradient(
    params: &VariationalParams,
    samples: &FixedSampleSet,
    model: &dyn LogDensity,
    laplace: &LaplaceResult,
    learn_hyper: bool,
) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = evaluate_bound(params, samples, model, laplace, Some(learn_hyper))?;
    Ok((value, grad.expect("gradient requested")))
}

/// Per-sample log-density terms `ln p̃(w_s | θ)`; useful for standard errors.
pub fn sample_terms(
    params: &VariationalParams,
    samples: &FixedSampleSet,
    model: &dyn LogDensity,
    laplace: &LaplaceResult,
) -> Result<Vec<f64>> {
    check_dims(params, samples, model, laplace)?;
    let q = covariance_root(params, laplace);
    let cond = model.condition(&params.log_hyper)?;
    let w = q.transform(samples.z());
    Ok(cond.batch(&w, None))
}

fn check_dims(
    params: &VariationalParams,
    samples: &FixedSampleSet,
    model: &dyn LogDensity,
    laplace: &LaplaceResult,
) -> Result<()> {
    let p = model.dim();
    if params.dim() != p || samples.dim() != p || laplace.dim() != p {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: model {p}, params {}, samples {}, Laplace {}",
            params.dim(),
            samples.dim(),
            laplace.dim()
        )));
    }
    if params.log_hyper.len() != model.hyper_dim() {
        return Err(Error::InvalidArgument(format!(
            "model has {} hyperparameters, params carry {}",
            model.hyper_dim(),
            params.log_hyper.len()
        )));
    }
    Ok(())
}

struct ChunkSums {
    value: f64,
    grad: Vec<f64>,
}

fn evaluate_bound(
    params: &VariationalParams,
    samples: &FixedSampleSet,
    model: &dyn LogDensity,
    laplace: &LaplaceResult,
    gradient: Option<bool>,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_dims(params, samples, model, laplace)?;
    let p = params.dim();
    let h = model.hyper_dim();
    let s_total = samples.count();
    let family = params.family();
    let q = covariance_root(params, laplace);
    let entropy_value = entropy(params, laplace)?;
    let cond = model.condition(&params.log_hyper)?;
    let z = samples.z();
    let shape_len = family.parameter_count(p) - p;
    let grad_len = family.parameter_count(p) + h;

    let chunks: Vec<usize> = (0..s_total).step_by(CHUNK).collect();
    let partials: Vec<Result<ChunkSums>> = chunks
        .par_iter()
        .map(|&start| {
            let rows = CHUNK.min(s_total - start);
            let zc = z.rows(start, rows).into_owned();
            let wc = q.transform(&zc);
            let mut sums = ChunkSums { value: 0.0, grad: vec![0.0; if gradient.is_some() { grad_len } else { 0 }] };
            let values = if gradient.is_some() {
                let mut gw = DMatrix::zeros(rows, p);
                let mut gh = DMatrix::zeros(rows, h);
                let values = cond.batch(&wc, Some((&mut gw, &mut gh)));
                chunk_gradient(&params.shape, laplace, &zc, &gw, &gh, &mut sums.grad, p, shape_len);
                values
            } else {
                cond.batch(&wc, None)
            };
            for (i, v) in values.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("log-density is {v} at sample {}", start + i)));
                }
                sums.value += v;
            }
            Ok(sums)
        })
        .collect();

    let mut value = 0.0;
    let mut grad = vec![0.0; if gradient.is_some() { grad_len } else { 0 }];
    for part in partials {
        let part = part?;
        value += part.value;
        for (g, pg) in grad.iter_mut().zip(&part.grad) {
            *g += pg;
        }
    }
    let inv_s = 1.0 / s_total as f64;
    value = value * inv_s + entropy_value;

    let Some(learn_hyper) = gradient else {
        return Ok((value, None));
    };
    for g in grad.iter_mut() {
        *g *= inv_s;
    }
    // chain rule to log scales plus entropy gradients
    match &params.shape {
        Shape::MviMu => {}
        Shape::MviEig { log_r } => {
            for d in 0..p {
                grad[p + d] = grad[p + d] * log_r[d].exp() + 1.0;
            }
        }
        Shape::ViDiag { log_sigma } => {
            for d in 0..p {
                grad[p + d] = grad[p + d] * log_sigma[d].exp() + 1.0;
            }
        }
        Shape::MviLr { u, v } => {
            let (c_inv_u, kappa) = lr_terms(laplace, u, v)?;
            let c_inv_t_v = laplace
                .cholesky
                .transpose()
                .solve_upper_triangular(v)
                .ok_or_else(|| Error::NonFinite("Laplace Cholesky factor is singular".into()))?;
            for d in 0..p {
                grad[p + d] += c_inv_t_v[d] / kappa;
                grad[2 * p + d] += c_inv_u[d] / kappa;
            }
        }
    }
    if !learn_hyper {
        grad.truncate(family.parameter_count(p));
    }
    Ok((value, Some(grad)))
}

/// Adds one chunk's sums `Σ_s ∂ ln p̃(w_s)/∂(params)` (before log-scale chain rule).
#[allow(clippy::too_many_arguments)]
fn chunk_gradient(
    shape: &Shape,
    laplace: &LaplaceResult,
    z: &DMatrix<f64>,
    gw: &DMatrix<f64>,
    gh: &DMatrix<f64>,
    out: &mut [f64],
    p: usize,
    shape_len: usize,
) {
    for d in 0..p {
        out[d] += gw.column(d).sum();
    }
    match shape {
        Shape::MviMu => {}
        Shape::MviEig { .. } => {
            // ∂/∂r_d = Σ_s (Qᵀ g_s)_d z_sd
            let gq = gw * &laplace.eigenvectors;
            for d in 0..p {
                out[p + d] += gq.column(d).dot(&z.column(d));
            }
        }
        Shape::ViDiag { .. } => {
            for d in 0..p {
                out[p + d] += gw.column(d).dot(&z.column(d));
            }
        }
        Shape::MviLr { u, v } => {
            // ∂/∂U = Σ_s g_s (Vᵀ z_s),  ∂/∂V = Σ_s z_s (Uᵀ g_s)
            let zv = z * v;
            let gu = gw * u;
            let du = gw.transpose() * zv;
            let dv = z.transpose() * gu;
            for d in 0..p {
                out[p + d] += du[d];
                out[2 * p + d] += dv[d];
            }
        }
    }
    let offset = p + shape_len;
    for j in 0..gh.ncols() {
        out[offset + j] += gh.column(j).sum();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub optim: OptimConfig,
    /// Optimise the continuous hyperparameters jointly with the distribution.
    pub learn_hyper: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { optim: OptimConfig::default().with_max_iters(2000), learn_hyper: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: VariationalParams,
    pub elbo: f64,
    pub iterations: usize,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

/// Maximises the fixed-sample bound from `init`.
pub fn fit(
    model: &dyn LogDensity,
    laplace: &LaplaceResult,
    init: &VariationalParams,
    samples: &FixedSampleSet,
    config: &FitConfig,
) -> Result<FitResult> {
    check_dims(init, samples, model, laplace)?;
    let x0 = init.pack(config.learn_hyper);
    // Invalid regions (singular roots, non-finite samples) read as -∞ so the
    // optimiser rejects the step instead of aborting.
    let objective = |x: &[f64], g: &mut [f64]| -> f64 {
        let attempt = init
            .unpack(x, config.learn_hyper)
            .and_then(|params| elbo_gradient(&params, samples, model, laplace, config.learn_hyper));
        match attempt {
            Ok((value, grad)) => {
                g.copy_from_slice(&grad);
                value
            }
            Err(_) => {
                g.fill(0.0);
                f64::NEG_INFINITY
            }
        }
    };
    let result = maximize(objective, &x0, &config.optim)?;
    let params = init.unpack(&result.x, config.learn_hyper)?;
    Ok(FitResult {
        params,
        elbo: result.value,
        iterations: result.iterations,
        termination: result.termination,
        trace: result.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_samples() {
        let a = FixedSampleSet::draw(20, 3, 5).unwrap();
        let b = FixedSampleSet::draw(20, 3, 5).unwrap();
        let c = FixedSampleSet::draw(20, 3, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z(), c.z());
    }

    #[test]
    fn prefix_columns_do_not_depend_on_width() {
        let wide = FixedSampleSet::draw(10, 5, 1).unwrap();
        let narrow = wide.leading_columns(2).unwrap();
        assert_eq!(narrow.z(), &wide.z().columns(0, 2).into_owned());
    }

    #[test]
    fn large_sample_variance_is_close_to_one() {
        let s = FixedSampleSet::draw(10_000, 1, 17).unwrap();
        let col = s.z().column(0);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9999.0;
        assert!((0.94..=1.06).contains(&var), "variance {var}");
    }

    #[test]
    fn moment_matched_samples_have_identity_covariance() {
        let s = FixedSampleSet::draw_with(40, 4, 3, SampleScheme::MomentMatched).unwrap();
        let z = s.z();
        for j in 0..4 {
            assert!(z.column(j).sum().abs() < 1e-12);
        }
        let cov = z.transpose() * z / 40.0;
        assert!((cov - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn antithetic_needs_even_count() {
        assert!(FixedSampleSet::draw_with(3, 2, 0, SampleScheme::Antithetic).is_err());
    }

    #[test]
    fn pack_round_trip() {
        let params = VariationalParams {
            mu: DVector::from_vec(vec![1.0, 2.0]),
            shape: Shape::MviLr { u: DVector::from_vec(vec![3.0, 4.0]), v: DVector::from_vec(vec![5.0, 6.0]) },
            log_hyper: vec![0.5],
        };
        let x = params.pack(true);
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5]);
        assert_eq!(params.unpack(&x, true).unwrap(), params);
        assert_eq!(params.unpack(&x[..6], false).unwrap(), params);
        assert!(params.unpack(&x[..5], false).is_err());
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("mvi".parse::<Family>().is_err());
    }

    use crate::laplace::fit_laplace;
    use crate::models::{FeatureMap, GlmPosterior};
    use crate::optimize::finite_difference_gradient;
    use crate::util::relative_error;

    fn normal_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(rows, cols, |_, _| standard_normal(&mut rng))
    }

    fn small_models() -> Vec<GlmPosterior> {
        let x = normal_matrix(10, 1, 1);
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let labels: Vec<f64> = x.iter().map(|v| f64::from(*v > 0.1)).collect();
        let mut onehot = DMatrix::zeros(10, 2);
        for n in 0..10 {
            onehot[(n, usize::from(x[(n, 0)] > 0.0))] = 1.0;
        }
        let map = |m| FeatureMap::new(normal_matrix(m, 1, 2), 1.1).unwrap();
        vec![
            GlmPosterior::cauchy(x.clone(), &y, map(3)).unwrap(),
            GlmPosterior::logistic(x.clone(), &labels, map(4)).unwrap(),
            GlmPosterior::multiclass(x.clone(), onehot, map(2)).unwrap(),
            GlmPosterior::gaussian_linear(normal_matrix(10, 4, 3), &y, 4.0).unwrap(),
        ]
    }

    fn perturbed(params: &VariationalParams, seed: u64) -> VariationalParams {
        let x = params.pack(true);
        let mut rng = rng_from_seed(seed);
        let moved: Vec<f64> = x.iter().map(|v| v + 0.1 * standard_normal(&mut rng)).collect();
        params.unpack(&moved, true).unwrap()
    }

    #[test]
    fn bound_gradients_match_finite_differences() {
        for (mi, model) in small_models().iter().enumerate() {
            let log_hyper = model.log_hyper(&model_default_hyper(model)).unwrap();
            let (_, la) = fit_laplace(model, &log_hyper, &OptimConfig::default()).unwrap();
            let z = FixedSampleSet::draw(50, model.dim(), 9).unwrap();
            for family in Family::ALL {
                for point in 0..5 {
                    let params = perturbed(&initialise(family, &la, 4, DiagInit::Laplace), 100 * mi as u64 + point);
                    let (_, analytic) = elbo_gradient(&params, &z, model, &la, true).unwrap();
                    let x = params.pack(true);
                    let fd = finite_difference_gradient(
                        |x| elbo_estimate(&params.unpack(x, true).unwrap(), &z, model, &la).unwrap(),
                        &x,
                        1e-5,
                    )
                    .unwrap();
                    let err = relative_error(&analytic, &fd);
                    assert!(err < 1e-5, "model {mi} {family:?} point {point}: {err:e}");
                }
            }
        }
    }

    fn model_default_hyper(model: &GlmPosterior) -> crate::models::Hyperparameters {
        let mut h = crate::models::Hyperparameters::new(0.8);
        if model.feature_map().is_some() {
            h = h.with_width(1.1);
        }
        if model.likelihood() == crate::models::Likelihood::Cauchy {
            h = h.with_gamma(0.4);
        }
        h
    }

    fn random_laplace(p: usize, seed: u64) -> LaplaceResult {
        let a = normal_matrix(p, p, seed);
        let cov = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
        LaplaceResult::from_gaussian(DVector::zeros(p), cov, vec![]).unwrap()
    }

    #[test]
    fn roots_reproduce_their_covariances() {
        let la = random_laplace(4, 5);
        let lr = VariationalParams { mu: DVector::zeros(4), shape: Shape::MviLr { u: DVector::zeros(4), v: DVector::from_element(4, 1.0) }, log_hyper: vec![] };
        assert_eq!(covariance_root(&lr, &la).root, la.cholesky);
        let eig = initialise(Family::MviEig, &la, 0, DiagInit::Laplace);
        let cov = covariance_root(&eig, &la).covariance();
        assert!(crate::util::relative_frobenius(&cov, &la.covariance) < 1e-10);
        let diag = VariationalParams { mu: DVector::zeros(2), shape: Shape::ViDiag { log_sigma: DVector::from_vec(vec![2f64.ln(), 3f64.ln()]) }, log_hyper: vec![] };
        let cov = covariance_root(&diag, &random_laplace(2, 1)).covariance();
        assert!((cov - DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).norm() < 1e-12);
    }

    #[test]
    fn entropy_special_cases() {
        let la = LaplaceResult::from_gaussian(DVector::zeros(3), DMatrix::identity(3, 3), vec![]).unwrap();
        let mu = initialise(Family::MviMu, &la, 0, DiagInit::Laplace);
        let expect = 1.5 * (2.0 * PI * std::f64::consts::E).ln();
        assert!((entropy(&mu, &la).unwrap() - expect).abs() < 1e-14);

        let la2 = random_laplace(2, 3);
        let eig = VariationalParams { mu: DVector::zeros(2), shape: Shape::MviEig { log_r: DVector::from_vec(vec![0.0, 1.0]) }, log_hyper: vec![] };
        let expect = (2.0 * PI * std::f64::consts::E).ln() + 1.0;
        assert!((entropy(&eig, &la2).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn low_rank_entropy_matches_direct_determinant() {
        for seed in 0..20 {
            let p = 4;
            let la = random_laplace(p, seed);
            let u = normal_matrix(p, 1, 1000 + seed).column(0).into_owned();
            let v = normal_matrix(p, 1, 2000 + seed).column(0).into_owned();
            let params = VariationalParams { mu: DVector::zeros(p), shape: Shape::MviLr { u, v }, log_hyper: vec![] };
            let root = covariance_root(&params, &la).root;
            let direct = 0.5 * ((2.0 * PI * std::f64::consts::E).powi(p as i32) * (&root * root.transpose()).determinant()).ln();
            let lemma = entropy(&params, &la).unwrap();
            assert!(((lemma - direct) / direct).abs() < 1e-10, "{lemma} vs {direct}");
        }
    }

    #[test]
    fn singular_low_rank_root_is_reported() {
        let la = LaplaceResult::from_gaussian(DVector::zeros(2), DMatrix::identity(2, 2), vec![]).unwrap();
        // 1 + vᵀu = 0
        let params = VariationalParams {
            mu: DVector::zeros(2),
            shape: Shape::MviLr { u: DVector::from_vec(vec![1.0, 0.0]), v: DVector::from_vec(vec![-1.0, 0.0]) },
            log_hyper: vec![],
        };
        assert!(matches!(entropy(&params, &la), Err(Error::SingularRoot(_))));
    }

    #[test]
    fn zero_draw_gives_density_at_mean_plus_entropy() {
        let model = &small_models()[1];
        let log_hyper = model.log_hyper(&model_default_hyper(model)).unwrap();
        let (_, la) = fit_laplace(model, &log_hyper, &OptimConfig::default()).unwrap();
        let z = FixedSampleSet::from_matrix(DMatrix::zeros(1, model.dim()));
        let params = initialise(Family::MviLr, &la, 3, DiagInit::Laplace);
        let value = elbo_estimate(&params, &z, model, &la).unwrap();
        let cond = model.condition(&log_hyper).unwrap();
        let expect = cond.value(params.mu.as_slice()) + entropy(&params, &la).unwrap();
        assert!((value - expect).abs() < 1e-12);
        assert_eq!(value.to_bits(), elbo_estimate(&params, &z, model, &la).unwrap().to_bits());
    }

    #[test]
    fn low_rank_init_scale() {
        let la = LaplaceResult::from_gaussian(DVector::zeros(50), DMatrix::identity(50, 50), vec![]).unwrap();
        let Shape::MviLr { u, .. } = initialise(Family::MviLr, &la, 11, DiagInit::Laplace).shape else { unreachable!() };
        let sq = u.norm_squared();
        assert!((0.05..=5.0).contains(&sq), "{sq}");
    }
}
