//! Predictive scoring of fitted Gaussians and the 2D KL quadrature.
//!
//! Predictive quantities are Monte Carlo averages over fresh, seeded draws
//! `w_s = mean + root z_s`. Draws are produced and consumed in fixed-size
//! chunks from one stream, so results do not depend on memory limits.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::Mixture2D;
use crate::error::{Error, Result};
use crate::models::{GlmPosterior, Likelihood};
use crate::util::{log_sum_exp, rng_from_seed, sigmoid, standard_normal, Rng};
use crate::variational::PosteriorGaussian;

const CHUNK: usize = 1024;

/// How held-out log-likelihoods are aggregated into an LPD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpdKind {
    /// `ln (1/S′) Σ_s p(D_test | w_s)` for the whole test set.
    Joint,
    /// The per-point version averaged over test points.
    MeanPerPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpdEstimate {
    pub value: f64,
    /// Delta-method Monte Carlo standard error.
    pub std_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveScore {
    pub lpd: f64,
    pub lpd_std_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

/// Running `ln Σ exp(x)` and `ln Σ exp(2x)` with rescaling on new maxima.
#[derive(Clone, Copy)]
struct LseAcc {
    max: f64,
    sum: f64,
    sum_sq: f64,
    count: usize,
}

impl LseAcc {
    fn new() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0, sum_sq: 0.0, count: 0 }
    }

    fn push(&mut self, x: f64) {
        self.count += 1;
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            let scale = (self.max - x).exp();
            self.sum *= scale;
            self.sum_sq *= scale * scale;
            self.max = x;
        }
        let e = (x - self.max).exp();
        self.sum += e;
        self.sum_sq += e * e;
    }

    /// `ln` of the mean of `exp(x)` and its delta-method standard error.
    fn log_mean(&self) -> (f64, f64) {
        let n = self.count as f64;
        if self.max == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, f64::NAN);
        }
        let mean = self.sum / n;
        let var = if self.count > 1 { ((self.sum_sq / n - mean * mean) * n / (n - 1.0)).max(0.0) } else { 0.0 };
        (self.max + mean.ln(), (var / n).sqrt() / mean)
    }
}

/// Aggregates of one Monte Carlo pass over a test set.
struct Pass {
    joint: LseAcc,
    per_point: Vec<LseAcc>,
    /// `N × K`: mean predictive probabilities, or the mean linear predictor.
    mean_output: DMatrix<f64>,
    /// `N`: mean squared deviation of the linear predictor from `shift`.
    mean_sq_output: Vec<f64>,
    /// `N`: the first draw's linear predictor, to keep the variance well conditioned.
    shift: Vec<f64>,
    samples: usize,
}

fn draw_chunk(rng: &mut Rng, rows: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(rows, dim, (0..rows * dim).map(|_| standard_normal(rng)))
}

fn monte_carlo_pass(
    q: &PosteriorGaussian,
    model: &GlmPosterior,
    log_hyper: &[f64],
    samples: usize,
    seed: u64,
    with_likelihood: bool,
) -> Result<Pass> {
    use crate::models::LogDensity;
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one predictive sample".into()));
    }
    if q.dim() != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "posterior has dimension {}, model expects {}",
            q.dim(),
            model.dim()
        )));
    }
    let cond = model.conditioned(log_hyper)?;
    let n = model.rows();
    let k = model.likelihood().outputs();
    let mut rng = rng_from_seed(seed);
    let mut pass = Pass {
        joint: LseAcc::new(),
        per_point: vec![LseAcc::new(); n],
        mean_output: DMatrix::zeros(n, k),
        mean_sq_output: vec![0.0; n],
        shift: vec![0.0; n],
        samples,
    };
    let mut done = 0;
    while done < samples {
        let rows = CHUNK.min(samples - done);
        let z = draw_chunk(&mut rng, rows, q.dim());
        let w = q.transform(&z);
        let preds = cond.predictors(&w);
        if with_likelihood {
            let ll = cond.pointwise_log_likelihood(&w);
            for s in 0..rows {
                pass.joint.push(ll.row(s).sum());
            }
            for (j, acc) in pass.per_point.iter_mut().enumerate() {
                for s in 0..rows {
                    acc.push(ll[(s, j)]);
                }
            }
        }
        let mut a = vec![0.0; k];
        for j in 0..n {
            for s in 0..rows {
                match model.likelihood() {
                    Likelihood::Bernoulli => pass.mean_output[(j, 0)] += sigmoid(preds[0][(s, j)]),
                    Likelihood::Softmax { .. } => {
                        for (c, ac) in a.iter_mut().enumerate() {
                            *ac = preds[c][(s, j)];
                        }
                        let lse = log_sum_exp(&a);
                        for c in 0..k {
                            pass.mean_output[(j, c)] += (a[c] - lse).exp();
                        }
                    }
                    _ => {
                        let v = preds[0][(s, j)];
                        if done == 0 && s == 0 {
                            pass.shift[j] = v;
                        }
                        pass.mean_output[(j, 0)] += v;
                        pass.mean_sq_output[j] += (v - pass.shift[j]).powi(2);
                    }
                }
            }
        }
        done += rows;
    }
    let inv = 1.0 / samples as f64;
    pass.mean_output *= inv;
    for v in &mut pass.mean_sq_output {
        *v *= inv;
    }
    Ok(pass)
}

fn lpd_from_pass(pass: &Pass, kind: LpdKind) -> LpdEstimate {
    let (value, std_error) = match kind {
        LpdKind::Joint => pass.joint.log_mean(),
        LpdKind::MeanPerPoint => {
            let n = pass.per_point.len() as f64;
            let mut total = 0.0;
            let mut var = 0.0;
            for acc in &pass.per_point {
                let (v, se) = acc.log_mean();
                total += v;
                var += se * se;
            }
            (total / n, var.sqrt() / n)
        }
    };
    let diagnostic = (value == f64::NEG_INFINITY).then(|| {
        format!("every one of the {} predictive samples gave the test data zero likelihood", pass.samples)
    });
    LpdEstimate { value, std_error, diagnostic }
}

/// Monte Carlo log predictive density of `model`'s data (the test set).
pub fn lpd(
    q: &PosteriorGaussian,
    model: &GlmPosterior,
    log_hyper: &[f64],
    samples: usize,
    seed: u64,
    kind: LpdKind,
) -> Result<LpdEstimate> {
    let pass = monte_carlo_pass(q, model, log_hyper, samples, seed, true)?;
    Ok(lpd_from_pass(&pass, kind))
}

/// Joint LPD and error rate; labels are predicted from MC-averaged class probabilities.
pub fn classification_metrics(
    q: &PosteriorGaussian,
    model: &GlmPosterior,
    log_hyper: &[f64],
    samples: usize,
    seed: u64,
) -> Result<PredictiveScore> {
    if !model.likelihood().is_classification() {
        return Err(Error::InvalidArgument("classification metrics need a classification model".into()));
    }
    let pass = monte_carlo_pass(q, model, log_hyper, samples, seed, true)?;
    let est = lpd_from_pass(&pass, LpdKind::Joint);
    let y = model.targets();
    let n = model.rows();
    let mut wrong = 0usize;
    for j in 0..n {
        let (predicted, truth) = match model.likelihood() {
            // ties go to class 0
            Likelihood::Bernoulli => (usize::from(pass.mean_output[(j, 0)] > 0.5), y[(j, 0)] as usize),
            _ => (first_argmax(pass.mean_output.row(j).iter()), first_argmax(y.row(j).iter())),
        };
        wrong += usize::from(predicted != truth);
    }
    Ok(PredictiveScore {
        lpd: est.value,
        lpd_std_error: est.std_error,
        error_rate: Some(wrong as f64 / n as f64),
        mse: None,
        samples,
        seed,
    })
}

fn first_argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Per-point LPD and the MSE of the MC mean prediction.
pub fn regression_metrics(
    q: &PosteriorGaussian,
    model: &GlmPosterior,
    log_hyper: &[f64],
    samples: usize,
    seed: u64,
) -> Result<PredictiveScore> {
    if model.likelihood().is_classification() {
        return Err(Error::InvalidArgument("regression metrics need a regression model".into()));
    }
    let pass = monte_carlo_pass(q, model, log_hyper, samples, seed, true)?;
    let est = lpd_from_pass(&pass, LpdKind::MeanPerPoint);
    let y = model.targets();
    let n = model.rows();
    let mse = (0..n).map(|j| (y[(j, 0)] - pass.mean_output[(j, 0)]).powi(2)).sum::<f64>() / n as f64;
    Ok(PredictiveScore { lpd: est.value, lpd_std_error: est.std_error, error_rate: None, mse: Some(mse), samples, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub mean: f64,
    pub sd: f64,
}

/// MC mean and standard deviation of `φ(x)ᵀw` along a 1D input grid.
pub fn predictive_curve(
    q: &PosteriorGaussian,
    model: &GlmPosterior,
    log_hyper: &[f64],
    grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if model.likelihood().outputs() != 1 {
        return Err(Error::InvalidArgument("predictive curves need a single-output model".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("curve grid is empty".into()));
    }
    let inputs = DMatrix::from_column_slice(grid.len(), 1, grid);
    let on_grid = model.with_data(inputs, DMatrix::zeros(grid.len(), 1))?;
    let pass = monte_carlo_pass(q, &on_grid, log_hyper, samples, seed, false)?;
    let s = samples as f64;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let mean = pass.mean_output[(j, 0)];
            let centred = mean - pass.shift[j];
            let var = if samples > 1 { ((pass.mean_sq_output[j] - centred * centred) * s / (s - 1.0)).max(0.0) } else { 0.0 };
            CurvePoint { x, mean, sd: var.sqrt() }
        })
        .collect())
}

/// A normalised log-density on the plane.
pub trait Density2D: Sync {
    fn log_density(&self, x: f64, y: f64) -> f64;
}

impl Density2D for Mixture2D {
    fn log_density(&self, x: f64, y: f64) -> f64 {
        Mixture2D::log_density(self, x, y)
    }
}

impl Density2D for PosteriorGaussian {
    fn log_density(&self, x: f64, y: f64) -> f64 {
        gaussian_log_density_2d(self, x, y)
    }
}

fn gaussian_log_density_2d(q: &PosteriorGaussian, x: f64, y: f64) -> f64 {
    // solve root · u = (x, y) − mean for a general (not necessarily triangular) root
    let r = &q.root;
    let (a, b, c, d) = (r[(0, 0)], r[(0, 1)], r[(1, 0)], r[(1, 1)]);
    let det = a * d - b * c;
    let (dx, dy) = (x - q.mean[0], y - q.mean[1]);
    let u0 = (d * dx - b * dy) / det;
    let u1 = (-c * dx + a * dy) / det;
    -(2.0 * std::f64::consts::PI).ln() - det.abs().ln() - 0.5 * (u0 * u0 + u1 * u1)
}

/// Square quadrature grid `[lo, hi]²` with `resolution` nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Default for Grid2D {
    fn default() -> Self {
        Self { lo: -10.0, hi: 10.0, resolution: 801 }
    }
}

impl Grid2D {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.resolution - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step()
    }

    fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || self.resolution < 2 {
            return Err(Error::InvalidArgument(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }
}

/// `KL(q ‖ p)` by a Riemann sum on `grid`.
pub fn kl_to_target_2d(q: &PosteriorGaussian, target: &dyn Density2D, grid: &Grid2D) -> Result<f64> {
    grid.validate()?;
    if q.dim() != 2 {
        return Err(Error::InvalidArgument(format!("expected a 2D posterior, got dimension {}", q.dim())));
    }
    let cov = q.covariance();
    let mut outside = 0.0;
    let mut reach: f64 = 0.0;
    for i in 0..2 {
        let (m, s) = (q.mean[i], cov[(i, i)].sqrt());
        outside += 0.5 * erfc((grid.hi - m) / (s * std::f64::consts::SQRT_2))
            + 0.5 * erfc((m - grid.lo) / (s * std::f64::consts::SQRT_2));
        reach = reach.max((m - 7.0 * s).abs()).max((m + 7.0 * s).abs());
    }
    if outside > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "grid [{}, {}]² misses {outside:.2e} of q's mass; use at least [{:.2}, {:.2}]²",
            grid.lo, grid.hi, -reach, reach
        )));
    }
    let h = grid.step();
    let rows: Vec<f64> = (0..grid.resolution)
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let mut acc = 0.0;
            for j in 0..grid.resolution {
                let y = grid.node(j);
                let lq = gaussian_log_density_2d(q, x, y);
                let qv = lq.exp();
                if qv > 0.0 {
                    acc += qv * (lq - target.log_density(x, y));
                }
            }
            acc
        })
        .collect();
    Ok(rows.iter().sum::<f64>() * h * h)
}

/// `ln p` on every node of `grid`, row-major in `x` then `y`.
pub fn log_density_grid(target: &dyn Density2D, grid: &Grid2D) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::with_capacity(grid.resolution * grid.resolution);
    for i in 0..grid.resolution {
        for j in 0..grid.resolution {
            let (x, y) = (grid.node(i), grid.node(j));
            out.push((x, y, target.log_density(x, y)));
        }
    }
    out
}

/// Closed polyline of the ellipse holding `mass` of a 2D Gaussian.
pub fn mass_ellipse(q: &PosteriorGaussian, mass: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if q.dim() != 2 || !(mass > 0.0 && mass < 1.0) || points < 3 {
        return Err(Error::InvalidArgument("need a 2D Gaussian, mass in (0, 1) and at least 3 points".into()));
    }
    // chi-square with 2 dof: P(r² ≤ c²) = 1 − exp(−c²/2)
    let c = (-2.0 * (1.0 - mass).ln()).sqrt();
    Ok((0..=points)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * (i % points) as f64 / points as f64;
            let (u0, u1) = (c * t.cos(), c * t.sin());
            let r = &q.root;
            (q.mean[0] + r[(0, 0)] * u0 + r[(0, 1)] * u1, q.mean[1] + r[(1, 0)] * u0 + r[(1, 1)] * u1)
        })
        .collect())
}
