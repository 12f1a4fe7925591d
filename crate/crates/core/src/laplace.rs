//! Mode finding, the Laplace Gaussian and the grid-search initialisation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{kmeans, Conditioned, FeatureMap, GlmPosterior, Hyperparameters, Likelihood, LogDensity};
use crate::optimize::{maximize, OptimConfig, Termination};
use crate::util::{derive_seed, rng_from_seed};
use crate::variational::{elbo_estimate, initialise, DiagInit, Family, FixedSampleSet};

/// Relative jitter ladder for repairing an indefinite negative Hessian.
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;
const NEWTON_STEPS: usize = 5;

#[derive(Debug, Clone)]
pub struct Mode {
    pub w: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub gradient_norm: f64,
    /// `ln p̃` at the start and after each accepted step when tracing.
    pub trace: Vec<f64>,
}

/// Maximises `ln p̃(w | θ)` over `w` with `θ` held fixed.
pub fn find_mode(model: &dyn LogDensity, log_hyper: &[f64], w0: &[f64], config: &OptimConfig) -> Result<Mode> {
    if w0.len() != model.dim() {
        return Err(Error::InvalidArgument(format!(
            "starting point has length {}, model expects {}",
            w0.len(),
            model.dim()
        )));
    }
    let cond = model.condition(log_hyper)?;
    let mut gh = vec![0.0; cond.hyper_dim()];
    let result = maximize(|w, g| cond.gradient(w, g, &mut gh), w0, config)?;
    let (w, value, gradient_norm) = newton_polish(&*cond, &mut gh, result.x.clone(), result.value);
    Ok(Mode {
        gradient_norm,
        w: DVector::from_vec(w),
        value,
        iterations: result.iterations,
        termination: result.termination,
        trace: result.trace,
    })
}

/// A few guarded Newton steps from the optimiser's end point; a step is kept
/// only if `−H` factorises and the log-density does not drop.
fn newton_polish(cond: &dyn Conditioned, gh: &mut [f64], mut w: Vec<f64>, mut value: f64) -> (Vec<f64>, f64, f64) {
    let mut g = vec![0.0; w.len()];
    let start = cond.gradient(&w, &mut g, gh);
    if start.is_finite() {
        value = start;
    }
    for _ in 0..NEWTON_STEPS {
        let Some(factor) = symmetrise(&(-cond.hessian(&w))).cholesky() else { break };
        let step = factor.solve(&DVector::from_column_slice(&g));
        let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let mut trial_g = vec![0.0; w.len()];
        let trial_value = cond.gradient(&trial, &mut trial_g, gh);
        if !(trial_value.is_finite() && trial_value >= value - 1e-12 * value.abs().max(1.0)) {
            break;
        }
        let moved = step.norm();
        (w, g, value) = (trial, trial_g, trial_value);
        if moved <= 1e-14 * (1.0 + DVector::from_column_slice(&w).norm()) {
            break;
        }
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    (w, value, norm)
}

/// `N(mode, (−H)⁻¹)` together with the factorisations the variational families reuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceResult {
    #[serde(with = "crate::serde_matrix::vector")]
    pub mode: DVector<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub covariance: DMatrix<f64>,
    /// Lower-triangular `C_LA` with `C_LA C_LAᵀ = Σ_LA`.
    #[serde(with = "crate::serde_matrix")]
    pub cholesky: DMatrix<f64>,
    /// Orthonormal columns `Q_LA`, ordered by decreasing eigenvalue.
    #[serde(with = "crate::serde_matrix")]
    pub eigenvectors: DMatrix<f64>,
    /// Square roots of the eigenvalues of `Σ_LA`.
    #[serde(with = "crate::serde_matrix::vector")]
    pub eigen_scales: DVector<f64>,
    pub log_hyper: Vec<f64>,
    pub log_density_at_mode: f64,
    /// Absolute diagonal jitter added to `−H` (zero when none was needed).
    pub jitter: f64,
    #[serde(default)]
    pub bound_at_mode: Option<f64>,
}

impl LaplaceResult {
    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    /// A Laplace-like result for an arbitrary Gaussian `N(mean, covariance)`.
    pub fn from_gaussian(mean: DVector<f64>, covariance: DMatrix<f64>, log_hyper: Vec<f64>) -> Result<Self> {
        let covariance = symmetrise(&covariance);
        let cholesky = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(&covariance), jitter: 0.0 })?
            .l();
        let (eigenvectors, eigen_scales) = sorted_eigen(&covariance)?;
        Ok(Self {
            mode: mean,
            covariance,
            cholesky,
            eigenvectors,
            eigen_scales,
            log_hyper,
            log_density_at_mode: f64::NAN,
            jitter: 0.0,
            bound_at_mode: None,
        })
    }
}

fn symmetrise(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrise(m)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Eigenvectors sorted by decreasing eigenvalue, each with its largest
/// component positive, and the square roots of the eigenvalues.
fn sorted_eigen(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let eig = SymmetricEigen::new(cov.clone());
    let p = cov.nrows();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut q = DMatrix::zeros(p, p);
    let mut scales = DVector::zeros(p);
    for (j, &k) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[k];
        if !(lambda > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: lambda, jitter: 0.0 });
        }
        scales[j] = lambda.sqrt();
        let col = eig.eigenvectors.column(k);
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        q.set_column(j, &(col * sign));
    }
    Ok((q, scales))
}

/// Builds the Laplace Gaussian at `mode`.
pub fn laplace_approximation(model: &dyn LogDensity, log_hyper: &[f64], mode: &DVector<f64>) -> Result<LaplaceResult> {
    let cond = model.condition(log_hyper)?;
    let w = mode.as_slice();
    let value = cond.value(w);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("log-density is {value} at the mode")));
    }
    let neg_h = symmetrise(&(-cond.hessian(w)));
    if neg_h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Hessian has non-finite entries".into()));
    }
    let p = neg_h.nrows();
    let scale = (neg_h.trace() / p as f64).abs().max(f64::MIN_POSITIVE);

    let mut jitter = 0.0;
    let mut factor = neg_h.clone().cholesky();
    let mut rel = JITTER_START;
    while factor.is_none() {
        if rel > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(&neg_h), jitter });
        }
        jitter = rel * scale;
        factor = (&neg_h + DMatrix::identity(p, p) * jitter).cholesky();
        rel *= 10.0;
    }
    let covariance = symmetrise(&factor.expect("loop exits with a factor").inverse());
    let cholesky = covariance
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(&neg_h), jitter })?
        .l();
    let (eigenvectors, eigen_scales) = sorted_eigen(&covariance)?;
    Ok(LaplaceResult {
        mode: mode.clone(),
        covariance,
        cholesky,
        eigenvectors,
        eigen_scales,
        log_hyper: log_hyper.to_vec(),
        log_density_at_mode: value,
        jitter,
        bound_at_mode: None,
    })
}

/// Mode finding from `w = 0` followed by the Laplace approximation.
pub fn fit_laplace(model: &dyn LogDensity, log_hyper: &[f64], config: &OptimConfig) -> Result<(Mode, LaplaceResult)> {
    let mode = find_mode(model, log_hyper, &vec![0.0; model.dim()], config)?;
    let la = laplace_approximation(model, log_hyper, &mode.w)?;
    Ok((mode, la))
}

/// Candidate grid for the RBF hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub basis_counts: Vec<usize>,
    /// Random `(width, α)` pairs per basis count, each uniform on `(0, 1)`.
    pub candidates_per_count: usize,
    /// Optimiser iterations of the short Laplace run used for scoring.
    pub screening_iters: usize,
    /// Iteration budget of the winner's full Laplace run.
    pub final_iters: usize,
    /// Samples in the shared set used to score candidates.
    pub samples: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { basis_counts: vec![10, 20, 30], candidates_per_count: 10, screening_iters: 10, final_iters: 1000, samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub basis_count: usize,
    pub hyper: Hyperparameters,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub model: GlmPosterior,
    pub laplace: LaplaceResult,
    pub mode: Mode,
    pub candidates: Vec<Candidate>,
    pub winner: usize,
}

fn build_model(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    likelihood: Likelihood,
    centres: DMatrix<f64>,
    width: f64,
) -> Result<GlmPosterior> {
    let map = FeatureMap::new(centres, width)?;
    GlmPosterior::new(
        crate::models::Design::Rbf { inputs: inputs.clone(), map },
        likelihood,
        targets.clone(),
    )
}

/// Random search over `(M, width, α[, γ])`: every candidate gets a short
/// Laplace run and is scored by the fixed-sample bound of its Laplace
/// Gaussian; the best one is refitted with the full iteration budget.
pub fn hyperparameter_search(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    likelihood: Likelihood,
    grid: &GridConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    let n = inputs.nrows();
    let counts: Vec<usize> = grid.basis_counts.iter().copied().filter(|&m| m >= 1 && m <= n).collect();
    if counts.is_empty() || grid.candidates_per_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "no basis count in {:?} is usable with {n} training points",
            grid.basis_counts
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut candidates = Vec::new();
    let mut centres = Vec::new();
    for &m in &counts {
        centres.push(kmeans(inputs, m, derive_seed(seed, 100 + m as u64))?);
        for _ in 0..grid.candidates_per_count {
            let width = rng.random_range(f64::MIN_POSITIVE..1.0);
            let alpha = rng.random_range(f64::MIN_POSITIVE..1.0);
            let mut hyper = Hyperparameters::new(alpha).with_width(width);
            if likelihood == Likelihood::Cauchy {
                hyper = hyper.with_gamma(rng.random_range(f64::MIN_POSITIVE..1.0));
            }
            candidates.push(Candidate { basis_count: m, hyper, score: None, failure: None });
        }
    }
    let outputs = likelihood.outputs();
    let p_max = (counts.iter().max().expect("nonempty") + 1) * outputs;
    let shared = FixedSampleSet::draw(grid.samples, p_max, derive_seed(seed, 2))?;
    let screening = OptimConfig::default().with_max_iters(grid.screening_iters);

    let score = |c: &Candidate| -> Result<f64> {
        let idx = counts.iter().position(|&m| m == c.basis_count).expect("count in grid");
        let model = build_model(inputs, targets, likelihood, centres[idx].clone(), c.hyper.width.expect("width"))?;
        let log_hyper = model.log_hyper(&c.hyper)?;
        let (_, la) = fit_laplace(&model, &log_hyper, &screening)?;
        let z = shared.leading_columns(model.dim())?;
        let init = initialise(Family::MviMu, &la, 0, DiagInit::Laplace);
        elbo_estimate(&init, &z, &model, &la)
    };
    let scores: Vec<Result<f64>> = candidates.par_iter().map(score).collect();
    for (c, s) in candidates.iter_mut().zip(scores) {
        match s {
            Ok(v) if v.is_finite() => c.score = Some(v),
            Ok(v) => c.failure = Some(format!("bound is {v}")),
            Err(e) => c.failure = Some(e.to_string()),
        }
    }
    // Strict improvement only, so ties keep the lower index.
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if let Some(s) = c.score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    let winner = best.map(|(i, _)| i);
    let Some(winner) = winner else {
        let reasons: Vec<String> = candidates
            .iter()
            .map(|c| format!("M={} width={:.4} alpha={:.4}: {}", c.basis_count, c.hyper.width.unwrap_or(f64::NAN), c.hyper.alpha, c.failure.as_deref().unwrap_or("?")))
            .collect();
        return Err(Error::NoViableCandidate(reasons.join("; ")));
    };

    let best = &candidates[winner];
    let idx = counts.iter().position(|&m| m == best.basis_count).expect("count in grid");
    let model = build_model(inputs, targets, likelihood, centres[idx].clone(), best.hyper.width.expect("width"))?;
    let log_hyper = model.log_hyper(&best.hyper)?;
    let (mode, mut laplace) = fit_laplace(&model, &log_hyper, &OptimConfig::default().with_max_iters(grid.final_iters))?;
    let z = shared.leading_columns(model.dim())?;
    laplace.bound_at_mode = elbo_estimate(&initialise(Family::MviMu, &laplace, 0, DiagInit::Laplace), &z, &model, &laplace).ok();
    Ok(SearchOutcome { model, laplace, mode, candidates, winner })
}
