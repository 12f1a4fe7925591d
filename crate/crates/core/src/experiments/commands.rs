//! The `demo2d`, `cauchy`, `benchmark` and `fit` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_cauchy_task, load_csv_dataset, random_splits, read_split_file, standardize_split, CsvSchema, Dataset,
    Mixture2D, Standardizer, TaskKind,
};
use crate::error::{Error, Result};
use crate::evaluate::{kl_to_target_2d, log_density_grid, mass_ellipse, predictive_curve, Grid2D, PredictiveScore};
use crate::laplace::{fit_laplace, hyperparameter_search, LaplaceResult};
use crate::models::{Design, FeatureMap, GlmPosterior, Likelihood};
use crate::optimize::OptimConfig;
use crate::util::derive_seed;
use crate::variational::{
    elbo_estimate, fit, initialise, DiagInit, Family, FixedSampleSet, PosteriorGaussian, VariationalParams,
};

use super::config::{Method, RunConfig};
use super::pipeline::{self, fit_config, laplace_gaussian, likelihood_for, run_split, streams, Record};
use super::report::{BenchmarkReport, Skipped, Timings};
use super::sidecar;

pub const DEMO_METHODS: [Method; 4] = [Method::Laplace, Method::MviMu, Method::MviEig, Method::MviLr];

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(dir, name, text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo2dReport {
    pub config: RunConfig,
    pub methods: Vec<Method>,
    /// `KL(q ‖ p)` per method.
    pub kl: BTreeMap<String, f64>,
    #[serde(default)]
    pub elbo: BTreeMap<String, f64>,
    #[serde(default)]
    pub means: BTreeMap<String, [f64; 2]>,
}

/// Fits each method to the 2D mixture and writes `contours.csv`,
/// `ellipses.csv` and `kl.json`.
pub fn demo2d(cfg: &RunConfig, out: &Path) -> Result<Demo2dReport> {
    cfg.validate()?;
    let methods = cfg.methods_or(&DEMO_METHODS);
    let target = Mixture2D::demo();
    let (_, la) = fit_laplace(&target, &[], &OptimConfig::default().with_max_iters(cfg.grid.final_iters))?;
    let samples = FixedSampleSet::draw_with(cfg.samples, 2, derive_seed(cfg.seed, streams::SAMPLES), cfg.sample_scheme)?;
    let init_seed = derive_seed(cfg.seed, streams::INIT);

    let mut report = Demo2dReport { config: cfg.clone(), methods: methods.clone(), kl: BTreeMap::new(), elbo: BTreeMap::new(), means: BTreeMap::new() };
    let mut ellipses = String::from("method,kind,x,y\n");
    for &method in &methods {
        let (q, elbo) = match method.family() {
            None => {
                let init = initialise(Family::MviMu, &la, 0, DiagInit::Laplace);
                (laplace_gaussian(&la), elbo_estimate(&init, &samples, &target, &la)?)
            }
            Some(family) => {
                let inits: &[DiagInit] =
                    if family == Family::ViDiag { &[DiagInit::Laplace, DiagInit::Small] } else { &[DiagInit::Laplace] };
                let mut best: Option<(PosteriorGaussian, f64)> = None;
                for &d in inits {
                    let res = fit(&target, &la, &initialise(family, &la, init_seed, d), &samples, &fit_config(cfg))?;
                    let q = crate::variational::covariance_root(&res.params, &la);
                    if best.as_ref().is_none_or(|(_, e)| res.elbo > *e) {
                        best = Some((q, res.elbo));
                    }
                }
                best.expect("one initialisation")
            }
        };
        let kl = kl_to_target_2d(&q, &target, &cfg.kl_grid)?;
        let name = method.name().to_owned();
        writeln!(ellipses, "{name},mean,{},{}", q.mean[0], q.mean[1]).expect("string write");
        for (x, y) in mass_ellipse(&q, 0.7, 100)? {
            writeln!(ellipses, "{name},ellipse,{x},{y}").expect("string write");
        }
        report.means.insert(name.clone(), [q.mean[0], q.mean[1]]);
        report.kl.insert(name.clone(), kl);
        report.elbo.insert(name, elbo);
    }

    let contour_grid = Grid2D { resolution: cfg.contour_resolution, ..cfg.kl_grid };
    let mut contours = String::from("x,y,log_density\n");
    for (x, y, v) in log_density_grid(&target, &contour_grid) {
        writeln!(contours, "{x},{y},{v}").expect("string write");
    }
    write(out, "contours.csv", contours)?;
    write(out, "ellipses.csv", ellipses)?;
    write_json(out, "kl.json", &report)?;
    Ok(report)
}

fn run_splits<F>(
    command: &str,
    dataset: &str,
    cfg: &RunConfig,
    methods: &[Method],
    count: usize,
    prepare: F,
) -> Result<BenchmarkReport>
where
    F: Fn(usize, u64) -> Result<(Dataset, Dataset)> + Sync,
{
    let start = Instant::now();
    let seeds: Vec<u64> = (0..count).map(|i| cfg.seed.wrapping_add(i as u64)).collect();
    type Outcome = (usize, u64, Result<(Vec<Record>, f64)>);
    let outcomes: Vec<Outcome> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let res = prepare(i, seed)
                .and_then(|(train, test)| run_split(&train, &test, methods, cfg, i, seed))
                .map(|o| (o.records, o.seconds));
            (i, seed, res)
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut split_seconds = Vec::new();
    for (split, seed, res) in outcomes {
        match res {
            Ok((r, secs)) => {
                records.extend(r);
                split_seconds.push(secs);
            }
            Err(e) => skipped.push(Skipped { split, seed, reason: e.to_string() }),
        }
    }
    let timings = Timings { total_seconds: start.elapsed().as_secs_f64(), split_seconds };
    BenchmarkReport::build(command, dataset, cfg, methods, seeds, records, skipped, timings)
}

/// Seeded synthetic Cauchy-noise regression runs.
pub fn cauchy(cfg: &RunConfig, out: &Path) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let methods = cfg.methods_or(&Method::ALL);
    let report = run_splits("cauchy", "synthetic_cauchy", cfg, &methods, cfg.splits, |_, seed| {
        let (train, test) = generate_cauchy_task(cfg.cauchy_train, cfg.cauchy_test, derive_seed(seed, 0))?;
        Ok((train, test))
    })?;
    write_json(out, "report.json", &report)?;
    write(out, "table.csv", report.table_csv())?;
    Ok(report)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config("a dataset path is required (--data)".into()))?;
    load_csv_dataset(path, &CsvSchema { target: cfg.target_column, task: cfg.task, header: None })
}

/// Benchmark on a CSV dataset over predefined or seeded random splits.
pub fn benchmark(cfg: &RunConfig, out: &Path) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let methods = cfg.methods_or(&Method::ALL);
    let dataset = load_dataset(cfg)?;
    let splits = match &cfg.splits_file {
        Some(path) => {
            let mut s = read_split_file(path, dataset.len())?;
            s.truncate(cfg.splits);
            s
        }
        None => random_splits(dataset.len(), cfg.splits, cfg.train_fraction, cfg.seed)?,
    };
    // every split must be usable before any fitting starts
    let prepared = splits.iter().map(|s| standardize_split(&dataset, s)).collect::<Result<Vec<_>>>()?;
    let report = run_splits("benchmark", &dataset.name, cfg, &methods, prepared.len(), |i, _| {
        Ok((prepared[i].train.clone(), prepared[i].test.clone()))
    })?;
    write_json(out, "report.json", &report)?;
    write(out, "table.csv", report.table_csv())?;
    Ok(report)
}

/// A fitted posterior with everything needed to rebuild its model and bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPosterior {
    pub method: Method,
    pub dataset: String,
    pub config: RunConfig,
    pub likelihood: Likelihood,
    pub feature_map: FeatureMap,
    pub standardizer: Standardizer,
    #[serde(with = "crate::serde_matrix")]
    pub train_inputs: DMatrix<f64>,
    #[serde(with = "crate::serde_matrix")]
    pub train_targets: DMatrix<f64>,
    pub laplace: LaplaceResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<VariationalParams>,
    pub posterior: PosteriorGaussian,
    pub log_hyper: Vec<f64>,
    /// Fixed-sample bound at the returned distribution.
    pub elbo: f64,
    pub sample_seed: u64,
    pub eval_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag_init: Option<DiagInit>,
}

impl FittedPosterior {
    /// The training log-posterior (standardised inputs).
    pub fn model(&self) -> Result<GlmPosterior> {
        GlmPosterior::new(
            Design::Rbf { inputs: self.train_inputs.clone(), map: self.feature_map.clone() },
            self.likelihood,
            self.train_targets.clone(),
        )
    }

    pub fn sample_set(&self) -> Result<FixedSampleSet> {
        FixedSampleSet::draw_with(self.config.samples, self.laplace.dim(), self.sample_seed, self.config.sample_scheme)
    }

    /// Recomputes the stored bound.
    pub fn bound(&self) -> Result<f64> {
        let params = match &self.params {
            Some(p) => p.clone(),
            None => initialise(Family::MviMu, &self.laplace, 0, DiagInit::Laplace),
        };
        elbo_estimate(&params, &self.sample_set()?, &self.model()?, &self.laplace)
    }

    /// Scores raw (unstandardised) data with `S′` draws from `seed`.
    pub fn score(&self, data: &Dataset, seed: u64) -> Result<PredictiveScore> {
        let model = self.model()?.with_data(self.standardizer.apply(&data.inputs), data.targets.clone())?;
        let fitted = pipeline::Fitted {
            method: self.method,
            posterior: self.posterior.clone(),
            log_hyper: self.log_hyper.clone(),
            params: self.params.clone(),
            elbo: Some(self.elbo),
            iterations: 0,
            termination: crate::optimize::Termination::MaxIterations,
            diag_init: self.diag_init,
        };
        pipeline::score(&fitted, &model, &self.config, seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn matrices(&self) -> Vec<(&'static str, DMatrix<f64>)> {
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let row = |v: &[f64]| DMatrix::from_row_slice(1, v.len(), v);
        vec![
            ("laplace.mode", col(&self.laplace.mode)),
            ("laplace.covariance", self.laplace.covariance.clone()),
            ("laplace.cholesky", self.laplace.cholesky.clone()),
            ("laplace.eigenvectors", self.laplace.eigenvectors.clone()),
            ("laplace.eigen_scales", col(&self.laplace.eigen_scales)),
            ("posterior.mean", col(&self.posterior.mean)),
            ("posterior.root", self.posterior.root.clone()),
            ("log_hyper", row(&self.log_hyper)),
            ("centers", self.feature_map.centers.clone()),
            ("train_inputs", self.train_inputs.clone()),
            ("train_targets", self.train_targets.clone()),
        ]
    }

    pub fn sidecar_bytes(&self) -> Vec<u8> {
        let m = self.matrices();
        let refs: Vec<(&str, &DMatrix<f64>)> = m.iter().map(|(n, x)| (*n, x)).collect();
        sidecar::encode(&refs)
    }

    /// Loads the JSON and replaces its matrices with the sidecar's copies.
    pub fn load_with_sidecar(json: &Path, bin: &Path) -> Result<Self> {
        let mut fitted = Self::load(json)?;
        let mats = sidecar::decode(&std::fs::read(bin)?)?;
        let expected = fitted.matrices();
        if mats.len() != expected.len() {
            return Err(Error::Format(format!("sidecar holds {} matrices, expected {}", mats.len(), expected.len())));
        }
        for ((name, m), (want, old)) in mats.into_iter().zip(expected) {
            if name != want || m.shape() != old.shape() {
                return Err(Error::Format(format!("sidecar entry '{name}' does not match '{want}' {:?}", old.shape())));
            }
            let as_vec = || DVector::from_column_slice(m.as_slice());
            match want {
                "laplace.mode" => fitted.laplace.mode = as_vec(),
                "laplace.covariance" => fitted.laplace.covariance = m,
                "laplace.cholesky" => fitted.laplace.cholesky = m,
                "laplace.eigenvectors" => fitted.laplace.eigenvectors = m,
                "laplace.eigen_scales" => fitted.laplace.eigen_scales = as_vec(),
                "posterior.mean" => fitted.posterior.mean = as_vec(),
                "posterior.root" => fitted.posterior.root = m,
                "log_hyper" => fitted.log_hyper = m.as_slice().to_vec(),
                "centers" => fitted.feature_map.centers = m,
                "train_inputs" => fitted.train_inputs = m,
                "train_targets" => fitted.train_targets = m,
                _ => unreachable!("names come from matrices()"),
            }
        }
        Ok(fitted)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub fitted: FittedPosterior,
    pub curve: Option<PathBuf>,
}

/// Fits one method to a whole dataset (the synthetic Cauchy training set when
/// no path is configured) and writes `posterior.json`, `posterior.bin` and,
/// for 1D regression, `curve.csv`.
pub fn fit_command(cfg: &RunConfig, out: &Path) -> Result<FitOutput> {
    cfg.validate()?;
    let raw = match cfg.data {
        Some(_) => load_dataset(cfg)?,
        None => generate_cauchy_task(cfg.cauchy_train, cfg.cauchy_test, derive_seed(cfg.seed, 0))?.0,
    };
    let standardizer = Standardizer::fit(&raw.inputs);
    let mut train = raw.clone();
    train.inputs = standardizer.apply(&raw.inputs);
    let likelihood = likelihood_for(&train);
    let search = hyperparameter_search(&train.inputs, &train.targets, likelihood, &cfg.grid, derive_seed(cfg.seed, streams::SEARCH))?;
    let la = &search.laplace;
    let sample_seed = derive_seed(cfg.seed, streams::SAMPLES);
    let samples = FixedSampleSet::draw_with(cfg.samples, la.dim(), sample_seed, cfg.sample_scheme)?;
    let inits: &[DiagInit] = if cfg.method == Method::ViDiag { &[DiagInit::Laplace, DiagInit::Small] } else { &[DiagInit::Laplace] };
    // without a test set the two diagonal starts are compared by their bound
    let mut best: Option<pipeline::Fitted> = None;
    for &d in inits {
        let f = pipeline::fit_method(
            cfg.method,
            &search.model,
            la,
            search.mode.iterations,
            search.mode.termination,
            &samples,
            cfg,
            derive_seed(cfg.seed, streams::INIT),
            d,
        )?;
        if best.as_ref().is_none_or(|b| f.elbo.unwrap_or(f64::NEG_INFINITY) > b.elbo.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(f);
        }
    }
    let best = best.expect("one initialisation");
    let feature_map = search.model.feature_map().cloned().expect("search builds RBF models");
    let mut fitted = FittedPosterior {
        method: cfg.method,
        dataset: raw.name.clone(),
        config: cfg.clone(),
        likelihood,
        feature_map,
        standardizer,
        train_inputs: train.inputs.clone(),
        train_targets: train.targets.clone(),
        laplace: la.clone(),
        params: best.params.clone(),
        posterior: best.posterior.clone(),
        log_hyper: best.log_hyper.clone(),
        elbo: f64::NAN,
        sample_seed,
        eval_seed: derive_seed(cfg.seed, streams::EVAL),
        diag_init: best.diag_init,
    };
    fitted.elbo = fitted.bound()?;
    write_json(out, "posterior.json", &fitted)?;
    write(out, "posterior.bin", fitted.sidecar_bytes())?;

    let mut curve = None;
    if raw.task == TaskKind::Regression && raw.input_dim() == 1 {
        let xs = raw.inputs.column(0);
        let (lo, hi) = (xs.min(), xs.max());
        let n = cfg.curve_points;
        let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let scaled: Vec<f64> = grid.iter().map(|x| (x - fitted.standardizer.mean[0]) / fitted.standardizer.sd[0]).collect();
        let model = fitted.model()?;
        let points = predictive_curve(&fitted.posterior, &model, &fitted.log_hyper, &scaled, cfg.eval_samples, fitted.eval_seed)?;
        let mut text = String::from("x,mean,sd,lower,upper\n");
        for (x, p) in grid.iter().zip(&points) {
            writeln!(text, "{x},{},{},{},{}", p.mean, p.sd, p.mean - 2.0 * p.sd, p.mean + 2.0 * p.sd).expect("string write");
        }
        curve = Some(write(out, "curve.csv", text)?);
    }
    Ok(FitOutput { fitted, curve })
}

