//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 6 7`.
//! Failures are always printed; the exit status reflects them only when
//! `ACCEPTANCE_STRICT=1` is set, so the workspace test run reports rather
//! than aborts.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use mvi::data::{generate_cauchy_task, Mixture2D};
use mvi::evaluate::{lpd, LpdKind};
use mvi::experiments::{self, Method, RunConfig};
use mvi::laplace::{fit_laplace, hyperparameter_search, GridConfig, LaplaceResult};
use mvi::models::{FeatureMap, GlmPosterior, Hyperparameters, LogDensity};
use mvi::optimize::{finite_difference_gradient, OptimConfig};
use mvi::stats::{bootstrap_median_diff_ci, sign_test, BootstrapConfig, PairedSample};
use mvi::util::{relative_error, relative_frobenius, rng_from_seed, standard_normal};
use mvi::variational::{
    elbo_estimate, elbo_gradient, entropy, fit, initialise, covariance_root, DiagInit, Family, FitConfig,
    FixedSampleSet, PosteriorGaussian, SampleScheme, Shape, VariationalParams,
};
use rand::Rng as _;

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut mvi::util::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

/// A random conjugate problem: `(model, true weights, α, β)`.
fn conjugate_problem(seed: u64, n: usize, p: usize) -> (GlmPosterior, DMatrix<f64>, f64, f64) {
    let mut rng = rng_from_seed(seed);
    let phi = normal_matrix(n, p, &mut rng);
    let alpha: f64 = rng.random_range(0.2..3.0);
    let beta: f64 = rng.random_range(0.5..10.0);
    let w = normal_matrix(p, 1, &mut rng) / alpha.sqrt();
    let y: Vec<f64> = (&phi * &w).iter().map(|m| m + standard_normal(&mut rng) / beta.sqrt()).collect();
    (GlmPosterior::gaussian_linear(phi, &y, beta).unwrap(), w, alpha, beta)
}

fn criterion_1() -> Check {
    let mut worst_mean: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    for trial in 0..10u64 {
        let mut rng = rng_from_seed(500 + trial);
        let n = rng.random_range(5..=50);
        let p = rng.random_range(1..=10);
        let (model, _, alpha, _) = conjugate_problem(trial, n, p);
        let log_hyper = vec![alpha.ln()];
        let exact = model.conjugate_posterior(&log_hyper).map_err(err)?;
        let (_, la) = fit_laplace(&model, &log_hyper, &OptimConfig::default()).map_err(err)?;
        worst_mean = worst_mean.max(relative_error(la.mode.as_slice(), exact.mean.as_slice()));
        worst_cov = worst_cov.max(relative_frobenius(&la.covariance, &exact.covariance));

        let z = FixedSampleSet::draw_with(1000, p, 900 + trial, SampleScheme::MomentMatched).map_err(err)?;
        let init = initialise(Family::MviLr, &la, trial, DiagInit::Laplace);
        let cfg = FitConfig { learn_hyper: false, ..Default::default() };
        let res = fit(&model, &la, &init, &z, &cfg).map_err(err)?;
        worst_gap = worst_gap.max((res.elbo - exact.log_evidence).abs());
    }
    let pass = worst_mean < 1e-8 && worst_cov < 1e-8 && worst_gap < 1e-3;
    Ok((pass, format!("max rel err mean {worst_mean:.1e}, cov {worst_cov:.1e} (< 1e-8); max |ELBO - ln Z| {worst_gap:.1e} (< 1e-3)")))
}

fn gradient_models() -> Vec<(&'static str, GlmPosterior, Hyperparameters)> {
    let mut rng = rng_from_seed(31);
    let x = normal_matrix(12, 1, &mut rng);
    let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.1 * standard_normal(&mut rng)).collect();
    let labels: Vec<f64> = x.iter().map(|v| f64::from(*v > 0.2)).collect();
    let mut onehot = DMatrix::zeros(12, 3);
    for i in 0..12 {
        let k = if x[(i, 0)] < -0.5 { 0 } else if x[(i, 0)] < 0.5 { 1 } else { 2 };
        onehot[(i, k)] = 1.0;
    }
    let mut map = |m| FeatureMap::new(normal_matrix(m, 1, &mut rng), 0.9).unwrap();
    let rbf = Hyperparameters::new(0.7).with_width(0.9);
    vec![
        ("cauchy", GlmPosterior::cauchy(x.clone(), &y, map(5)).unwrap(), rbf.with_gamma(0.3)),
        ("logistic", GlmPosterior::logistic(x.clone(), &labels, map(5)).unwrap(), rbf),
        ("softmax", GlmPosterior::multiclass(x.clone(), onehot, map(1)).unwrap(), rbf),
        ("gaussian", conjugate_problem(3, 12, 6).0, Hyperparameters::new(0.7)),
    ]
}

fn criterion_2() -> Check {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (mi, (_, model, hyper)) in gradient_models().into_iter().enumerate() {
        if model.dim() > 6 {
            return Err(format!("test model has P = {}", model.dim()));
        }
        let log_hyper = model.log_hyper(&hyper).map_err(err)?;
        let (_, la) = fit_laplace(&model, &log_hyper, &OptimConfig::default()).map_err(err)?;
        let z = FixedSampleSet::draw(50, model.dim(), 77 + mi as u64).map_err(err)?;
        for family in Family::ALL {
            let base = initialise(family, &la, 5, DiagInit::Laplace).pack(true);
            for point in 0..5u64 {
                let mut rng = rng_from_seed(1000 * mi as u64 + 10 * point + family as u64);
                let x: Vec<f64> = base.iter().map(|v| v + 0.1 * standard_normal(&mut rng)).collect();
                let template = initialise(family, &la, 5, DiagInit::Laplace);
                let params = template.unpack(&x, true).map_err(err)?;
                let (_, analytic) = elbo_gradient(&params, &z, &model, &la, true).map_err(err)?;
                let fd = finite_difference_gradient(
                    |x| elbo_estimate(&template.unpack(x, true).unwrap(), &z, &model, &la).unwrap_or(f64::NAN),
                    &x,
                    1e-5,
                )
                .map_err(err)?;
                worst = worst.max(relative_error(&analytic, &fd));
                cases += 1;
            }
        }
    }
    Ok((worst < 1e-5, format!("{cases} cases, max relative error {worst:.1e} (< 1e-5)")))
}

fn criterion_3(dir: &Path) -> Check {
    let report = experiments::demo2d(&RunConfig::default(), dir).map_err(err)?;
    let kl = |m: &str| report.kl[m];
    let (la, mu, eig, lr) = (kl("laplace"), kl("mvi_mu"), kl("mvi_eig"), kl("mvi_lr"));
    let gaps = [eig - lr, mu - eig, la - mu];
    let pass = gaps.iter().all(|g| *g >= -1e-3);
    Ok((
        pass,
        format!("KL laplace {la:.5}, mvi_mu {mu:.5}, mvi_eig {eig:.5}, mvi_lr {lr:.5}; min gap {:.2e} (>= -1e-3)", gaps.iter().cloned().fold(f64::INFINITY, f64::min)),
    ))
}

fn criterion_4(dir: &Path) -> Check {
    let cfg = RunConfig { splits: 20, ..Default::default() };
    let report = experiments::cauchy(&cfg, dir).map_err(err)?;
    let get = |m: Method| report.summary.iter().find(|s| s.method == m).cloned().ok_or_else(|| format!("no {m} summary"));
    let (la, eig, lr) = (get(Method::Laplace)?, get(Method::MviEig)?, get(Method::MviLr)?);
    let (la_mse, lr_mse) = (la.median_mse.unwrap_or(f64::NAN), lr.median_mse.unwrap_or(f64::NAN));
    let pass = eig.runs == 20
        && eig.median_lpd - la.median_lpd >= 0.03
        && (-0.90..=-0.60).contains(&eig.median_lpd)
        && lr_mse <= la_mse;
    Ok((
        pass,
        format!(
            "median LPD laplace {:.3}, mvi_eig {:.3} (gap {:.3} >= 0.03, in [-0.90, -0.60]); median MSE mvi_lr {lr_mse:.3} <= laplace {la_mse:.3}; {} runs",
            la.median_lpd, eig.median_lpd, eig.median_lpd - la.median_lpd, eig.runs
        ),
    ))
}

/// Bound of MVI_mu at its optimum and of each richer family warm-started there.
fn nesting_gaps(model: &dyn LogDensity, la: &LaplaceResult, z: &FixedSampleSet) -> Result<Vec<f64>, String> {
    let cfg = FitConfig::default();
    let mu = fit(model, la, &initialise(Family::MviMu, la, 0, DiagInit::Laplace), z, &cfg).map_err(err)?;
    let mut gaps = Vec::new();
    for family in [Family::MviEig, Family::MviLr] {
        let mut warm = initialise(family, la, 1, DiagInit::Laplace);
        warm.mu = mu.params.mu.clone();
        warm.log_hyper = mu.params.log_hyper.clone();
        let res = fit(model, la, &warm, z, &cfg).map_err(err)?;
        gaps.push(res.elbo - mu.elbo);
    }
    Ok(gaps)
}

fn criterion_5() -> Check {
    let mut problems: Vec<(String, Vec<f64>)> = Vec::new();

    let mix = Mixture2D::demo();
    let (_, la) = fit_laplace(&mix, &[], &OptimConfig::default()).map_err(err)?;
    let z = FixedSampleSet::draw(1000, 2, 3).map_err(err)?;
    problems.push(("mixture".into(), nesting_gaps(&mix, &la, &z)?));

    let (train, _) = generate_cauchy_task(50, 10, 8).map_err(err)?;
    let search = hyperparameter_search(&train.inputs, &train.targets, mvi::models::Likelihood::Cauchy, &GridConfig::default(), 8)
        .map_err(err)?;
    let z = FixedSampleSet::draw(1000, search.laplace.dim(), 9).map_err(err)?;
    problems.push(("cauchy".into(), nesting_gaps(&search.model, &search.laplace, &z)?));

    let mut rng = rng_from_seed(12);
    let x = normal_matrix(60, 2, &mut rng);
    let labels: Vec<f64> = (0..60).map(|i| f64::from(x[(i, 0)] + 0.5 * x[(i, 1)] + 0.3 * standard_normal(&mut rng) > 0.0)).collect();
    let targets = DMatrix::from_column_slice(60, 1, &labels);
    let grid = GridConfig { basis_counts: vec![10], ..Default::default() };
    let search = hyperparameter_search(&x, &targets, mvi::models::Likelihood::Bernoulli, &grid, 12).map_err(err)?;
    let z = FixedSampleSet::draw(1000, search.laplace.dim(), 13).map_err(err)?;
    problems.push(("logistic".into(), nesting_gaps(&search.model, &search.laplace, &z)?));

    let worst = problems.iter().flat_map(|(_, g)| g.iter().cloned()).fold(f64::INFINITY, f64::min);
    let detail = problems
        .iter()
        .map(|(name, g)| format!("{name}: eig {:+.2e}, lr {:+.2e}", g[0], g[1]))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((worst >= -1e-6, format!("bound change over mvi_mu optimum ({detail}); min {worst:.2e} (>= -1e-6)")))
}

fn criterion_6() -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = rng_from_seed(66);
    for _ in 0..100 {
        let p = rng.random_range(1..=8);
        let a = normal_matrix(p, p, &mut rng);
        let cov = &a * a.transpose() + DMatrix::identity(p, p) * rng.random_range(0.05..2.0);
        let la = LaplaceResult::from_gaussian(DVector::zeros(p), cov, vec![]).map_err(err)?;
        let u = normal_matrix(p, 1, &mut rng).column(0).into_owned();
        let v = normal_matrix(p, 1, &mut rng).column(0).into_owned();
        let params = VariationalParams { mu: DVector::zeros(p), shape: Shape::MviLr { u, v }, log_hyper: vec![] };
        let lemma = entropy(&params, &la).map_err(err)?;
        let root = covariance_root(&params, &la).root;
        let direct = 0.5 * p as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + root.determinant().abs().ln();
        worst = worst.max(((lemma - direct) / direct).abs());
    }
    Ok((worst < 1e-10, format!("100 draws, max relative error {worst:.1e} (< 1e-10)")))
}

fn criterion_7() -> Check {
    let mut patterns = 0usize;
    let mut worst: f64 = 0.0;
    for n in 1..=12usize {
        for mask in 0u32..(1 << n) {
            let a: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let paired = PairedSample::new(a, vec![0.0; n], "x", true).map_err(err)?;
            let p = sign_test(&paired).map_err(err)?;
            // enumerate every sign vector at least as extreme as this one
            let k = (mask.count_ones() as usize).min(n - mask.count_ones() as usize);
            let extreme = (0u32..(1 << n)).filter(|m| (m.count_ones() as usize).min(n - m.count_ones() as usize) <= k).count();
            let exact = extreme as f64 / (1u64 << n) as f64;
            worst = worst.max((p - exact).abs());
            patterns += 1;
        }
    }
    let mut shift_ok = true;
    let mut rng = rng_from_seed(7);
    for c in [0.0, 1.0, -2.5, 0.75, 12.0] {
        let b: Vec<f64> = (0..25).map(|_| rng.random_range(-40i32..40) as f64).collect();
        let a: Vec<f64> = b.iter().map(|v| v + c).collect();
        let ci = bootstrap_median_diff_ci(&PairedSample::new(a, b, "x", true).map_err(err)?, &BootstrapConfig::default()).map_err(err)?;
        shift_ok &= ci == (c, c);
    }
    Ok((
        worst < 1e-14 && shift_ok,
        format!("{patterns} sign patterns, max |p - enumeration| {worst:.1e}; constant-shift intervals exact: {shift_ok}"),
    ))
}

fn criterion_8() -> Check {
    let mut inside = 0;
    for trial in 0..100u64 {
        let (model, w, alpha, beta) = conjugate_problem(2000 + trial, 20, 3);
        let log_hyper = vec![alpha.ln()];
        let exact = model.conjugate_posterior(&log_hyper).map_err(err)?;
        let root = exact.covariance.clone().cholesky().ok_or("posterior covariance is not PD")?.l();
        let q = PosteriorGaussian { mean: exact.mean.clone(), root };
        let mut rng = rng_from_seed(3000 + trial);
        let phi = normal_matrix(5, 3, &mut rng);
        let y: Vec<f64> = (&phi * &w).iter().map(|m| m + standard_normal(&mut rng) / beta.sqrt()).collect();
        let test = model.with_data(phi.clone(), DMatrix::from_column_slice(5, 1, &y)).map_err(err)?;
        let closed = exact.log_predictive(&phi, &y).map_err(err)?;
        let est = lpd(&q, &test, &log_hyper, 10_000, 4000 + trial, LpdKind::Joint).map_err(err)?;
        inside += usize::from((est.value - closed).abs() <= 3.0 * est.std_error);
    }
    Ok((inside >= 95, format!("{inside}/100 trials within 3 standard errors (>= 95)")))
}

fn read_without_timings(path: &Path) -> Result<Vec<u8>, String> {
    let bytes = std::fs::read(path).map_err(err)?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(err)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings");
        }
        return Ok(v.to_string().into_bytes());
    }
    Ok(bytes)
}

fn same_outputs(a: &Path, b: &Path) -> Result<Vec<String>, String> {
    let mut differing = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(a).map_err(err)?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        if read_without_timings(&a.join(&name))? != read_without_timings(&b.join(&name))? {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    Ok(differing)
}

fn criterion_9(dir: &Path) -> Check {
    let small = RunConfig {
        splits: 2,
        samples: 200,
        eval_samples: 1000,
        grid: GridConfig { basis_counts: vec![5, 8], candidates_per_count: 3, ..Default::default() },
        bootstrap_resamples: 1000,
        ..Default::default()
    };
    std::fs::create_dir_all(dir).map_err(err)?;
    let csv = dir.join("binary.csv");
    let mut rng = rng_from_seed(99);
    let mut text = String::from("x1,x2,label\n");
    for _ in 0..40 {
        let (a, b): (f64, f64) = (standard_normal(&mut rng), standard_normal(&mut rng));
        text.push_str(&format!("{a},{b},{}\n", u8::from(a - b > 0.0)));
    }
    std::fs::write(&csv, text).map_err(err)?;

    let mut checked = Vec::new();
    let mut failures = Vec::new();
    for command in ["demo2d", "cauchy", "benchmark", "fit"] {
        let first = dir.join(format!("{command}-1"));
        let second = dir.join(format!("{command}-2"));
        let mut cfg = small.clone();
        if command == "benchmark" {
            cfg.data = Some(csv.clone());
        }
        let run = |cfg: &RunConfig, out: &Path| -> Result<&'static str, String> {
            match command {
                "demo2d" => experiments::demo2d(cfg, out).map(|_| "kl.json"),
                "cauchy" => experiments::cauchy(cfg, out).map(|_| "report.json"),
                "benchmark" => experiments::benchmark(cfg, out).map(|_| "report.json"),
                _ => experiments::fit_command(cfg, out).map(|_| "posterior.json"),
            }
            .map_err(err)
        };
        let embedded_in = run(&cfg, &first)?;
        let text = std::fs::read_to_string(first.join(embedded_in)).map_err(err)?;
        let embedded = RunConfig::from_text(&text).map_err(err)?;
        run(&embedded, &second)?;
        let diff = same_outputs(&first, &second)?;
        if !diff.is_empty() {
            failures.push(format!("{command}: {}", diff.join(",")));
        }
        checked.push(command);
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} reran from embedded config with identical outputs", checked.join(", "))
        } else {
            format!("differences: {}", failures.join("; "))
        },
    ))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = scratch.path().to_path_buf();
    // (id, name, runtime limit in seconds, check)
    type Criterion = (u32, &'static str, Option<f64>, Box<dyn Fn() -> Check>);
    let criteria: Vec<Criterion> = vec![
        (1, "conjugate oracle exactness", Some(10.0), Box::new(criterion_1)),
        (2, "ELBO gradient suite", Some(30.0), Box::new(criterion_2)),
        (3, "2D demo KL ordering", Some(120.0), Box::new({ let d = root.join("c3"); move || criterion_3(&d) })),
        (4, "Cauchy regression desk-scale", Some(900.0), Box::new({ let d = root.join("c4"); move || criterion_4(&d) })),
        (5, "family nesting monotonicity", None, Box::new(criterion_5)),
        (6, "determinant lemma entropy", None, Box::new(criterion_6)),
        (7, "statistics oracle", None, Box::new(criterion_7)),
        (8, "LPD estimator coverage", None, Box::new(criterion_8)),
        (9, "CLI determinism", None, Box::new({ let d = root.join("c9"); move || criterion_9(&d) })),
    ];
    let mut failed = Vec::new();
    for (id, name, limit, check) in &criteria {
        if !wanted.is_empty() && !wanted.contains(id) {
            continue;
        }
        let start = Instant::now();
        let (mut pass, mut detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        if let Some(limit) = limit {
            pass &= secs < *limit;
            detail.push_str(&format!("; runtime < {limit} s"));
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {verdict} {name}: {detail} [{secs:.1} s]");
        if !pass {
            failed.push(*id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
