mod common;

use mvi::data::generate_cauchy_task;
use mvi::experiments::{fit_command, FittedPosterior, Method};
use mvi::util::derive_seed;

#[test]
fn fitted_posterior_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::quick_config();
    let out = fit_command(&cfg, dir.path()).unwrap();
    assert_eq!(out.fitted.method, Method::MviLr);

    let json = dir.path().join("posterior.json");
    let loaded = FittedPosterior::load(&json).unwrap();
    assert_eq!(loaded, out.fitted);
    assert_eq!(loaded.bound().unwrap().to_bits(), out.fitted.elbo.to_bits());

    let with_bin = FittedPosterior::load_with_sidecar(&json, &dir.path().join("posterior.bin")).unwrap();
    assert_eq!(with_bin, loaded);

    let (_, test) = generate_cauchy_task(cfg.cauchy_train, 200, derive_seed(cfg.seed, 0)).unwrap();
    let a = out.fitted.score(&test, 5).unwrap();
    let b = with_bin.score(&test, 5).unwrap();
    assert_eq!(a.lpd.to_bits(), b.lpd.to_bits());
    assert!(a.lpd.is_finite() && a.mse.unwrap() >= 0.0);
}

#[test]
fn fit_writes_a_curve_for_one_dimensional_regression() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit_command(&common::quick_config(), dir.path()).unwrap();
    let text = std::fs::read_to_string(out.curve.unwrap()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,mean,sd,lower,upper"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 200);
    for r in &rows {
        assert!(r[2] >= 0.0 && r[3] <= r[1] && r[1] <= r[4]);
    }
}

#[test]
fn diagonal_fit_on_classification_data() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("blobs.csv");
    common::write_blobs(&csv, 2, 20, 2, 0.5, 3);
    let cfg = mvi::experiments::RunConfig { method: Method::ViDiag, data: Some(csv), ..common::quick_config() };
    let out = fit_command(&cfg, &dir.path().join("out")).unwrap();
    assert!(out.curve.is_none());
    assert!(out.fitted.diag_init.is_some());
    assert!(out.fitted.elbo.is_finite());
}
