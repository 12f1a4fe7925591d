#![allow(dead_code)]

use std::path::Path;

use mvi::experiments::RunConfig;
use mvi::laplace::GridConfig;
use mvi::util::{rng_from_seed, standard_normal};

/// A configuration small enough for debug-speed integration tests.
pub fn quick_config() -> RunConfig {
    RunConfig {
        splits: 3,
        samples: 200,
        eval_samples: 1000,
        vi_iters: 300,
        grid: GridConfig { basis_counts: vec![5, 8], candidates_per_count: 3, final_iters: 300, ..Default::default() },
        bootstrap_resamples: 1000,
        ..Default::default()
    }
}

/// Gaussian blobs, one per class, with integer labels in the last column.
pub fn write_blobs(path: &Path, classes: usize, per_class: usize, dims: usize, spread: f64, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let mut text = (0..dims).map(|d| format!("x{d}")).collect::<Vec<_>>().join(",") + ",label\n";
    for i in 0..classes * per_class {
        let k = i % classes;
        for d in 0..dims {
            let centre = if d % classes == k { 3.0 } else { 0.0 };
            text.push_str(&format!("{},", centre + spread * standard_normal(&mut rng)));
        }
        text.push_str(&format!("{k}\n"));
    }
    std::fs::write(path, text).unwrap();
}
