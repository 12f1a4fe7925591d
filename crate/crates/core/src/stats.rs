//! Paired comparisons of per-split performances: exact sign test, bootstrap
//! interval on the difference of medians, and the combined decision.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{median, quantile_sorted};

/// Per-split performances of two methods on the same splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub metric: String,
    pub higher_is_better: bool,
}

impl PairedSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>, metric: impl Into<String>, higher_is_better: bool) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::InvalidArgument(format!(
                "paired sample needs equal non-zero lengths, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("paired sample contains non-finite values".into()));
        }
        Ok(Self { a, b, metric: metric.into(), higher_is_better })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// `P(X ≤ k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_half_cdf(k: usize, n: usize) -> f64 {
    if k >= n {
        return 1.0;
    }
    if n <= 62 {
        let mut c: u64 = 1;
        let mut total: u64 = 0;
        for i in 0..=k {
            total += c;
            c = c * (n - i) as u64 / (i + 1) as u64;
        }
        return total as f64 / (1u64 << n) as f64;
    }
    let ln2 = std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for i in 0..=k {
        total += (ln_c - n as f64 * ln2).exp();
        ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    total.min(1.0)
}

/// Two-sided exact sign test on `a − b`; zero differences are discarded.
pub fn sign_test(paired: &PairedSample) -> Result<f64> {
    let mut pos = 0;
    let mut neg = 0;
    for (x, y) in paired.a.iter().zip(&paired.b) {
        if x > y {
            pos += 1;
        } else if x < y {
            neg += 1;
        }
    }
    let n = pos + neg;
    if n == 0 {
        return Err(Error::InvalidArgument("sign test has no information: every difference is zero".into()));
    }
    Ok((2.0 * binomial_half_cdf(pos.min(neg), n)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 10_000, level: 0.95, seed: 0 }
    }
}

/// Percentile bootstrap interval for `median(a) − median(b)` under paired resampling.
pub fn bootstrap_median_diff_ci(paired: &PairedSample, config: &BootstrapConfig) -> Result<(f64, f64)> {
    if config.resamples < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 resamples, got {}", config.resamples)));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {}", config.level)));
    }
    let n = paired.len();
    let mut stats: Vec<f64> = (0..config.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            let mut xa = Vec::with_capacity(n);
            let mut xb = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                xa.push(paired.a[i]);
                xb.push(paired.b[i]);
            }
            median(&xa) - median(&xb)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    Ok((quantile_sorted(&stats, tail), quantile_sorted(&stats, 1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub competitor: String,
    pub pvalue: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub best: String,
    pub metric: String,
    pub alpha: f64,
    pub comparisons: Vec<Comparison>,
    pub significant: bool,
}

/// Index of the method with the best median (first wins ties).
pub fn best_by_median(values: &[Vec<f64>], higher_is_better: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let m = median(v);
        let better = match best {
            None => true,
            Some((_, b)) => if higher_is_better { m > b } else { m < b },
        };
        if better {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i)
}

/// The best method is significant when every comparison both rejects the
/// sign test at `alpha` and has a bootstrap interval excluding zero.
///
/// Each `others[i]` has the best method's values in `a`.
pub fn significance_decision(
    best: &str,
    others: &[(String, PairedSample)],
    alpha: f64,
    bootstrap: &BootstrapConfig,
) -> Result<Significance> {
    let mut comparisons = Vec::with_capacity(others.len());
    for (name, paired) in others {
        // a zero-information sign test cannot reject
        let pvalue = sign_test(paired).unwrap_or(1.0);
        let (ci_lo, ci_hi) = bootstrap_median_diff_ci(paired, bootstrap)?;
        let excludes_zero = ci_lo > 0.0 || ci_hi < 0.0;
        comparisons.push(Comparison {
            competitor: name.clone(),
            pvalue,
            ci_lo,
            ci_hi,
            significant: pvalue < alpha && excludes_zero,
        });
    }
    let metric = others.first().map(|(_, p)| p.metric.clone()).unwrap_or_default();
    let significant = !comparisons.is_empty() && comparisons.iter().all(|c| c.significant);
    Ok(Significance { best: best.to_owned(), metric, alpha, comparisons, significant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paired(a: Vec<f64>, b: Vec<f64>) -> PairedSample {
        PairedSample::new(a, b, "lpd", true).unwrap()
    }

    fn from_signs(pos: usize, neg: usize, zero: usize) -> PairedSample {
        let mut a = vec![1.0; pos];
        a.extend(vec![-1.0; neg]);
        a.extend(vec![0.0; zero]);
        let b = vec![0.0; a.len()];
        paired(a, b)
    }

    #[test]
    fn sign_test_examples() {
        assert!((sign_test(&from_signs(10, 0, 0)).unwrap() - 2f64.powi(-9)).abs() < 1e-15);
        assert_eq!(sign_test(&from_signs(5, 5, 0)).unwrap(), 1.0);
        assert!((sign_test(&from_signs(8, 2, 0)).unwrap() - 0.109375).abs() < 1e-15);
        assert_eq!(sign_test(&from_signs(8, 2, 7)).unwrap(), sign_test(&from_signs(8, 2, 0)).unwrap());
        assert!(sign_test(&from_signs(0, 0, 3)).is_err());
    }

    #[test]
    fn large_n_cdf_matches_the_exact_branch() {
        // n = 62 runs the integer path; compare with the log-space recurrence
        let n = 62;
        let exact = binomial_half_cdf(25, n);
        let ln2 = std::f64::consts::LN_2;
        let mut ln_c = 0.0;
        let mut approx = 0.0;
        for i in 0..=25 {
            approx += (ln_c - n as f64 * ln2).exp();
            ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
        assert!((exact - approx).abs() < 1e-12);
        assert!((binomial_half_cdf(100, 200) - 0.5).abs() < 0.03);
    }

    #[test]
    fn pairs_must_match() {
        assert!(PairedSample::new(vec![], vec![], "x", true).is_err());
        assert!(PairedSample::new(vec![1.0], vec![1.0, 2.0], "x", true).is_err());
        assert!(PairedSample::new(vec![f64::NAN], vec![1.0], "x", true).is_err());
    }

    #[test]
    fn bootstrap_of_equal_and_shifted_pairs() {
        let b: Vec<f64> = (0..15).map(|i| (i * 7 % 11) as f64).collect();
        let cfg = BootstrapConfig::default();
        assert_eq!(bootstrap_median_diff_ci(&paired(b.clone(), b.clone()), &cfg).unwrap(), (0.0, 0.0));
        let a: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
        assert_eq!(bootstrap_median_diff_ci(&paired(a, b), &cfg).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn bootstrap_is_seeded() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let p = paired(a, b);
        let cfg = BootstrapConfig { resamples: 2000, level: 0.9, seed: 4 };
        assert_eq!(bootstrap_median_diff_ci(&p, &cfg).unwrap(), bootstrap_median_diff_ci(&p, &cfg).unwrap());
        let other = BootstrapConfig { seed: 5, ..cfg };
        assert_ne!(bootstrap_median_diff_ci(&p, &cfg).unwrap(), bootstrap_median_diff_ci(&p, &other).unwrap());
        assert!(bootstrap_median_diff_ci(&p, &BootstrapConfig { resamples: 999, ..cfg }).is_err());
        assert!(bootstrap_median_diff_ci(&p, &BootstrapConfig { level: 1.0, ..cfg }).is_err());
    }

    #[test]
    fn bootstrap_detects_a_unit_shift() {
        use crate::util::{rng_from_seed, standard_normal};
        let cfg = BootstrapConfig { resamples: 1000, level: 0.95, seed: 0 };
        let mut excluded = 0;
        for rep in 0..100 {
            let mut rng = rng_from_seed(1000 + rep);
            let a: Vec<f64> = (0..100).map(|_| 1.0 + standard_normal(&mut rng)).collect();
            let b: Vec<f64> = (0..100).map(|_| standard_normal(&mut rng)).collect();
            let (lo, hi) = bootstrap_median_diff_ci(&paired(a, b), &BootstrapConfig { seed: rep, ..cfg }).unwrap();
            excluded += usize::from(lo > 0.0 || hi < 0.0);
        }
        assert!(excluded >= 95, "{excluded}");
    }

    #[test]
    fn decision_examples() {
        let cfg = BootstrapConfig { resamples: 1000, ..Default::default() };
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let same = significance_decision("m", &[("o".into(), paired(x.clone(), x.clone()))], 0.05, &cfg).unwrap();
        assert!(!same.significant);
        let up: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let dom = significance_decision("m", &[("o".into(), paired(up.clone(), x.clone())), ("p".into(), paired(up, x))], 0.05, &cfg)
            .unwrap();
        assert!(dom.significant);
        assert!(dom.comparisons.iter().all(|c| c.significant));
    }

    #[test]
    fn sign_test_can_reject_while_the_interval_covers_zero() {
        // ten tiny wins and two large losses sitting in the middle of the ranks
        let b: Vec<f64> = (0..12).map(|i| 10.0 * i as f64).collect();
        let mut a: Vec<f64> = b.iter().map(|v| v + 0.1).collect();
        a[5] = -10.0;
        a[6] = -5.0;
        let p = paired(a, b);
        let pvalue = sign_test(&p).unwrap();
        let expect = 2.0 * (1.0 + 12.0 + 66.0) / 4096.0;
        assert!((pvalue - expect).abs() < 1e-15 && pvalue < 0.05);
        let cfg = BootstrapConfig::default();
        let (lo, hi) = bootstrap_median_diff_ci(&p, &cfg).unwrap();
        assert!(lo <= 0.0 && hi >= 0.0, "[{lo}, {hi}]");
        assert!(!significance_decision("m", &[("o".into(), p)], 0.05, &cfg).unwrap().significant);
    }

    #[test]
    fn best_median_respects_orientation() {
        let v = vec![vec![1.0, 2.0, 3.0], vec![0.0, 5.0, 6.0], vec![2.0, 2.0, 2.0]];
        assert_eq!(best_by_median(&v, true), Some(1));
        assert_eq!(best_by_median(&v, false), Some(0));
        assert_eq!(best_by_median(&[], true), None);
    }

    proptest! {
        #[test]
        fn sign_test_depends_only_on_signs(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(a.iter().zip(&b).any(|(x, y)| x != y));
            let p = sign_test(&paired(a.clone(), b.clone())).unwrap();
            let f = |v: &f64| v.powi(3) + 2.0 * v;
            let q = sign_test(&paired(a.iter().map(f).collect(), b.iter().map(f).collect())).unwrap();
            prop_assert_eq!(p, q);
            prop_assert!(p > 0.0 && p <= 1.0);
        }

        #[test]
        fn interval_is_ordered_and_shifts_with_a(
            pairs in prop::collection::vec((-50i32..50, -50i32..50), 2..25),
            shift in -20i32..20,
            seed in 0u64..1000,
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let cfg = BootstrapConfig { resamples: 1000, level: 0.9, seed };
            let (lo, hi) = bootstrap_median_diff_ci(&paired(a.clone(), b.clone()), &cfg).unwrap();
            prop_assert!(lo <= hi);
            let moved: Vec<f64> = a.iter().map(|v| v + shift as f64).collect();
            let (lo2, hi2) = bootstrap_median_diff_ci(&paired(moved, b), &cfg).unwrap();
            prop_assert!((lo2 - lo - shift as f64).abs() < 1e-9);
            prop_assert!((hi2 - hi - shift as f64).abs() < 1e-9);
        }
    }
}
