//! Aggregated benchmark reports and their CSV table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{best_by_median, significance_decision, BootstrapConfig, PairedSample, Significance};
use crate::util::{derive_seed, median};

use super::config::{Method, RunConfig};
use super::pipeline::Record;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub median_lpd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_mse: Option<f64>,
    /// Best median LPD among the methods.
    pub best_lpd: bool,
    /// Best median error rate or MSE.
    pub best_secondary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceBlock {
    pub lpd: Significance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<Significance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub split: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub split_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub command: String,
    pub dataset: String,
    pub config: RunConfig,
    pub methods: Vec<Method>,
    /// Base seed of every split, by split index.
    pub seeds: Vec<u64>,
    pub records: Vec<Record>,
    pub skipped: Vec<Skipped>,
    pub summary: Vec<MethodSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<SignificanceBlock>,
    /// Wall-clock measurements; the only fields that differ between reruns.
    pub timings: Timings,
}

fn secondary_name(records: &[Record]) -> Option<&'static str> {
    let first = records.first()?;
    if first.error_rate.is_some() {
        Some("error_rate")
    } else if first.mse.is_some() {
        Some("mse")
    } else {
        None
    }
}

fn secondary(r: &Record) -> Option<f64> {
    r.error_rate.or(r.mse)
}

/// Per-method values of a metric, ordered by split.
fn columns(records: &[Record], methods: &[Method], metric: impl Fn(&Record) -> Option<f64>) -> Vec<Vec<f64>> {
    methods
        .iter()
        .map(|m| {
            let mut rows: Vec<&Record> = records.iter().filter(|r| r.method == *m).collect();
            rows.sort_by_key(|r| r.split);
            rows.into_iter().filter_map(&metric).collect()
        })
        .collect()
}

fn summarise(records: &[Record], methods: &[Method]) -> Vec<MethodSummary> {
    let lpd = columns(records, methods, |r| Some(r.lpd));
    let sec = columns(records, methods, secondary);
    let best_lpd = best_by_median(&lpd, true);
    let best_sec = best_by_median(&sec, false);
    let name = secondary_name(records);
    methods
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let med = |v: &Vec<f64>| (!v.is_empty()).then(|| median(v));
            let sec_median = med(&sec[i]);
            MethodSummary {
                method,
                runs: lpd[i].len(),
                median_lpd: med(&lpd[i]).unwrap_or(f64::NAN),
                median_error_rate: if name == Some("error_rate") { sec_median } else { None },
                median_mse: if name == Some("mse") { sec_median } else { None },
                best_lpd: best_lpd == Some(i),
                best_secondary: best_sec == Some(i),
            }
        })
        .collect()
}

fn decide(
    values: &[Vec<f64>],
    methods: &[Method],
    metric: &str,
    higher_is_better: bool,
    cfg: &RunConfig,
    stream: u64,
) -> Result<Option<Significance>> {
    let Some(best) = best_by_median(values, higher_is_better) else { return Ok(None) };
    let mut others = Vec::new();
    for (i, m) in methods.iter().enumerate() {
        if i != best {
            others.push((m.name().to_owned(), PairedSample::new(values[best].clone(), values[i].clone(), metric, higher_is_better)?));
        }
    }
    let boot = BootstrapConfig { resamples: cfg.bootstrap_resamples, level: 0.95, seed: derive_seed(cfg.seed, stream) };
    let mut sig = significance_decision(methods[best].name(), &others, cfg.alpha, &boot)?;
    sig.metric = metric.to_owned();
    Ok(Some(sig))
}

impl BenchmarkReport {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        command: &str,
        dataset: &str,
        config: &RunConfig,
        methods: &[Method],
        seeds: Vec<u64>,
        mut records: Vec<Record>,
        skipped: Vec<Skipped>,
        timings: Timings,
    ) -> Result<Self> {
        records.sort_by_key(|r| (r.split, methods.iter().position(|m| *m == r.method)));
        let summary = summarise(&records, methods);
        let lpd = columns(&records, methods, |r| Some(r.lpd));
        let significance = if methods.len() >= 2 && lpd.iter().all(|v| !v.is_empty()) {
            let lpd_sig = decide(&lpd, methods, "lpd", true, config, 1_000)?.expect("methods are non-empty");
            let sec = match secondary_name(&records) {
                Some(name) => decide(&columns(&records, methods, secondary), methods, name, false, config, 1_001)?,
                None => None,
            };
            Some(SignificanceBlock { lpd: lpd_sig, secondary: sec })
        } else {
            None
        };
        Ok(Self {
            command: command.to_owned(),
            dataset: dataset.to_owned(),
            config: config.clone(),
            methods: methods.to_vec(),
            seeds,
            records,
            skipped,
            summary,
            significance,
            timings,
        })
    }

    /// Recomputes the medians from the stored records.
    pub fn check_consistency(&self) -> Result<()> {
        let fresh = summarise(&self.records, &self.methods);
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => same(x, y),
            (None, None) => true,
            _ => false,
        };
        for (a, b) in fresh.iter().zip(&self.summary) {
            if a.method != b.method
                || !same(a.median_lpd, b.median_lpd)
                || !opt(a.median_error_rate, b.median_error_rate)
                || !opt(a.median_mse, b.median_mse)
            {
                return Err(Error::Format(format!("stored medians of {} disagree with its records", b.method)));
            }
        }
        if fresh.len() != self.summary.len() {
            return Err(Error::Format("summary does not list every method".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let report: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        report.check_consistency()?;
        Ok(report)
    }

    /// One row per method: medians, best markers (`*`) and the significance bullet.
    pub fn table_csv(&self) -> String {
        let sec_name = secondary_name(&self.records).unwrap_or("secondary");
        let mut out = format!("method,runs,median_lpd,median_{sec_name},best_lpd,best_{sec_name},significant_lpd,significant_{sec_name}\n");
        for s in &self.summary {
            let flag = |sig: Option<&Significance>, best: bool| match sig {
                Some(sig) if best && sig.significant => "•",
                _ => "",
            };
            let block = self.significance.as_ref();
            let sec = s.median_error_rate.or(s.median_mse).map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.method,
                s.runs,
                s.median_lpd,
                sec,
                if s.best_lpd { "*" } else { "" },
                if s.best_secondary { "*" } else { "" },
                flag(block.map(|b| &b.lpd), s.best_lpd),
                flag(block.and_then(|b| b.secondary.as_ref()), s.best_secondary),
            ));
        }
        out
    }
}
