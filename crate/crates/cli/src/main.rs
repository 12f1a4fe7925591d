use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvi::experiments::{self, RunConfig};

#[derive(Parser)]
#[command(name = "mvi", version, about = "Laplace-seeded variational posteriors: demos, benchmarks and single fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every method to the 2D Gaussian mixture and report KL divergences.
    Demo2d(Common),
    /// Seeded synthetic Cauchy-noise regression runs.
    Cauchy(Common),
    /// Benchmark on a CSV dataset over predefined or random splits.
    Benchmark(Common),
    /// Fit one method and save the posterior (and a curve for 1D regression).
    Fit(Common),
}

#[derive(Args)]
struct Common {
    /// Config file: JSON (a report's embedded config works) or key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of laplace,mvi_mu,mvi_eig,mvi_lr,vi_diag.
    #[arg(long)]
    methods: Option<String>,
    /// Method for `fit`.
    #[arg(long)]
    method: Option<String>,
    /// Fixed training sample count S.
    #[arg(long)]
    samples: Option<usize>,
    /// Predictive sample count S'.
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Number of splits (benchmark) or seeded runs (cauchy).
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// One split per line: 1-based training indices.
    #[arg(long)]
    splits_file: Option<PathBuf>,
    /// regression, binary or multiclass.
    #[arg(long)]
    task: Option<String>,
    /// Any other setting, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> mvi::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 9] = [
            ("methods", self.methods.clone()),
            ("method", self.method.clone()),
            ("samples", self.samples.map(|v| v.to_string())),
            ("eval_samples", self.eval_samples.map(|v| v.to_string())),
            ("splits", self.splits.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("splits_file", self.splits_file.as_ref().map(|p| p.display().to_string())),
            ("task", self.task.clone()),
        ];
        for (key, value) in flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))) {
            cfg.set(key, value)?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| mvi::Error::Config(format!("--set expects KEY=VALUE, got '{pair}'")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> mvi::Result<()> {
    let (name, common) = match &cli.command {
        Command::Demo2d(c) => ("demo2d", c),
        Command::Cauchy(c) => ("cauchy", c),
        Command::Benchmark(c) => ("benchmark", c),
        Command::Fit(c) => ("fit", c),
    };
    let cfg = common.resolve()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
    match cli.command {
        Command::Demo2d(_) => {
            let report = experiments::demo2d(&cfg, &out)?;
            for (method, kl) in &report.kl {
                println!("{method:>8}  KL = {kl:.6}");
            }
        }
        Command::Cauchy(_) | Command::Benchmark(_) => {
            let report = if name == "cauchy" { experiments::cauchy(&cfg, &out)? } else { experiments::benchmark(&cfg, &out)? };
            print!("{}", report.table_csv());
            if !report.skipped.is_empty() {
                eprintln!("{} split(s) skipped:", report.skipped.len());
                for s in &report.skipped {
                    eprintln!("  split {} (seed {}): {}", s.split, s.seed, s.reason);
                }
            }
        }
        Command::Fit(_) => {
            let res = experiments::fit_command(&cfg, &out)?;
            println!("{} on {}: bound {:.6}", res.fitted.method, res.fitted.dataset, res.fitted.elbo);
            if let Some(curve) = res.curve {
                println!("curve written to {}", curve.display());
            }
        }
    }
    eprintln!("outputs in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
