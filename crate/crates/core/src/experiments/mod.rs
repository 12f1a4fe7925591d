//! Experiment drivers behind the command-line tool.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod sidecar;

pub use commands::{benchmark, cauchy, demo2d, fit_command, Demo2dReport, FitOutput, FittedPosterior};
pub use config::{parse_methods, Method, RunConfig};
pub use report::BenchmarkReport;
