//! Experiment runner for population-dependent mean-field control: config
//! resolution, training runs, sweeps and CSV artifacts.

pub mod artifacts;
pub mod config;
pub mod run;
pub mod slice;

pub use config::{load, preset, ConfigError, ExperimentConfig, Overrides, ProblemKind, Scale};
pub use run::{ablate, run, RunError, RunSummary};
