//! Configurable simulation studies comparing the estimators.
//!
//! A study runs every configured method on each (region, replicate) cell,
//! tunes hyperparameters by cross-validation or forward validation, and
//! writes per-cell estimates and aggregated error tables.

pub mod config;
pub mod io;
pub mod run;
pub mod scan;
pub mod synth;

pub use config::{DelaySource, ExperimentConfig, MethodName, NoiseKind, RegionConfig};
pub use run::{cell_seed, run_cell, run_experiment, run_study, CellId, CellResult, MethodOutcome, RunReport};
pub use scan::{delay_mean_scan, ScanResult};
pub use synth::{region_data, RegionData};
