//! Estimation of time-varying severity rates from primary and secondary
//! event counts.
//!
//! Secondary events (deaths, say) are modeled as delayed, thinned copies of
//! primary events (hospitalizations). The library recovers the thinning
//! probability over time by Poisson deconvolution with a trend filtering
//! penalty, and provides the ratio baselines, tuning procedures, simulators
//! and data cleaning needed to compare estimators.

pub mod band;
pub mod clean;
pub mod delay;
pub mod error;
pub mod experiment;
pub mod model;
pub mod operators;
pub mod ratios;
pub mod series;
pub mod simulate;
pub mod smooth;
pub mod solver;
pub mod tune;

pub use delay::{discretized_gamma, misspecify_delay, DelayDistribution};
pub use error::{Error, Result};
pub use model::{backward_rate, correlation_bound, expected_secondary, poisson_tv_bound, Moments};
pub use operators::{diff_matrix, ConvolutionOperator, DifferenceOperator};
pub use series::{CountSeries, SeverityCurve};
pub use solver::{
    lambda_max_bound, solve_gaussian, solve_realtime, solve_retrospective, DeconvProblem, DeconvSpec, FitResult,
    LossKind,
};
