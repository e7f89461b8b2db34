//! Delay distributions between primary and secondary events.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};

/// Default support length in days.
pub const DEFAULT_SUPPORT: usize = 60;

/// Standard deviation as a fraction of the mean for the gamma delays used in
/// simulation and misspecification sweeps.
pub const SD_TO_MEAN: f64 = 0.9;

const MASS_TOL: f64 = 1e-12;

/// Probability mass over lags `0..=d`, optionally varying with the date of
/// the primary event. Dates without a table entry use the shared mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDistribution {
    mass: Vec<f64>,
    table: BTreeMap<NaiveDate, Vec<f64>>,
    gamma: Option<GammaParams>,
}

/// Continuous gamma parameters a discretized distribution was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub mean: f64,
    pub sd: f64,
}

fn check_mass(mass: &[f64]) -> Result<()> {
    if mass.is_empty() {
        return Err(Error::Parameter("delay mass must have at least one lag".into()));
    }
    if let Some(v) = mass.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Parameter(format!("delay mass entry {v} is negative or non-finite")));
    }
    let total: f64 = mass.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::Parameter(format!("delay mass sums to {total}, not 1")));
    }
    Ok(())
}

impl DelayDistribution {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        check_mass(&mass)?;
        Ok(Self {
            mass,
            table: BTreeMap::new(),
            gamma: None,
        })
    }

    /// All probability on a single lag.
    pub fn point_mass(lag: usize) -> Self {
        let mut mass = vec![0.0; lag + 1];
        mass[lag] = 1.0;
        Self::new(mass).expect("point mass is valid")
    }

    /// Attach a per-date mass vector; all vectors must share the support.
    pub fn with_entry(mut self, date: NaiveDate, mass: Vec<f64>) -> Result<Self> {
        check_mass(&mass)?;
        if mass.len() != self.mass.len() {
            return Err(Error::Dimension(format!(
                "per-date delay has {} lags, shared mass has {}",
                mass.len(),
                self.mass.len()
            )));
        }
        self.table.insert(date, mass);
        Ok(self)
    }

    /// Maximum lag `d`.
    pub fn support(&self) -> usize {
        self.mass.len() - 1
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Mass vector for primary events on `date`.
    pub fn mass_at(&self, date: NaiveDate) -> &[f64] {
        self.table.get(&date).unwrap_or(&self.mass)
    }

    pub fn is_time_varying(&self) -> bool {
        !self.table.is_empty()
    }

    pub fn gamma_params(&self) -> Option<GammaParams> {
        self.gamma
    }

    /// Mean lag of the shared mass.
    pub fn mean(&self) -> f64 {
        self.mass.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// Cumulative mass `F(k) = sum_{j <= k} pi_j` of the shared vector.
    pub fn cdf(&self, k: usize) -> f64 {
        self.mass.iter().take(k + 1).sum::<f64>().min(1.0)
    }
}

/// Gamma delay with the given mean and standard deviation, discretized as
/// `pi_k ∝ F(k+1) - F(k)` on `0..=d` and renormalized after truncation.
pub fn discretized_gamma(mean: f64, sd: f64, d: usize) -> Result<DelayDistribution> {
    if !(mean > 0.0 && mean.is_finite()) || !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::Parameter(format!(
            "gamma delay needs positive mean and sd, got mean={mean}, sd={sd}"
        )));
    }
    if d < 1 {
        return Err(Error::Parameter("gamma delay support must be at least 1 day".into()));
    }
    let shape = (mean / sd).powi(2);
    let rate = mean / (sd * sd);
    let gamma = Gamma::new(shape, rate)
        .map_err(|e| Error::Parameter(format!("gamma(shape={shape}, rate={rate}): {e}")))?;
    // F(0) = 0: no mass below zero.
    let mut prev = 0.0;
    let mut mass = Vec::with_capacity(d + 1);
    for k in 0..=d {
        let next = gamma.cdf((k + 1) as f64);
        mass.push((next - prev).max(0.0));
        prev = next;
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(format!(
            "gamma(mean={mean}, sd={sd}) puts no mass on 0..={d}"
        )));
    }
    mass.iter_mut().for_each(|m| *m /= total);
    let mut out = DelayDistribution::new(mass)?;
    out.gamma = Some(GammaParams { mean, sd });
    Ok(out)
}

/// Working delay whose mean is shifted by `mean_offset` days, with standard
/// deviation tied to the new mean.
pub fn misspecify_delay(delay: &DelayDistribution, mean_offset: f64) -> Result<DelayDistribution> {
    let base = delay.gamma_params().map(|g| g.mean).unwrap_or_else(|| delay.mean());
    let mean = base + mean_offset;
    if mean <= 0.0 {
        return Err(Error::Parameter(format!(
            "shifted delay mean {mean} is not positive (base {base}, offset {mean_offset})"
        )));
    }
    discretized_gamma(mean, SD_TO_MEAN * mean, delay.support())
}
