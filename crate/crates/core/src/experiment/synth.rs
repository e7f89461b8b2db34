//! Region inputs: primary counts, ground-truth rates and delay.
//!
//! Regions without input files get a deterministic synthetic primary series
//! (four epidemic waves) and a four-variant severity mixture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::config::{DelaySource, ExperimentConfig, RegionConfig};
use super::{io, scan};
use crate::delay::{discretized_gamma, DelayDistribution, SD_TO_MEAN};
use crate::error::{Error, Result};
use crate::series::{CountSeries, SeverityCurve};
use crate::simulate::{dominance_severities, variant_hfr_curve, VariantProfile};

/// `(center day, width in days, relative height)` of each synthetic wave.
const WAVES: [(f64, f64, f64); 4] = [(150.0, 28.0, 0.55), (250.0, 30.0, 1.0), (390.0, 35.0, 0.75), (525.0, 22.0, 0.9)];
const BASELINE: f64 = 0.04;
/// Relative amplitude of the day-of-week pattern in admissions.
const WEEKLY_AMPLITUDE: f64 = 0.08;
/// `(day at which the successor variant reaches half of circulation,
/// logistic scale in days)` for each takeover.
const TRANSITIONS: [(f64, f64); 3] = [(200.0, 7.0), (330.0, 6.0), (490.0, 4.0)];
pub const DEFAULT_SEVERITIES: [(&str, f64); 4] =
    [("original", 0.18), ("alpha", 0.12), ("delta", 0.15), ("omicron", 0.06)];

/// Inputs shared by every replicate of one region.
#[derive(Debug, Clone)]
pub struct RegionData {
    pub config: RegionConfig,
    pub primary: CountSeries,
    pub truth: SeverityCurve,
    pub delay: DelayDistribution,
    /// Secondary counts read from file, when supplied.
    pub observed: Option<CountSeries>,
}

/// FNV-1a, so that synthetic inputs depend on the region name alone.
pub fn name_seed(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Expected primary counts per day for a region of the given peak scale.
pub fn wave_intensity(scale: f64, days: usize) -> Vec<f64> {
    (0..days)
        .map(|t| {
            let t = t as f64;
            let waves: f64 = WAVES
                .iter()
                .map(|(c, w, h)| h * (-0.5 * ((t - c) / w).powi(2)).exp())
                .sum();
            let weekly = 1.0 + WEEKLY_AMPLITUDE * (2.0 * std::f64::consts::PI * t / 7.0).cos();
            scale * (BASELINE + waves) * weekly
        })
        .collect()
}

/// Synthetic primary counts: Poisson draws around [`wave_intensity`].
pub fn synthetic_primary(region: &RegionConfig, cfg: &ExperimentConfig) -> Result<CountSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(&region.name));
    let values = wave_intensity(region.scale, cfg.days)
        .into_iter()
        .map(|m| {
            let draw = Poisson::new(m.max(1e-9)).map_err(|e| Error::Parameter(e.to_string()))?;
            Ok(draw.sample(&mut rng) as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountSeries::new(cfg.start, values))
}

fn logistic(t: f64, (center, scale): (f64, f64)) -> f64 {
    1.0 / (1.0 + (-(t - center) / scale).exp())
}

/// Circulation shares of four successive variants over `days` days.
pub fn synthetic_proportions(days: usize) -> [Vec<f64>; 4] {
    let mut out: [Vec<f64>; 4] = Default::default();
    for t in 0..days {
        let s: Vec<f64> = TRANSITIONS.iter().map(|c| logistic(t as f64, *c)).collect();
        let shares = [1.0 - s[0], s[0] - s[1], s[1] - s[2], s[2]];
        for (v, c) in out.iter_mut().zip(shares) {
            v.push(c.max(0.0));
        }
    }
    out
}

fn default_profiles(days: usize, factor: f64) -> Vec<VariantProfile> {
    DEFAULT_SEVERITIES
        .iter()
        .zip(synthetic_proportions(days))
        .map(|((name, sev), proportions)| VariantProfile {
            name: name.to_string(),
            severity: sev * factor,
            proportions,
        })
        .collect()
}

/// Loads or synthesizes the inputs of one region.
pub fn region_data(region: &RegionConfig, cfg: &ExperimentConfig) -> Result<RegionData> {
    let primary = match &region.primary {
        Some(path) => io::read_counts(path)?,
        None => synthetic_primary(region, cfg)?,
    };
    let observed = region.secondary.as_ref().map(|p| io::read_counts(p)).transpose()?;
    let profiles = match &region.variants {
        Some(path) => {
            let severities = region.severities.as_deref().unwrap_or_default();
            let mut profiles = io::read_variants(path, primary.origin(), primary.len(), severities)?;
            if severities.is_empty() {
                let y = observed
                    .as_ref()
                    .ok_or_else(|| Error::Validation(format!("region {} needs severities or secondary counts", region.name)))?;
                let derived = dominance_severities(&primary, y, &profiles)?;
                for (v, (_, s)) in profiles.iter_mut().zip(derived) {
                    v.severity = s;
                }
            }
            profiles
        }
        None => default_profiles(primary.len(), region.severity_factor),
    };
    let truth = variant_hfr_curve(primary.origin(), &profiles)?;
    let mean = match (cfg.delay_source, &observed) {
        (DelaySource::Scan, Some(y)) => scan::delay_mean_scan(&primary, y, cfg.scan_max_lag)?.best_lag as f64,
        _ => region.delay_mean,
    };
    let delay = discretized_gamma(mean.max(0.5), SD_TO_MEAN * mean.max(0.5), cfg.delay_support)?;
    Ok(RegionData {
        config: region.clone(),
        primary,
        truth,
        delay,
        observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn proportions_sum_to_one() {
        let p = synthetic_proportions(600);
        for t in 0..600 {
            let s: f64 = p.iter().map(|v| v[t]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p[0][0] > 0.99 && p[3][599] > 0.99);
    }

    #[test]
    fn synthetic_region_is_deterministic() {
        let cfg = ExperimentConfig::from_text("days = 300", Path::new(".")).unwrap();
        let a = region_data(&cfg.regions[0], &cfg).unwrap();
        let b = region_data(&cfg.regions[0], &cfg).unwrap();
        assert_eq!(a.primary, b.primary);
        assert_eq!(a.primary.len(), 300);
        assert_eq!(a.truth.len(), 300);
        assert!(a.truth.values().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(a.delay.support(), 60);
        // mass of (k, k+1] sits on lag k and the tail past d is dropped
        assert!((12.5..14.0).contains(&a.delay.mean()), "{}", a.delay.mean());
    }
}
