//! Ground-truth severity curves and synthetic secondary counts.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution};

use crate::delay::DelayDistribution;
use crate::error::{Error, Result};
use crate::model::expected_secondary;
use crate::series::{CountSeries, SeverityCurve};
use crate::smooth::smooth_gcv;

pub use crate::delay::misspecify_delay;

const PROPORTION_TOL: f64 = 1e-9;

/// One variant: its severity rate and its share of circulation per day.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantProfile {
    pub name: String,
    pub severity: f64,
    pub proportions: Vec<f64>,
}

/// Mixture `p_t = sum_v c_t^v p^v` on the axis starting at `origin`.
pub fn variant_hfr_curve(origin: NaiveDate, profiles: &[VariantProfile]) -> Result<SeverityCurve> {
    let Some(first) = profiles.first() else {
        return Err(Error::Validation("no variant profiles".into()));
    };
    let n = first.proportions.len();
    for v in profiles {
        if v.proportions.len() != n {
            return Err(Error::Dimension(format!(
                "variant {} has {} proportions, expected {n}",
                v.name,
                v.proportions.len()
            )));
        }
        if !(0.0..=1.0).contains(&v.severity) {
            return Err(Error::Validation(format!("variant {} severity {} outside [0, 1]", v.name, v.severity)));
        }
    }
    let mut values = Vec::with_capacity(n);
    for t in 0..n {
        let mut total = 0.0;
        let mut p = 0.0;
        for v in profiles {
            let c = v.proportions[t];
            if !(-PROPORTION_TOL..=1.0 + PROPORTION_TOL).contains(&c) {
                return Err(Error::Validation(format!("proportion {c} of {} at day {t}", v.name)));
            }
            total += c;
            p += c * v.severity;
        }
        if (total - 1.0).abs() > PROPORTION_TOL {
            return Err(Error::Validation(format!("variant proportions sum to {total} at day {t}")));
        }
        values.push((p / total).clamp(0.0, 1.0));
    }
    SeverityCurve::new(origin, values)
}

/// Noise model for secondary counts given the primary history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    PoissonBinomial,
    /// Variance inflated by `beta` relative to the Poisson-binomial variance.
    BetaBinomial { beta: f64 },
}

fn check_inputs(x: &CountSeries, delay: &DelayDistribution, p: &SeverityCurve) -> Result<()> {
    for (j, &v) in p.values().iter().enumerate() {
        let mass = delay.mass_at(p.date(j));
        if let Some(q) = mass.iter().map(|m| m * v).find(|q| *q > 1.0) {
            return Err(Error::Probability { t: j, value: q });
        }
    }
    if x.origin() != p.origin() || x.len() != p.len() {
        return Err(Error::Alignment(format!(
            "primary counts {}..{} and rates {}..{} differ",
            x.origin(),
            x.end(),
            p.origin(),
            p.end()
        )));
    }
    Ok(())
}

/// Secondary counts as sums of independent Bernoulli outcomes, drawn per lag
/// bucket as `Binomial(X_{t-k}, pi_k p_{t-k})`. Output starts `d` days after
/// the origin of `x`.
pub fn sample_poisson_binomial_with<R: Rng + ?Sized>(
    x: &CountSeries,
    delay: &DelayDistribution,
    p: &SeverityCurve,
    rng: &mut R,
) -> Result<CountSeries> {
    check_inputs(x, delay, p)?;
    let d = delay.support();
    if x.len() <= d {
        return Err(Error::Alignment(format!("{} days cannot cover a {}-day delay", x.len(), d + 1)));
    }
    let xs = x.values();
    let mut out = Vec::with_capacity(x.len() - d);
    for t in d..x.len() {
        let mut y = 0u64;
        for k in 0..=d {
            let j = t - k;
            let q = delay.mass_at(x.date(j))[k] * p.values()[j];
            if q > 0.0 && xs[j] > 0 {
                y += Binomial::new(xs[j], q.min(1.0)).expect("valid binomial").sample(rng);
            }
        }
        out.push(y);
    }
    Ok(CountSeries::new(x.date(d), out))
}

pub fn sample_poisson_binomial(
    x: &CountSeries,
    delay: &DelayDistribution,
    p: &SeverityCurve,
    seed: u64,
) -> Result<CountSeries> {
    sample_poisson_binomial_with(x, delay, p, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean and overdispersion `(M, rho)` of the beta-binomial with `n` trials,
/// mean `mu` and variance `beta * var`.
pub fn beta_binomial_params(mu: f64, var: f64, n: u64, beta: f64) -> Result<(f64, f64)> {
    if n < 2 || !(mu > 0.0 && mu < n as f64) {
        return Err(Error::Parameter(format!(
            "beta-binomial needs 0 < mean < n and n >= 2, got mean {mu} with n = {n}"
        )));
    }
    let nf = n as f64;
    let m = mu / nf;
    let rho = (beta * var / (nf * m * (1.0 - m)) - 1.0) / (nf - 1.0);
    if !rho.is_finite() || rho >= 1.0 || rho < 0.0 {
        return Err(Error::DispersionInfeasible { t: 0, rho });
    }
    Ok((m, rho))
}

/// Independent beta-binomial draws with the Poisson-binomial mean and
/// `beta` times its variance. Underdispersed days fall back to the binomial.
pub fn sample_beta_binomial_with<R: Rng + ?Sized>(
    x: &CountSeries,
    delay: &DelayDistribution,
    p: &SeverityCurve,
    beta: f64,
    rng: &mut R,
) -> Result<CountSeries> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("dispersion multiplier must be positive, got {beta}")));
    }
    check_inputs(x, delay, p)?;
    let moments = expected_secondary(x, delay, p)?;
    let d = delay.support();
    let xs = x.values();
    let mut clamped = 0usize;
    let mut out = Vec::with_capacity(moments.mean.len());
    for (i, (&mu, &var)) in moments.mean.iter().zip(&moments.variance).enumerate() {
        let t = i + d;
        let n: u64 = xs[t - d..=t].iter().sum();
        if mu <= 0.0 || n == 0 {
            out.push(0);
            continue;
        }
        if mu >= n as f64 {
            out.push(n);
            continue;
        }
        let nf = n as f64;
        let m = mu / nf;
        let rho = if n < 2 {
            0.0
        } else {
            (beta * var / (nf * m * (1.0 - m)) - 1.0) / (nf - 1.0)
        };
        if !rho.is_finite() || rho >= 1.0 {
            return Err(Error::DispersionInfeasible { t, rho });
        }
        let y = if rho <= 0.0 {
            if rho < 0.0 {
                clamped += 1;
            }
            Binomial::new(n, m).expect("valid binomial").sample(rng)
        } else {
            let scale = 1.0 / rho - 1.0;
            let q: f64 = Beta::new(m * scale, (1.0 - m) * scale)
                .map_err(|e| Error::Parameter(format!("beta parameters at day {t}: {e}")))?
                .sample(rng);
            Binomial::new(n, q.clamp(0.0, 1.0)).expect("valid binomial").sample(rng)
        };
        out.push(y);
    }
    if clamped > 0 {
        log::warn!("{clamped} days were underdispersed; rho clamped to 0");
    }
    Ok(CountSeries::new(moments.origin, out))
}

pub fn sample_beta_binomial(
    x: &CountSeries,
    delay: &DelayDistribution,
    p: &SeverityCurve,
    beta: f64,
    seed: u64,
) -> Result<CountSeries> {
    sample_beta_binomial_with(x, delay, p, beta, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Draws secondary counts under `noise`.
pub fn sample_secondary<R: Rng + ?Sized>(
    x: &CountSeries,
    delay: &DelayDistribution,
    p: &SeverityCurve,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<CountSeries> {
    match noise {
        NoiseModel::PoissonBinomial => sample_poisson_binomial_with(x, delay, p, rng),
        NoiseModel::BetaBinomial { beta } => sample_beta_binomial_with(x, delay, p, beta, rng),
    }
}

/// Variance-to-mean multiplier of a count series.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionFit {
    pub beta: f64,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Regresses squared residuals around a smooth mean curve on the fitted
/// values, without intercept.
pub fn estimate_dispersion(y: &CountSeries) -> Result<DispersionFit> {
    if y.len() < 60 {
        return Err(Error::Dimension(format!("dispersion needs at least 60 days, got {}", y.len())));
    }
    if y.total() == 0 {
        return Err(Error::Degenerate("all counts are zero".into()));
    }
    let values = y.to_f64();
    let fit = smooth_gcv(&values)?;
    let residuals: Vec<f64> = values.iter().zip(&fit.fitted).map(|(a, b)| a - b).collect();
    let num: f64 = fit.fitted.iter().zip(&residuals).map(|(f, r)| f * r * r).sum();
    let den: f64 = fit.fitted.iter().map(|f| f * f).sum();
    if !(den > 0.0) {
        return Err(Error::Degenerate("smoothed mean is identically zero".into()));
    }
    Ok(DispersionFit {
        beta: num / den,
        fitted: fit.fitted,
        residuals,
    })
}

/// Days by which secondary counts trail primary counts when deriving
/// per-variant rates.
pub const DOMINANCE_SHIFT: i64 = 14;

/// Per-variant rates from observed counts: over the closed window of days
/// on which the variant holds more than half of circulation, total
/// secondary counts shifted by [`DOMINANCE_SHIFT`] days divided by total
/// primary counts. Days whose shifted secondary count is not observed are
/// left out. `profiles` carry proportions on the axis of `x`; their
/// severities are ignored.
pub fn dominance_severities(x: &CountSeries, y: &CountSeries, profiles: &[VariantProfile]) -> Result<Vec<(String, f64)>> {
    profiles
        .iter()
        .map(|v| {
            if v.proportions.len() != x.len() {
                return Err(Error::Dimension(format!(
                    "variant {} has {} proportions for {} days",
                    v.name,
                    v.proportions.len(),
                    x.len()
                )));
            }
            let days: Vec<usize> = (0..x.len()).filter(|&t| v.proportions[t] > 0.5).collect();
            let (Some(&lo), Some(&hi)) = (days.first(), days.last()) else {
                return Err(Error::Validation(format!("variant {} never dominates", v.name)));
            };
            let mut primary = 0u64;
            let mut secondary = 0u64;
            let mut covered = 0usize;
            for t in lo..=hi {
                let date = crate::series::shift(x.date(t), DOMINANCE_SHIFT);
                if let Some(j) = y.index_of(date) {
                    primary += x.values()[t];
                    secondary += y.values()[j];
                    covered += 1;
                }
            }
            if covered == 0 {
                return Err(Error::Alignment(format!(
                    "no secondary counts {DOMINANCE_SHIFT} days after the days {} dominates",
                    v.name
                )));
            }
            if primary == 0 {
                return Err(Error::Degenerate(format!("no primary events while {} dominates", v.name)));
            }
            Ok((v.name.clone(), (secondary as f64 / primary as f64).min(1.0)))
        })
        .collect()
}
