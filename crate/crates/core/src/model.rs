//! Closed-form quantities of the Poisson-binomial secondary-event model.

use chrono::NaiveDate;

use crate::delay::DelayDistribution;
use crate::error::{Error, Result};
use crate::series::{day_offset, shift, CountSeries, SeverityCurve};

/// Conditional mean and variance of secondary counts, starting `d` days after
/// the origin of the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub origin: NaiveDate,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Moments {
    pub fn mean_at(&self, date: NaiveDate) -> Option<f64> {
        let off = day_offset(self.origin, date);
        (off >= 0).then(|| self.mean.get(off as usize).copied()).flatten()
    }
}

fn check_axes(x: &CountSeries, p: &SeverityCurve) -> Result<()> {
    if x.origin() != p.origin() || x.len() != p.len() {
        return Err(Error::Alignment(format!(
            "primary counts span {}..+{} but rates span {}..+{}",
            x.origin(),
            x.len(),
            p.origin(),
            p.len()
        )));
    }
    Ok(())
}

/// Success probabilities `pi_k^{(t-k)} p_{t-k}` for `k = 0..=d` at day index
/// `t` of the rate axis.
fn success_probs<'a>(
    delay: &'a DelayDistribution,
    p: &'a SeverityCurve,
    t: usize,
) -> impl Iterator<Item = (usize, f64)> + 'a {
    (0..=delay.support()).map(move |k| {
        let j = t - k;
        (j, delay.mass_at(p.date(j))[k] * p.values()[j])
    })
}

fn rate_index(delay: &DelayDistribution, p: &SeverityCurve, t: NaiveDate) -> Result<usize> {
    let d = delay.support();
    match p.index_of(t) {
        Some(i) if i >= d => Ok(i),
        _ => Err(Error::Alignment(format!(
            "rates must cover {} days ending {t}",
            d + 1
        ))),
    }
}

/// Mean `mu_t` and Poisson-binomial variance `sigma_t^2` of `Y_t` given the
/// primary history.
pub fn expected_secondary(
    x: &CountSeries,
    delay: &DelayDistribution,
    p: &SeverityCurve,
) -> Result<Moments> {
    check_axes(x, p)?;
    let d = delay.support();
    if x.len() <= d {
        return Err(Error::Alignment(format!(
            "{} days of history cannot cover a {}-day delay window",
            x.len(),
            d + 1
        )));
    }
    let xs = x.values();
    let mut mean = Vec::with_capacity(x.len() - d);
    let mut variance = Vec::with_capacity(x.len() - d);
    for t in d..x.len() {
        let (mut m, mut v) = (0.0, 0.0);
        for (j, q) in success_probs(delay, p, t) {
            let n = xs[j] as f64;
            m += n * q;
            v += n * q * (1.0 - q);
        }
        mean.push(m);
        variance.push(v);
    }
    Ok(Moments {
        origin: shift(x.origin(), d as i64),
        mean,
        variance,
    })
}

/// Lower end of the interval containing the correlation of successive
/// secondary counts: `-q / (1 - q)` with `q` the largest success probability
/// feeding day `t`.
pub fn correlation_bound(delay: &DelayDistribution, p: &SeverityCurve, t: NaiveDate) -> Result<f64> {
    let i = rate_index(delay, p, t)?;
    let q = success_probs(delay, p, i).map(|(_, q)| q).fold(0.0, f64::max);
    if q >= 1.0 {
        return Err(Error::Degenerate(format!(
            "a success probability of 1 at {t} makes the correlation bound unbounded"
        )));
    }
    // -0/(1-0) is -0.0; report a clean zero
    Ok(if q == 0.0 { 0.0 } else { -q / (1.0 - q) })
}

/// Total-variation bound `sum_k (pi_k p_{t-k})^2` between the
/// Poisson-binomial law of `Y_t` and its Poisson approximation.
pub fn poisson_tv_bound(delay: &DelayDistribution, p: &SeverityCurve, t: NaiveDate) -> Result<f64> {
    let i = rate_index(delay, p, t)?;
    Ok(success_probs(delay, p, i).map(|(_, q)| q * q).sum())
}

/// Backward-looking rate `sum_k pi_k^{(t-k)} p_{t-k}`, starting `d` days
/// after the origin of `p`.
pub fn backward_rate(delay: &DelayDistribution, p: &SeverityCurve) -> Result<SeverityCurve> {
    let d = delay.support();
    if p.len() <= d {
        return Err(Error::Alignment(format!(
            "{} rates cannot cover a {}-day delay window",
            p.len(),
            d + 1
        )));
    }
    let values = (d..p.len())
        .map(|t| success_probs(delay, p, t).map(|(_, q)| q).sum::<f64>().min(1.0))
        .collect();
    SeverityCurve::new(shift(p.origin(), d as i64), values)
}
