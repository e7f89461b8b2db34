//! Cleaning of reported secondary counts and weekly-to-daily imputation.
//!
//! Raw reports may hold negative corrections, so the entry points take
//! signed counts. Every step except outlier truncation preserves the grand
//! total exactly.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::series::CountSeries;
use crate::smooth::smooth_gcv;

pub const DEFAULT_OUTLIER_WINDOW: usize = 15;
pub const DEFAULT_IQR_MULT: f64 = 3.0;
const DUMP_RUN: usize = 6;

/// Uniform multinomial split of `n` over `cells` cells.
pub fn multinomial_uniform<R: Rng + ?Sized>(n: u64, cells: usize, rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; cells];
    let mut left = n;
    for (i, o) in out.iter_mut().enumerate() {
        let rest = cells - i;
        if left == 0 {
            break;
        }
        *o = if rest == 1 {
            left
        } else {
            Binomial::new(left, 1.0 / rest as f64).expect("valid binomial").sample(rng)
        };
        left -= *o;
    }
    out
}

/// Replaces each positive value preceded by six zeros with a uniform
/// multinomial split over those seven days. Detection uses the input values.
pub fn redistribute_dumps<R: Rng + ?Sized>(values: &[i64], rng: &mut R) -> Vec<i64> {
    let mut out = values.to_vec();
    for t in DUMP_RUN..values.len() {
        if values[t] > 0 && values[t - DUMP_RUN..t].iter().all(|v| *v == 0) {
            let split = multinomial_uniform(values[t] as u64, DUMP_RUN + 1, rng);
            for (o, s) in out[t - DUMP_RUN..=t].iter_mut().zip(split) {
                *o = s as i64;
            }
        }
    }
    out
}

/// Sets each negative value to zero and removes its magnitude from the
/// preceding days, split uniformly over days that still have counts.
pub fn redistribute_negatives<R: Rng + ?Sized>(values: &[i64], rng: &mut R) -> Result<Vec<u64>> {
    let mut out = values.to_vec();
    for t in 0..out.len() {
        if out[t] >= 0 {
            continue;
        }
        let mut left = out[t].unsigned_abs();
        out[t] = 0;
        let history: i64 = out[..t].iter().filter(|v| **v > 0).sum();
        if (history as u64) < left {
            return Err(Error::Infeasible(format!(
                "negative count -{left} at day {t} exceeds the preceding total {history}"
            )));
        }
        while left > 0 {
            let open: Vec<usize> = (0..t).filter(|&j| out[j] > 0).collect();
            let split = multinomial_uniform(left, open.len(), rng);
            left = 0;
            for (&j, s) in open.iter().zip(split) {
                let take = s.min(out[j] as u64);
                out[j] -= take as i64;
                left += s - take;
            }
        }
    }
    Ok(out.into_iter().map(|v| v as u64).collect())
}

/// Type-7 sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn median(window: &[f64]) -> f64 {
    let mut v = window.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

fn centered(n: usize, t: usize, half: usize) -> std::ops::Range<usize> {
    t.saturating_sub(half)..(t + half + 1).min(n)
}

/// Pulls values outside `median +- iqr_mult * IQR` back to the band edge.
/// The median runs over a centered window (truncated at the ends) and the
/// IQR is that of the residuals from the median curve in the same window.
pub fn truncate_outliers(values: &[f64], window: usize, iqr_mult: f64) -> Result<Vec<f64>> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Parameter(format!("outlier window must be odd and at least 3, got {window}")));
    }
    if !(iqr_mult >= 0.0) {
        return Err(Error::Parameter(format!("IQR multiplier must be nonnegative, got {iqr_mult}")));
    }
    let n = values.len();
    let half = window / 2;
    let med: Vec<f64> = (0..n).map(|t| median(&values[centered(n, t, half)])).collect();
    let resid: Vec<f64> = values.iter().zip(&med).map(|(v, m)| v - m).collect();
    Ok((0..n)
        .map(|t| {
            let mut r = resid[centered(n, t, half)].to_vec();
            r.sort_by(f64::total_cmp);
            let iqr = quantile(&r, 0.75) - quantile(&r, 0.25);
            values[t].clamp(med[t] - iqr_mult * iqr, med[t] + iqr_mult * iqr)
        })
        .collect())
}

/// Integer outlier truncation; band edges round inward. Returns the series
/// and its change in total.
pub fn outlier_truncate(series: &CountSeries, window: usize, iqr_mult: f64) -> Result<(CountSeries, i64)> {
    let raw = series.to_f64();
    let cut = truncate_outliers(&raw, window, iqr_mult)?;
    let values: Vec<u64> = raw
        .iter()
        .zip(&cut)
        .map(|(r, c)| {
            if c < r {
                c.floor() as u64
            } else if c > r {
                c.ceil() as u64
            } else {
                *r as u64
            }
        })
        .collect();
    let change = values.iter().sum::<u64>() as i64 - series.total() as i64;
    Ok((CountSeries::new(series.origin(), values), change))
}

fn stochastic_round<R: Rng + ?Sized>(v: f64, rng: &mut R) -> u64 {
    let f = v.floor();
    let up = rng.random::<f64>() < v - f;
    f as u64 + up as u64
}

/// Adds or removes units so the total equals `target`: additions are split
/// in proportion to the current values, removals are drawn uniformly over
/// the counted units.
fn match_total<R: Rng + ?Sized>(values: &mut [u64], target: u64, rng: &mut R) {
    let total: u64 = values.iter().sum();
    if total < target {
        let mut left = target - total;
        let mut mass = total as f64;
        for i in 0..values.len() {
            if left == 0 {
                break;
            }
            let draw = if mass <= 0.0 {
                let rest = (values.len() - i) as f64;
                Binomial::new(left, 1.0 / rest).expect("valid binomial").sample(rng)
            } else {
                let q = (values[i] as f64 / mass).min(1.0);
                mass -= values[i] as f64;
                Binomial::new(left, q).expect("valid binomial").sample(rng)
            };
            let draw = if i == values.len() - 1 { left } else { draw };
            values[i] += draw;
            left -= draw;
        }
    } else {
        let mut left = total - target;
        let mut pool = total;
        for v in values.iter_mut() {
            if left == 0 {
                break;
            }
            // sequential unit draws give a multivariate hypergeometric split
            let mut take = 0;
            for _ in 0..*v {
                if rng.random::<f64>() < left as f64 / pool as f64 {
                    take += 1;
                    left -= 1;
                }
                pool -= 1;
                if left == 0 {
                    break;
                }
            }
            *v -= take;
        }
    }
}

/// Removes day-of-week structure: trailing 7-day mean, outlier truncation,
/// smooth mean curve, residuals rescaled by `sqrt(7)` and added back,
/// floored at zero and stochastically rounded. The result keeps the input
/// total.
pub fn deweekify<R: Rng + ?Sized>(series: &CountSeries, rng: &mut R) -> Result<CountSeries> {
    let n = series.len();
    if n < 28 {
        return Err(Error::Dimension(format!("deweekify needs at least 28 days, got {n}")));
    }
    let raw = series.to_f64();
    let avg: Vec<f64> = (0..n)
        .map(|t| {
            let w = &raw[t.saturating_sub(6)..=t];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect();
    let cut = truncate_outliers(&avg, DEFAULT_OUTLIER_WINDOW, DEFAULT_IQR_MULT)?;
    let fit = smooth_gcv(&cut)?;
    let scale = 7f64.sqrt();
    let mut out: Vec<u64> = cut
        .iter()
        .zip(&fit.fitted)
        .map(|(c, f)| stochastic_round((f + scale * (c - f)).max(0.0), rng))
        .collect();
    match_total(&mut out, series.total(), rng);
    Ok(CountSeries::new(series.origin(), out))
}

/// Each weekly total becomes seven days drawn from a uniform multinomial.
pub fn impute_daily<R: Rng + ?Sized>(origin: NaiveDate, weekly: &[u64], rng: &mut R) -> CountSeries {
    let values = weekly.iter().flat_map(|&w| multinomial_uniform(w, 7, rng)).collect();
    CountSeries::new(origin, values)
}

/// Outcome of the full cleaning pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Cleaned {
    pub series: CountSeries,
    pub dumps: usize,
    pub negatives: usize,
}

/// Dumps, then negatives, then day-of-week removal, from one seed.
pub fn clean_reported(origin: NaiveDate, values: &[i64], seed: u64) -> Result<Cleaned> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dumps = (DUMP_RUN..values.len())
        .filter(|&t| values[t] > 0 && values[t - DUMP_RUN..t].iter().all(|v| *v == 0))
        .count();
    let negatives = values.iter().filter(|v| **v < 0).count();
    let spread = redistribute_dumps(values, &mut rng);
    let positive = CountSeries::new(origin, redistribute_negatives(&spread, &mut rng)?);
    Ok(Cleaned {
        series: deweekify(&positive, &mut rng)?,
        dumps,
        negatives,
    })
}

/// Periodogram mass of the mean-removed series at the period-7 frequencies
/// `j/7`, `j = 1, 2, 3`.
pub fn weekly_spectral_mass(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (1..=3)
        .map(|j| {
            let w = 2.0 * std::f64::consts::PI * j as f64 / 7.0;
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in values.iter().enumerate() {
                re += (v - mean) * (w * t as f64).cos();
                im -= (v - mean) * (w * t as f64).sin();
            }
            (re * re + im * im) / n
        })
        .sum()
}
