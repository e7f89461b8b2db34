//! Delay-mean selection by lagged correlation.

use crate::error::{Error, Result};
use crate::series::{day_offset, CountSeries};

/// Overlapping days required at every lag.
pub const MIN_OVERLAP: usize = 90;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub best_lag: usize,
    /// `(lag, correlation of X_{t-lag} with Y_t)`.
    pub correlations: Vec<(usize, f64)>,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Lag in `0..=max_lag` maximizing the correlation between primary counts
/// shifted forward by the lag and secondary counts.
pub fn delay_mean_scan(x: &CountSeries, y: &CountSeries, max_lag: usize) -> Result<ScanResult> {
    let xv = x.to_f64();
    let yv = y.to_f64();
    let y_off = day_offset(x.origin(), y.origin());
    let mut correlations = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (j, &yj) in yv.iter().enumerate() {
            let i = y_off + j as i64 - lag as i64;
            if i >= 0 && (i as usize) < xv.len() {
                a.push(xv[i as usize]);
                b.push(yj);
            }
        }
        if a.len() < MIN_OVERLAP {
            return Err(Error::Validation(format!(
                "lag {lag}: {} overlapping days, need {MIN_OVERLAP}",
                a.len()
            )));
        }
        let r = pearson(&a, &b)
            .ok_or_else(|| Error::Degenerate(format!("constant series in the overlap at lag {lag}")))?;
        correlations.push((lag, r));
    }
    let best_lag = correlations
        .iter()
        .fold((0, f64::NEG_INFINITY), |best, &(l, r)| if r > best.1 { (l, r) } else { best })
        .0;
    Ok(ScanResult { best_lag, correlations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_shift() {
        let n = 300;
        let signal: Vec<u64> = (0..n).map(|t| (100.0 + 80.0 * (t as f64 / 17.0).sin() + (t % 7) as f64) as u64).collect();
        let x = CountSeries::from_values(signal.clone());
        let lagged: Vec<u64> = (0..n).map(|t| if t >= 12 { signal[t - 12] / 5 } else { 20 }).collect();
        let y = CountSeries::from_values(lagged);
        let r = delay_mean_scan(&x, &y, 30).unwrap();
        assert_eq!(r.best_lag, 12);
        assert_eq!(r.correlations.len(), 31);
    }

    #[test]
    fn rejects_short_or_constant() {
        let x = CountSeries::from_values(vec![5; 50]);
        assert!(delay_mean_scan(&x, &x, 5).is_err());
        let x = CountSeries::from_values(vec![5; 200]);
        assert!(delay_mean_scan(&x, &x, 5).is_err());
    }
}
