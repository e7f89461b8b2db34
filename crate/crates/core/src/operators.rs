//! Difference and delay-convolution operators.

use chrono::NaiveDate;

use crate::delay::DelayDistribution;
use crate::error::{Error, Result};
use crate::series::shift;

/// Signed binomial coefficients `(-1)^(k-i) C(k, i)` of a k-th difference,
/// ordered from the oldest element.
pub fn difference_coefficients(order: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..order {
        let mut next = vec![0.0; row.len() + 1];
        for (i, c) in row.iter().enumerate() {
            next[i] -= c;
            next[i + 1] += c;
        }
        row = next;
    }
    row
}

/// The `(n - order) x n` discrete difference matrix `D^(order)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceOperator {
    order: usize,
    n: usize,
    coefficients: Vec<f64>,
}

/// Builds `D^(order)` for sequences of length `n`.
pub fn diff_matrix(order: usize, n: usize) -> Result<DifferenceOperator> {
    if order == 0 {
        return Err(Error::Parameter("difference order must be at least 1".into()));
    }
    if n <= order {
        return Err(Error::Dimension(format!(
            "difference of order {order} needs more than {order} points, got {n}"
        )));
    }
    Ok(DifferenceOperator {
        order,
        n,
        coefficients: difference_coefficients(order),
    })
}

impl DifferenceOperator {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.n - self.order
    }

    /// Coefficients of every row; row `i` starts at column `i`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.rows())
            .map(|i| {
                self.coefficients
                    .iter()
                    .zip(&x[i..])
                    .map(|(c, v)| c * v)
                    .sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows());
        let mut out = vec![0.0; self.n];
        for (i, vi) in v.iter().enumerate() {
            for (k, c) in self.coefficients.iter().enumerate() {
                out[i + k] += c * vi;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| {
                let mut row = vec![0.0; self.n];
                row[i..=i + self.order].copy_from_slice(&self.coefficients);
                row
            })
            .collect()
    }
}

/// Linear map from severity rates to expected secondary counts,
/// `(A p)_t = sum_k X_{t-k} pi_k^{(t-k)} p_{t-k}`.
///
/// The rate axis has `n` days starting at `origin`; output row `r` is the day
/// `origin + r + d`, the first day whose full delay window is covered.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionOperator {
    origin: NaiveDate,
    n: usize,
    d: usize,
    // row-major, entries[r * (d + 1) + k] = X_{j} pi_k^{(j)} with j = r + d - k
    entries: Vec<f64>,
}

impl ConvolutionOperator {
    /// `primary[j]` is the primary count on `origin + j`, aligned with the
    /// rate axis.
    pub fn new(origin: NaiveDate, primary: &[f64], delay: &DelayDistribution) -> Result<Self> {
        let d = delay.support();
        let n = primary.len();
        if n <= d {
            return Err(Error::Alignment(format!(
                "rate axis of {n} days does not cover a delay window of {} days",
                d + 1
            )));
        }
        if let Some(v) = primary.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Parameter(format!("primary count {v} is negative")));
        }
        let rows = n - d;
        let width = d + 1;
        let mut entries = vec![0.0; rows * width];
        let shared = !delay.is_time_varying();
        for r in 0..rows {
            for k in 0..width {
                let j = r + d - k;
                let pi = if shared {
                    delay.mass()[k]
                } else {
                    delay.mass_at(shift(origin, j as i64))[k]
                };
                entries[r * width + k] = primary[j] * pi;
            }
        }
        Ok(Self {
            origin,
            n,
            d,
            entries,
        })
    }

    pub fn origin(&self) -> NaiveDate {
        self.origin
    }

    /// Date of output row 0.
    pub fn first_row_date(&self) -> NaiveDate {
        shift(self.origin, self.d as i64)
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.n - self.d
    }

    pub fn support(&self) -> usize {
        self.d
    }

    /// Coefficient on `p_{r + d - k}` in row `r`.
    #[inline]
    pub fn entry(&self, r: usize, k: usize) -> f64 {
        self.entries[r * (self.d + 1) + k]
    }

    /// Row `r` as `(column, coefficient)` pairs, ascending in column.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let w = self.d + 1;
        let base = r * w;
        (0..w).map(move |c| (r + c, self.entries[base + self.d - c]))
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        let w = self.d + 1;
        self.entries[r * w..(r + 1) * w].iter().sum()
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        assert_eq!(p.len(), self.n);
        let w = self.d + 1;
        (0..self.rows())
            .map(|r| {
                let e = &self.entries[r * w..(r + 1) * w];
                let win = &p[r..r + w];
                // e[k] multiplies p[r + d - k] = win[d - k]
                e.iter().zip(win.iter().rev()).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows());
        let w = self.d + 1;
        let mut out = vec![0.0; self.n];
        for (r, vr) in v.iter().enumerate() {
            if *vr == 0.0 {
                continue;
            }
            let e = &self.entries[r * w..(r + 1) * w];
            for (k, a) in e.iter().enumerate() {
                out[r + self.d - k] += a * vr;
            }
        }
        out
    }

    /// Dense copy, mostly for tests and small reference problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|r| {
                let mut row = vec![0.0; self.n];
                for (c, a) in self.row(r) {
                    row[c] = a;
                }
                row
            })
            .collect()
    }
}
