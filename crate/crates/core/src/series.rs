//! Daily time-series containers.
//!
//! Every series carries the calendar date of its first element; element `i`
//! is the count or rate on `origin + i` days. Alignment between series is
//! resolved through [`day_offset`] once, when operators are built.

use chrono::{Days, NaiveDate};

use crate::error::{Error, Result};

/// Default origin used when a series is built from bare values.
pub fn default_origin() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 8, 1).expect("valid date")
}

/// Signed number of days from `from` to `to`.
pub fn day_offset(from: NaiveDate, to: NaiveDate) -> i64 {
    (to - from).num_days()
}

pub(crate) fn shift(date: NaiveDate, days: i64) -> NaiveDate {
    if days >= 0 {
        date.checked_add_days(Days::new(days as u64))
    } else {
        date.checked_sub_days(Days::new((-days) as u64))
    }
    .expect("date within chrono range")
}

/// Nonnegative daily event counts on a contiguous axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountSeries {
    origin: NaiveDate,
    values: Vec<u64>,
}

impl CountSeries {
    pub fn new(origin: NaiveDate, values: Vec<u64>) -> Self {
        Self { origin, values }
    }

    pub fn from_values(values: Vec<u64>) -> Self {
        Self::new(default_origin(), values)
    }

    pub fn origin(&self) -> NaiveDate {
        self.origin
    }

    /// Date of the last element. Panics on an empty series.
    pub fn end(&self) -> NaiveDate {
        assert!(!self.values.is_empty(), "empty series has no end date");
        shift(self.origin, self.values.len() as i64 - 1)
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        shift(self.origin, i as i64)
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<u64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.values.iter().sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Index of `date` on this axis, if it falls inside the series.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let off = day_offset(self.origin, date);
        (off >= 0 && (off as usize) < self.values.len()).then_some(off as usize)
    }

    /// Sub-series covering `[from, to]` inclusive.
    pub fn window(&self, from: NaiveDate, to: NaiveDate) -> Result<CountSeries> {
        let (a, b) = match (self.index_of(from), self.index_of(to)) {
            (Some(a), Some(b)) if a <= b => (a, b),
            _ => {
                return Err(Error::Alignment(format!(
                    "window {from}..{to} not inside series {}..{}",
                    self.origin,
                    self.end()
                )))
            }
        };
        Ok(CountSeries::new(from, self.values[a..=b].to_vec()))
    }
}

/// Severity rates in `[0, 1]` on a daily axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SeverityCurve {
    origin: NaiveDate,
    values: Vec<f64>,
}

impl SeverityCurve {
    pub fn new(origin: NaiveDate, values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Probability { t: i, value: *v });
        }
        Ok(Self { origin, values })
    }

    pub fn constant(origin: NaiveDate, len: usize, value: f64) -> Result<Self> {
        Self::new(origin, vec![value; len])
    }

    pub fn origin(&self) -> NaiveDate {
        self.origin
    }

    pub fn end(&self) -> NaiveDate {
        shift(self.origin, self.values.len() as i64 - 1)
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        shift(self.origin, i as i64)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let off = day_offset(self.origin, date);
        (off >= 0 && (off as usize) < self.values.len()).then_some(off as usize)
    }

    pub fn at(&self, date: NaiveDate) -> Option<f64> {
        self.index_of(date).map(|i| self.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_and_dates() {
        let s = CountSeries::from_values(vec![1, 2, 3, 4]);
        let w = s.window(s.date(1), s.date(2)).unwrap();
        assert_eq!(w.values(), &[2, 3]);
        assert_eq!(w.origin(), s.date(1));
        assert!(s.window(s.date(2), s.date(5)).is_err());
        assert_eq!(s.total(), 10);
    }

    #[test]
    fn curve_rejects_out_of_range() {
        assert!(SeverityCurve::new(default_origin(), vec![0.1, 1.2]).is_err());
        assert!(SeverityCurve::new(default_origin(), vec![0.0, 1.0]).is_ok());
    }
}
