//! Ratio estimators of the severity rate: lagged and convolutional ratios of
//! smoothed secondary to primary counts.
//!
//! All estimates live on the primary axis. Days whose smoothing window or
//! delay window leaves the data, or whose denominator is zero, are missing.

use chrono::NaiveDate;

use crate::delay::DelayDistribution;
use crate::error::{Error, Result};
use crate::series::{day_offset, shift, CountSeries, SeverityCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Mean of `t-W+1..=t`; used in real time.
    Trailing,
    /// Mean of `t-floor(W/2)..=t+ceil(W/2)-1`; used in retrospect.
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothingMode {
    pub window: usize,
    pub alignment: Alignment,
}

impl SmoothingMode {
    pub fn trailing(window: usize) -> Self {
        Self {
            window,
            alignment: Alignment::Trailing,
        }
    }

    pub fn centered(window: usize) -> Self {
        Self {
            window,
            alignment: Alignment::Centered,
        }
    }

    /// Offsets `(lo, hi)` such that the window of `t` is `t-lo..=t+hi`.
    fn span(&self) -> (usize, usize) {
        match self.alignment {
            Alignment::Trailing => (self.window - 1, 0),
            Alignment::Centered => (self.window / 2, self.window.div_ceil(2) - 1),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Parameter("smoothing window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Estimation setting, which fixes both the smoothing alignment and the
/// direction of the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Retrospective,
    RealTime,
}

impl Setting {
    pub fn mode(self, window: usize) -> SmoothingMode {
        match self {
            Setting::Retrospective => SmoothingMode::centered(window),
            Setting::RealTime => SmoothingMode::trailing(window),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioKind {
    Lagged { lag: usize },
    Convolutional,
}

/// A real-valued series with missing days.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub origin: NaiveDate,
    pub values: Vec<Option<f64>>,
}

/// Ratio estimates with missing days and a clip flag per day.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimate {
    origin: NaiveDate,
    values: Vec<Option<f64>>,
    clipped: Vec<bool>,
}

impl RatioEstimate {
    fn from_raw(origin: NaiveDate, raw: Vec<Option<f64>>) -> Self {
        let clipped = raw.iter().map(|v| v.is_some_and(|x| !(0.0..=1.0).contains(&x))).collect();
        let values = raw.into_iter().map(|v| v.map(|x| x.clamp(0.0, 1.0))).collect();
        Self {
            origin,
            values,
            clipped,
        }
    }

    pub fn origin(&self) -> NaiveDate {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        shift(self.origin, i as i64)
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn clipped(&self) -> &[bool] {
        &self.clipped
    }

    pub fn at(&self, date: NaiveDate) -> Option<f64> {
        let off = day_offset(self.origin, date);
        if off < 0 {
            return None;
        }
        self.values.get(off as usize).copied().flatten()
    }

    pub fn clipped_at(&self, date: NaiveDate) -> bool {
        let off = day_offset(self.origin, date);
        off >= 0 && self.clipped.get(off as usize).copied().unwrap_or(false)
    }

    pub fn clipped_fraction(&self) -> f64 {
        let present = self.values.iter().filter(|v| v.is_some()).count();
        if present == 0 {
            return 0.0;
        }
        self.clipped.iter().filter(|c| **c).count() as f64 / present as f64
    }

    /// Curve with each missing day replaced by the nearest present value,
    /// preferring the earlier one on ties.
    pub fn filled(&self) -> Result<SeverityCurve> {
        let present: Vec<usize> = (0..self.values.len()).filter(|&i| self.values[i].is_some()).collect();
        if present.is_empty() {
            return Err(Error::Degenerate("ratio estimate has no defined day".into()));
        }
        let mut next = 0;
        let values = (0..self.values.len())
            .map(|i| {
                while next + 1 < present.len() && present[next + 1] <= i {
                    next += 1;
                }
                let a = present[next];
                let j = match present.get(next + 1) {
                    Some(&b) if a < i && b - i < i - a => b,
                    _ => a,
                };
                self.values[j].expect("present index")
            })
            .collect();
        SeverityCurve::new(self.origin, values)
    }

    /// All days as a curve, if none is missing.
    pub fn to_curve(&self) -> Result<SeverityCurve> {
        let values: Option<Vec<f64>> = self.values.iter().copied().collect();
        match values {
            Some(v) => SeverityCurve::new(self.origin, v),
            None => Err(Error::Validation("ratio estimate has missing days".into())),
        }
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Absent,
    Masked,
    Value(f64),
}

/// Window means on slots: windows reaching outside the axis are missing,
/// masked entries are skipped.
fn smooth_slots(slots: &[Slot], mode: SmoothingMode) -> Vec<Option<f64>> {
    let (lo, hi) = mode.span();
    let n = slots.len();
    (0..n)
        .map(|t| {
            if t < lo || t + hi >= n {
                return None;
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for s in &slots[t - lo..=t + hi] {
                match s {
                    Slot::Absent => return None,
                    Slot::Masked => {}
                    Slot::Value(v) => {
                        sum += v;
                        count += 1;
                    }
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect()
}

/// Window means of a count series.
pub fn smooth(series: &CountSeries, mode: SmoothingMode) -> Result<Smoothed> {
    mode.validate()?;
    let slots: Vec<Slot> = series.values().iter().map(|&v| Slot::Value(v as f64)).collect();
    Ok(Smoothed {
        origin: series.origin(),
        values: smooth_slots(&slots, mode),
    })
}

/// Secondary counts placed on the primary axis.
fn secondary_slots(x: &CountSeries, y: &CountSeries, holdout: Option<&[bool]>) -> Result<Vec<Slot>> {
    if let Some(h) = holdout {
        if h.len() != y.len() {
            return Err(Error::Dimension(format!("{} holdout flags for {} counts", h.len(), y.len())));
        }
    }
    Ok((0..x.len())
        .map(|i| match y.index_of(x.date(i)) {
            None => Slot::Absent,
            Some(j) if holdout.is_some_and(|h| h[j]) => Slot::Masked,
            Some(j) => Slot::Value(y.values()[j] as f64),
        })
        .collect())
}

fn get(v: &[Option<f64>], i: i64) -> Option<f64> {
    if i < 0 {
        return None;
    }
    v.get(i as usize).copied().flatten()
}

/// Shared implementation; `holdout[j]` drops secondary day `j` from every
/// smoothing window.
pub fn ratio_estimate(
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    kind: RatioKind,
    setting: Setting,
    window: usize,
    holdout: Option<&[bool]>,
) -> Result<RatioEstimate> {
    let mode = setting.mode(window);
    mode.validate()?;
    let xs = smooth(x, mode)?.values;
    let ys = smooth_slots(&secondary_slots(x, y, holdout)?, mode);
    let n = x.len();
    let d = delay.support() as i64;
    let pi = |i: i64, k: usize| delay.mass_at(shift(x.origin(), i))[k];
    // expected secondary count per unit rate on day s
    let denom = |s: i64| -> Option<f64> {
        let mut acc = 0.0;
        for k in 0..=d {
            let w = pi(s - k, k as usize);
            if w > 0.0 {
                acc += get(&xs, s - k)? * w;
            }
        }
        (acc > 0.0).then_some(acc)
    };
    let ratio = |num: Option<f64>, den: Option<f64>| match (num, den) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let raw: Vec<Option<f64>> = (0..n as i64)
        .map(|t| match (kind, setting) {
            (RatioKind::Lagged { lag }, Setting::RealTime) => ratio(get(&ys, t), get(&xs, t - lag as i64)),
            (RatioKind::Lagged { lag }, Setting::Retrospective) => ratio(get(&ys, t + lag as i64), get(&xs, t)),
            (RatioKind::Convolutional, Setting::RealTime) => ratio(get(&ys, t), denom(t)),
            (RatioKind::Convolutional, Setting::Retrospective) => {
                let mut acc = 0.0;
                for k in 0..=d {
                    let w = pi(t, k as usize);
                    if w > 0.0 {
                        acc += get(&ys, t + k)? * w / denom(t + k)?;
                    }
                }
                Some(acc)
            }
        })
        .collect();
    Ok(RatioEstimate::from_raw(x.origin(), raw))
}

/// Lagged ratio; `mode.alignment` selects the real-time (trailing,
/// `Y_t / X_{t-l}`) or retrospective (centered, `Y_{t+l} / X_t`) form.
pub fn lagged_ratio(x: &CountSeries, y: &CountSeries, lag: usize, mode: SmoothingMode) -> Result<RatioEstimate> {
    let setting = match mode.alignment {
        Alignment::Trailing => Setting::RealTime,
        Alignment::Centered => Setting::Retrospective,
    };
    let delay = DelayDistribution::point_mass(0);
    ratio_estimate(x, y, &delay, RatioKind::Lagged { lag }, setting, mode.window, None)
}

/// `Y_t / sum_k X_{t-k} pi_k^{(t-k)}` with trailing smoothing.
pub fn conv_ratio_realtime(
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    window: usize,
) -> Result<RatioEstimate> {
    ratio_estimate(x, y, delay, RatioKind::Convolutional, Setting::RealTime, window, None)
}

/// `sum_k pi_k^{(t)} Y_{t+k} / sum_j X_{t+k-j} pi_j^{(t+k-j)}` with centered
/// smoothing.
pub fn conv_ratio_retrospective(
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    window: usize,
) -> Result<RatioEstimate> {
    ratio_estimate(x, y, delay, RatioKind::Convolutional, Setting::Retrospective, window, None)
}

/// Lag used by lagged ratios: the rounded delay mean.
pub fn default_lag(delay: &DelayDistribution) -> usize {
    delay.mean().round() as usize
}
