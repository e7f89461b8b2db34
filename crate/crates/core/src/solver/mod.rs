//! Regularized deconvolution estimators.
//!
//! Both the retrospective and the real-time estimator minimize
//!
//! ```text
//! (1/N_Y) sum_t [mu_t(p) - Y_t log mu_t(p)]
//!     + lambda/(n - m - 1) ||D^(m+1) p||_1
//!     + gamma/(d + 1) ||W D^(1) p||_2^2
//! ```
//!
//! over `0 <= p <= 1`, where `mu(p) = A p` is the delay convolution of the
//! primary counts. The real-time problem adds the tail weights `W` and the
//! equality constraint that the last `m + 2` rates follow a degree-`m`
//! polynomial. The Gaussian variant swaps the Poisson term for
//! `(Y_t - mu_t)^2 / muhat_t`.

mod ipm;
mod lambda_max;

use chrono::NaiveDate;

use crate::delay::DelayDistribution;
use crate::error::{Error, Result};
use crate::operators::{diff_matrix, difference_coefficients, ConvolutionOperator};
use crate::series::{day_offset, shift, CountSeries, SeverityCurve};
use crate::smooth::smooth_gcv;

pub use lambda_max::{lambda_max_bound, LambdaMaxBound};

/// Floor applied to `mu_t` inside the Poisson log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Floor on the plug-in variance estimated by smoothing secondary counts.
pub const VARIANCE_FLOOR: f64 = 0.5;
/// Relative size of a difference counted as a knot.
pub const KNOT_TOL: f64 = 1e-6;
/// Relative size below which every difference triggers a polynomial check.
const SNAP_TOL: f64 = 1e-4;
/// Floor on the delay CDF when forming tail weights.
const CDF_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Poisson,
    Gaussian,
}

/// Optimization configuration for a single deconvolution fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeconvSpec {
    pub loss: LossKind,
    /// Trend filtering order `m`; the penalty acts on `(m+1)`-th differences.
    pub order: usize,
    pub lambda: f64,
    /// Weight of the tapered tail penalty (real-time only).
    pub gamma: f64,
    /// Constrain the last `m + 2` rates to a degree-`m` polynomial.
    pub tail_constraint: bool,
}

impl DeconvSpec {
    pub fn retrospective(order: usize, lambda: f64) -> Self {
        Self {
            loss: LossKind::Poisson,
            order,
            lambda,
            gamma: 0.0,
            tail_constraint: false,
        }
    }

    pub fn realtime(order: usize, lambda: f64, gamma: f64) -> Self {
        Self {
            loss: LossKind::Poisson,
            order,
            lambda,
            gamma,
            tail_constraint: true,
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.order > 2 {
            return Err(Error::Parameter(format!(
                "trend filtering order must be 0, 1 or 2, got {}",
                self.order
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda and gamma must be finite and nonnegative, got {} and {}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

/// Estimated rates and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub curve: SeverityCurve,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest primal/dual residual or duality gap at the returned iterate.
    pub kkt_residual: f64,
    /// Rows of `D^(m+1) p` that are nonzero; row `i` covers rates `i..=i+m+1`.
    pub knots: Vec<usize>,
    /// Days at each end of the rate axis informed by few secondary counts.
    pub burn: usize,
}

impl FitResult {
    /// Rate estimate on the last day of the axis.
    pub fn last(&self) -> f64 {
        *self.curve.values().last().expect("nonempty curve")
    }
}

/// Aligned data for one deconvolution problem: rates on `origin..`, one
/// secondary count per day with a full delay window behind it.
#[derive(Debug, Clone)]
pub struct DeconvProblem {
    conv: ConvolutionOperator,
    primary: Vec<f64>,
    y: Vec<f64>,
    train: Vec<bool>,
    delay: DelayDistribution,
    variance: Option<Vec<f64>>,
}

impl DeconvProblem {
    /// Aligns `x` and `y` on a common axis. Secondary days without a full
    /// delay window of primary history are dropped, as are primary days after
    /// the last secondary day.
    pub fn new(x: &CountSeries, y: &CountSeries, delay: &DelayDistribution) -> Result<Self> {
        let d = delay.support() as i64;
        if x.is_empty() || y.is_empty() {
            return Err(Error::Alignment("empty input series".into()));
        }
        let first = day_offset(x.origin(), y.origin()).max(d);
        let last = day_offset(x.origin(), y.end()).min(x.len() as i64 - 1);
        if last < first {
            return Err(Error::Alignment(format!(
                "secondary counts {}..{} have no day with {} days of primary history in {}..{}",
                y.origin(),
                y.end(),
                d + 1,
                x.origin(),
                x.end()
            )));
        }
        let rate_start = (first - d) as usize;
        let primary: Vec<f64> = x.values()[rate_start..=last as usize].iter().map(|&v| v as f64).collect();
        let y_start = (first - day_offset(x.origin(), y.origin())) as usize;
        let rows = (last - first + 1) as usize;
        let yv: Vec<f64> = y.values()[y_start..y_start + rows].iter().map(|&v| v as f64).collect();
        let origin = shift(x.origin(), rate_start as i64);
        Self::from_parts(origin, primary, yv, delay)
    }

    /// `primary` on the rate axis starting at `origin`; `y[r]` is the
    /// secondary count on `origin + r + d`.
    pub fn from_parts(origin: NaiveDate, primary: Vec<f64>, y: Vec<f64>, delay: &DelayDistribution) -> Result<Self> {
        let conv = ConvolutionOperator::new(origin, &primary, delay)?;
        if y.len() != conv.rows() {
            return Err(Error::Dimension(format!(
                "{} secondary counts for {} convolution rows",
                y.len(),
                conv.rows()
            )));
        }
        if let Some(v) = y.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Parameter(format!("secondary count {v} is negative")));
        }
        Ok(Self {
            train: vec![true; y.len()],
            conv,
            primary,
            y,
            delay: delay.clone(),
            variance: None,
        })
    }

    pub fn origin(&self) -> NaiveDate {
        self.conv.origin()
    }

    pub fn n_rates(&self) -> usize {
        self.conv.cols()
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn support(&self) -> usize {
        self.conv.support()
    }

    pub fn operator(&self) -> &ConvolutionOperator {
        &self.conv
    }

    pub fn delay(&self) -> &DelayDistribution {
        &self.delay
    }

    pub fn primary(&self) -> &[f64] {
        &self.primary
    }

    pub fn secondary(&self) -> &[f64] {
        &self.y
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train
    }

    /// Date of the last rate (and the last secondary count).
    pub fn last_date(&self) -> NaiveDate {
        shift(self.origin(), self.n_rates() as i64 - 1)
    }

    /// Date of secondary row `r`.
    pub fn row_date(&self, r: usize) -> NaiveDate {
        shift(self.origin(), (r + self.support()) as i64)
    }

    /// Removes the given rows from the loss.
    pub fn with_holdout(mut self, rows: &[usize]) -> Result<Self> {
        for &r in rows {
            if r >= self.train.len() {
                return Err(Error::Dimension(format!("holdout row {r} of {}", self.train.len())));
            }
            self.train[r] = false;
        }
        Ok(self)
    }

    /// Plug-in variance for the Gaussian loss, one per secondary row.
    pub fn with_variance(mut self, variance: Vec<f64>) -> Result<Self> {
        if variance.len() != self.y.len() {
            return Err(Error::Dimension(format!(
                "{} variances for {} rows",
                variance.len(),
                self.y.len()
            )));
        }
        if let Some((t, _)) = variance.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Parameter(format!("plug-in variance at row {t} is not positive")));
        }
        self.variance = Some(variance);
        Ok(self)
    }

    /// Problem restricted to data through `date` (inclusive).
    pub fn through(&self, date: NaiveDate) -> Result<Self> {
        let last = day_offset(self.origin(), date);
        let d = self.support() as i64;
        if last < d || last >= self.n_rates() as i64 {
            return Err(Error::Alignment(format!(
                "cannot cut problem {}..{} at {date}",
                self.origin(),
                self.last_date()
            )));
        }
        let rows = (last - d + 1) as usize;
        self.slice(0, rows)
    }

    /// Keeps only the last `rows` secondary rows (and the rates they touch).
    pub fn trailing(&self, rows: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Dimension("trailing window must keep at least one row".into()));
        }
        let start = self.n_rows().saturating_sub(rows);
        self.slice(start, self.n_rows())
    }

    fn slice(&self, row_start: usize, row_end: usize) -> Result<Self> {
        let d = self.support();
        let origin = shift(self.origin(), row_start as i64);
        let primary = self.primary[row_start..row_end + d].to_vec();
        let mut out = Self::from_parts(origin, primary, self.y[row_start..row_end].to_vec(), &self.delay)?;
        out.train = self.train[row_start..row_end].to_vec();
        out.variance = self.variance.as_ref().map(|v| v[row_start..row_end].to_vec());
        Ok(out)
    }

    /// Expected secondary counts `A p` for every row.
    pub fn predict(&self, p: &[f64]) -> Vec<f64> {
        self.conv.apply(p)
    }

    fn gaussian_variance(&self) -> Result<Vec<f64>> {
        match &self.variance {
            Some(v) => Ok(v.clone()),
            None => {
                if self.y.len() < 3 {
                    return Ok(vec![self.y.iter().sum::<f64>().max(VARIANCE_FLOOR); self.y.len()]);
                }
                let fit = smooth_gcv(&self.y)?;
                Ok(fit.fitted.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect())
            }
        }
    }

    /// Diagonal tail weights on the rows of `D^(1) p`, nonzero for the last
    /// `d + 1` differences.
    pub fn tail_weights(&self) -> Vec<f64> {
        let n = self.n_rates();
        let d = self.support();
        let mass = self.delay.mass_at(self.last_date());
        let mut w = vec![0.0; n - 1];
        // row i is p_{i+1} - p_i, attributed to day index t = i + 1
        for (i, wi) in w.iter_mut().enumerate() {
            let t = i + 1;
            let lag = n - 1 - t;
            if lag <= d {
                let f: f64 = mass.iter().take(lag + 1).sum();
                *wi = 1.0 / f.max(CDF_FLOOR);
            }
        }
        w
    }
}

/// Internal form consumed by the interior-point method.
pub(crate) struct Compiled<'a> {
    pub conv: &'a ConvolutionOperator,
    pub y: &'a [f64],
    /// Per-row loss weight: `1/N_train` on active training rows, else 0.
    pub row_weight: Vec<f64>,
    pub loss: LossKind,
    pub variance: Option<Vec<f64>>,
    pub diff_order: usize,
    /// Coefficient on `||D p||_1` after normalization.
    pub l1_weight: f64,
    /// Coefficient times weight on each `(D^(1) p)_i^2`, after normalization.
    pub quad_weight: Option<Vec<f64>>,
    /// Sparse equality row `sum_j e_j p_j = 0`.
    pub equality: Option<Vec<(usize, f64)>>,
}

impl<'a> Compiled<'a> {
    fn new(problem: &'a DeconvProblem, spec: &DeconvSpec) -> Result<Self> {
        spec.validate()?;
        let n = problem.n_rates();
        let k = spec.order + 1;
        if n <= k + 1 {
            return Err(Error::Dimension(format!(
                "{n} rates are too few for a penalty of order {}",
                spec.order
            )));
        }
        let active = problem
            .train
            .iter()
            .enumerate()
            .filter(|(r, t)| **t && problem.conv.row_sum(*r) > 0.0)
            .count();
        let n_train = problem.train.iter().filter(|t| **t).count();
        if n_train == 0 {
            return Err(Error::Dimension("no training rows left in the loss".into()));
        }
        let row_weight = problem
            .train
            .iter()
            .enumerate()
            .map(|(r, t)| if *t && problem.conv.row_sum(r) > 0.0 { 1.0 / n_train as f64 } else { 0.0 })
            .collect();
        if active == 0 {
            log::debug!("all training rows have zero primary history");
        }
        let variance = match spec.loss {
            LossKind::Gaussian => Some(problem.gaussian_variance()?),
            LossKind::Poisson => None,
        };
        let quad_weight = (spec.gamma > 0.0).then(|| {
            let scale = spec.gamma / (problem.support() + 1) as f64;
            problem.tail_weights().into_iter().map(|w| w * scale).collect()
        });
        let equality = spec.tail_constraint.then(|| {
            let coef = difference_coefficients(k);
            coef.into_iter()
                .enumerate()
                .map(|(i, c)| (n - 1 - k + i, c))
                .collect()
        });
        Ok(Self {
            conv: &problem.conv,
            y: &problem.y,
            row_weight,
            loss: spec.loss,
            variance,
            diff_order: k,
            l1_weight: spec.lambda / (n - k) as f64,
            quad_weight,
            equality,
        })
    }

    /// Loss and tail-penalty value.
    pub fn smooth_value(&self, p: &[f64]) -> f64 {
        let mu = self.conv.apply(p);
        self.smooth_value_mu(p, &mu)
    }

    pub fn smooth_value_mu(&self, p: &[f64], mu: &[f64]) -> f64 {
        let mut f = 0.0;
        for (r, w) in self.row_weight.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            f += w * self.phi(r, mu[r]);
        }
        if let Some(q) = &self.quad_weight {
            for (i, wi) in q.iter().enumerate() {
                if *wi != 0.0 {
                    f += wi * (p[i + 1] - p[i]).powi(2);
                }
            }
        }
        f
    }

    #[inline]
    pub fn phi(&self, r: usize, mu: f64) -> f64 {
        let y = self.y[r];
        match self.loss {
            LossKind::Poisson => {
                if y > 0.0 {
                    mu - y * mu.max(LOG_FLOOR).ln()
                } else {
                    mu
                }
            }
            LossKind::Gaussian => {
                let v = self.variance.as_ref().expect("gaussian variance")[r];
                (y - mu).powi(2) / v
            }
        }
    }

    /// First and second derivative of the per-row loss at `mu`.
    #[inline]
    pub fn dphi(&self, r: usize, mu: f64) -> (f64, f64) {
        let y = self.y[r];
        match self.loss {
            LossKind::Poisson => {
                let m = mu.max(LOG_FLOOR);
                (1.0 - y / m, y / (m * m))
            }
            LossKind::Gaussian => {
                let v = self.variance.as_ref().expect("gaussian variance")[r];
                (-2.0 * (y - mu) / v, 2.0 / v)
            }
        }
    }

    pub fn smooth_gradient_mu(&self, p: &[f64], mu: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = self
            .row_weight
            .iter()
            .enumerate()
            .map(|(r, w)| if *w == 0.0 { 0.0 } else { w * self.dphi(r, mu[r]).0 })
            .collect();
        let mut g = self.conv.apply_transpose(&v);
        if let Some(q) = &self.quad_weight {
            for (i, wi) in q.iter().enumerate() {
                if *wi != 0.0 {
                    let diff = 2.0 * wi * (p[i + 1] - p[i]);
                    g[i + 1] += diff;
                    g[i] -= diff;
                }
            }
        }
        g
    }

    pub fn l1_value(&self, p: &[f64]) -> f64 {
        if self.l1_weight == 0.0 {
            return 0.0;
        }
        let d = diff_matrix(self.diff_order, p.len()).expect("checked at compile");
        self.l1_weight * d.apply(p).iter().map(|v| v.abs()).sum::<f64>()
    }
}

fn check_box(p: &[f64]) -> Result<()> {
    match p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        Some((t, v)) => Err(Error::Probability { t, value: *v }),
        None => Ok(()),
    }
}

/// Full objective at `p`.
pub fn objective(problem: &DeconvProblem, spec: &DeconvSpec, p: &[f64]) -> Result<f64> {
    if p.len() != problem.n_rates() {
        return Err(Error::Dimension(format!("{} rates for a problem with {}", p.len(), problem.n_rates())));
    }
    check_box(p)?;
    let c = Compiled::new(problem, spec)?;
    let mu = c.conv.apply(p);
    for (r, w) in c.row_weight.iter().enumerate() {
        if *w != 0.0 && !c.phi(r, mu[r]).is_finite() {
            return Err(Error::Numeric { t: r });
        }
    }
    let f = c.smooth_value_mu(p, &mu) + c.l1_value(p);
    if !f.is_finite() {
        return Err(Error::Numeric { t: 0 });
    }
    Ok(f)
}

/// Gradient of the differentiable part (loss plus tail penalty).
pub fn smooth_gradient(problem: &DeconvProblem, spec: &DeconvSpec, p: &[f64]) -> Result<Vec<f64>> {
    let c = Compiled::new(problem, spec)?;
    let mu = c.conv.apply(p);
    Ok(c.smooth_gradient_mu(p, &mu))
}

/// Value of the differentiable part.
pub fn smooth_objective(problem: &DeconvProblem, spec: &DeconvSpec, p: &[f64]) -> Result<f64> {
    let c = Compiled::new(problem, spec)?;
    Ok(c.smooth_value(p))
}

/// Indices of `D^(k) p` entries larger than the knot tolerance.
pub fn knots(p: &[f64], diff_order: usize) -> Vec<usize> {
    let Ok(d) = diff_matrix(diff_order, p.len()) else {
        return Vec::new();
    };
    let scale = p.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    d.apply(p)
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > KNOT_TOL * scale)
        .map(|(i, _)| i)
        .collect()
}

fn near_polynomial(p: &[f64], diff_order: usize) -> bool {
    let Ok(d) = diff_matrix(diff_order, p.len()) else {
        return false;
    };
    let scale = p.iter().fold(1e-3f64, |a, v| a.max(v.abs()));
    d.apply(p).iter().all(|v| v.abs() <= SNAP_TOL * scale)
}

/// Solves the configured problem.
pub fn solve(problem: &DeconvProblem, spec: &DeconvSpec) -> Result<FitResult> {
    let compiled = Compiled::new(problem, spec)?;
    let out = ipm::solve(&compiled)?;
    let mut p: Vec<f64> = out.p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut objective = compiled.smooth_value(&p) + compiled.l1_value(&p);
    if near_polynomial(&p, compiled.diff_order) {
        // near the all-polynomial regime the interior-point iterate keeps
        // tiny differences; the exact polynomial wins when it is no worse
        if let Some(poly) = lambda_max::interior_polynomial(&compiled, 100) {
            let f = compiled.smooth_value(&poly) + compiled.l1_value(&poly);
            if f <= objective {
                p = poly;
                objective = f;
            }
        }
    }
    if !objective.is_finite() {
        return Err(Error::Numeric { t: 0 });
    }
    Ok(FitResult {
        knots: knots(&p, spec.order + 1),
        curve: SeverityCurve::new(problem.origin(), p)?,
        objective,
        iterations: out.iterations,
        converged: out.converged,
        kkt_residual: out.kkt_residual,
        burn: problem.support(),
    })
}

fn check_length(problem: &DeconvProblem) -> Result<()> {
    let d = problem.support();
    if problem.n_rows() < d + 5 {
        return Err(Error::Dimension(format!(
            "{} secondary counts are too few for a {d}-day delay",
            problem.n_rows()
        )));
    }
    Ok(())
}

/// Retrospective estimate on `[y.origin - d, y.end]`.
pub fn solve_retrospective(
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    order: usize,
    lambda: f64,
) -> Result<FitResult> {
    let problem = DeconvProblem::new(x, y, delay)?;
    check_length(&problem)?;
    solve(&problem, &DeconvSpec::retrospective(order, lambda))
}

/// Real-time estimate using data through `through`; the last curve value is
/// the estimate for that day.
pub fn solve_realtime(
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    order: usize,
    lambda: f64,
    gamma: f64,
    through: NaiveDate,
) -> Result<FitResult> {
    let problem = DeconvProblem::new(x, y, delay)?.through(through)?;
    check_length(&problem)?;
    solve(&problem, &DeconvSpec::realtime(order, lambda, gamma))
}

/// Gaussian-loss estimate; with `realtime = Some((gamma, T))` the tail
/// penalty and constraint are added and data after `T` is dropped.
pub fn solve_gaussian(
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    order: usize,
    lambda: f64,
    realtime: Option<(f64, NaiveDate)>,
) -> Result<FitResult> {
    let mut problem = DeconvProblem::new(x, y, delay)?;
    let spec = match realtime {
        Some((gamma, t)) => {
            problem = problem.through(t)?;
            DeconvSpec::realtime(order, lambda, gamma)
        }
        None => DeconvSpec::retrospective(order, lambda),
    };
    solve(&problem, &spec.with_loss(LossKind::Gaussian))
}

#[cfg(test)]
mod tests;
