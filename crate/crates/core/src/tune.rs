//! Hyperparameter selection by structured cross-validation and rolling
//! forward-validation, plus MAE aggregation across regions and replicates.

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::ratios::{ratio_estimate, RatioKind, Setting};
use crate::series::{day_offset, shift, CountSeries};
use crate::solver::{self, DeconvProblem, DeconvSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    /// Smallest mean error; ties go to the larger candidate.
    Min,
    /// Largest candidate whose mean error is within one standard error of
    /// the minimum.
    OneSe,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Min => "min",
            Rule::OneSe => "1se",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Rule::Min),
            "1se" => Ok(Rule::OneSe),
            _ => Err(Error::Parse(format!("unknown selection rule {s:?}"))),
        }
    }
}

/// Strictly increasing, nonnegative candidate values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    values: Vec<f64>,
}

impl Grid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("empty grid".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter("grid values must be finite and nonnegative".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("grid must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// `n` points equally spaced in log scale over `[lo, hi]`.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || n == 0 {
            return Err(Error::Parameter(format!("bad log grid {lo}..{hi} with {n} points")));
        }
        if n == 1 {
            return Self::new(vec![hi]);
        }
        let (a, b) = (lo.ln(), hi.ln());
        Self::new(
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect(),
        )
    }

    /// `n` log-spaced penalty levels from `1e-4 * lambda_max` to `lambda_max`.
    pub fn lambda(lambda_max: f64, n: usize) -> Result<Self> {
        Self::log_spaced(1e-4 * lambda_max, lambda_max, n)
    }

    /// Default tail-penalty grid: 10 points over `[1e-2, 1e4]`.
    pub fn gamma_default() -> Self {
        Self::log_spaced(1e-2, 1e4, 10).expect("valid grid")
    }

    /// Default smoothing windows in days.
    pub fn window_default() -> Self {
        Self::new(vec![1.0, 7.0, 14.0, 21.0, 28.0]).expect("valid grid")
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
}

/// Mean validation error per candidate with both rule selections. Failed
/// candidates carry an infinite mean and are never selected.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCurve {
    pub candidates: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub min_index: usize,
    pub one_se_index: usize,
}

impl ValidationCurve {
    /// Builds the curve from per-candidate error samples (one per fold or
    /// forward step); `None` marks a failed candidate.
    pub fn from_errors(candidates: &[f64], errors: &[Option<Vec<f64>>]) -> Result<Self> {
        if candidates.len() != errors.len() || candidates.is_empty() {
            return Err(Error::Dimension(format!(
                "{} candidates with {} error sets",
                candidates.len(),
                errors.len()
            )));
        }
        let mut mean = Vec::with_capacity(errors.len());
        let mut se = Vec::with_capacity(errors.len());
        for e in errors {
            match e {
                Some(e) if !e.is_empty() && e.iter().all(|v| v.is_finite()) => {
                    let k = e.len() as f64;
                    let m = e.iter().sum::<f64>() / k;
                    let var = if e.len() > 1 {
                        e.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (k - 1.0)
                    } else {
                        0.0
                    };
                    mean.push(m);
                    se.push((var / k).sqrt());
                }
                _ => {
                    mean.push(f64::INFINITY);
                    se.push(f64::INFINITY);
                }
            }
        }
        Self::from_summary(candidates.to_vec(), mean, se)
    }

    pub fn from_summary(candidates: Vec<f64>, mean: Vec<f64>, se: Vec<f64>) -> Result<Self> {
        if candidates.len() != mean.len() || mean.len() != se.len() || mean.is_empty() {
            return Err(Error::Dimension("candidate, mean and se lengths differ".into()));
        }
        let Some(min_index) = select_min(&mean) else {
            return Err(Error::Tuning("every candidate failed".into()));
        };
        let bar = mean[min_index] + se[min_index];
        let one_se_index = (0..mean.len()).rev().find(|&i| mean[i] <= bar).unwrap_or(min_index);
        Ok(Self {
            candidates,
            mean,
            se,
            min_index,
            one_se_index,
        })
    }

    pub fn index(&self, rule: Rule) -> usize {
        match rule {
            Rule::Min => self.min_index,
            Rule::OneSe => self.one_se_index,
        }
    }

    pub fn selected(&self, rule: Rule) -> f64 {
        self.candidates[self.index(rule)]
    }

    pub fn best_error(&self) -> f64 {
        self.mean[self.min_index]
    }
}

fn select_min(mean: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, m) in mean.iter().enumerate() {
        if !m.is_finite() {
            continue;
        }
        match best {
            Some(b) if mean[b] < *m => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Fold `j` holds the indices `i < n` with `i % k == j`.
pub fn cv_folds(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {k}")));
    }
    if n < 2 * k {
        return Err(Error::Parameter(format!("{n} times cannot fill {k} folds of size 2")));
    }
    Ok((0..k).map(|j| (j..n).step_by(k).collect()).collect())
}

/// Estimator being tuned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Deconvolution; candidates are values of `lambda` in `spec`.
    Deconv(DeconvSpec),
    /// Ratio estimator; candidates are smoothing windows.
    Ratio(RatioKind),
}

fn mean_abs(pred: &[f64], y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&r| (pred[r] - y[r]).abs()).sum::<f64>() / rows.len() as f64
}

/// Rates on the problem's axis from a ratio estimator with smoothing
/// window `window`, computed on the problem's own counts.
pub fn ratio_rates(
    problem: &DeconvProblem,
    kind: RatioKind,
    setting: Setting,
    window: usize,
    holdout: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let (x, y) = problem_counts(problem);
    let est = ratio_estimate(&x, &y, problem.delay(), kind, setting, window, holdout)?;
    Ok(est.filled()?.values().to_vec())
}

fn problem_counts(problem: &DeconvProblem) -> (CountSeries, CountSeries) {
    let x = CountSeries::new(
        problem.origin(),
        problem.primary().iter().map(|v| v.round() as u64).collect(),
    );
    let y = CountSeries::new(
        problem.row_date(0),
        problem.secondary().iter().map(|v| v.round() as u64).collect(),
    );
    (x, y)
}

fn window_of(candidate: f64) -> Result<usize> {
    if candidate < 1.0 || candidate.fract() != 0.0 {
        return Err(Error::Parameter(format!("smoothing window {candidate} is not a positive integer")));
    }
    Ok(candidate as usize)
}

/// Fits `method` at `candidate` with the rows in `holdout` removed from the
/// data and returns rates on the problem's axis.
fn fit_rates(problem: &DeconvProblem, method: &Method, candidate: f64, holdout: &[usize]) -> Result<Vec<f64>> {
    match method {
        Method::Deconv(spec) => {
            let spec = DeconvSpec { lambda: candidate, ..*spec };
            let p = problem.clone().with_holdout(holdout)?;
            Ok(solver::solve(&p, &spec)?.curve.values().to_vec())
        }
        Method::Ratio(kind) => {
            let mut mask = vec![false; problem.n_rows()];
            for &r in holdout {
                mask[r] = true;
            }
            ratio_rates(problem, *kind, Setting::Retrospective, window_of(candidate)?, Some(&mask))
        }
    }
}

/// K-fold cross-validation: each fold's secondary counts are held out, the
/// method is refit, and held-out counts are predicted by reconvolution.
pub fn cv_tune(problem: &DeconvProblem, method: &Method, grid: &Grid, k: usize) -> Result<ValidationCurve> {
    let folds = cv_folds(problem.n_rows(), k)?;
    let y = problem.secondary();
    let mut failures = Vec::new();
    let errors: Vec<Option<Vec<f64>>> = grid
        .values()
        .iter()
        .map(|&c| {
            let per_fold: Result<Vec<f64>> = folds
                .iter()
                .map(|fold| {
                    let p = fit_rates(problem, method, c, fold)?;
                    Ok(mean_abs(&problem.predict(&p), y, fold))
                })
                .collect();
            per_fold
                .map_err(|e| {
                    log::warn!("candidate {c} failed: {e}");
                    failures.push(format!("{c}: {e}"));
                })
                .ok()
        })
        .collect();
    ValidationCurve::from_errors(grid.values(), &errors).map_err(|_| {
        Error::Tuning(format!("all candidates failed: {}", failures.join("; ")))
    })
}

/// Prediction of `Y_{s+1}` from rates fitted through `s` (the last entry of
/// `p`), extrapolating `p_{s+1} = 2 p_s - p_{s-1}` clamped to `[0, 1]`.
fn one_step(next: &DeconvProblem, p: &[f64]) -> f64 {
    let n = p.len();
    let ext = (2.0 * p[n - 1] - p[n.saturating_sub(2)]).clamp(0.0, 1.0);
    let mut q = p.to_vec();
    q.push(ext);
    *next.predict(&q).last().expect("nonempty prediction")
}

/// Rolling one-step-ahead validation over the last `m` days of `problem`.
/// `fit(i, sub)` returns rates for candidate `i` from the problem cut at
/// day `s`; the error for step `s` is `|Y_{s+1} - Yhat_{s+1}|`.
pub fn forward_validate<F>(problem: &DeconvProblem, grid: &Grid, m: usize, mut fit: F) -> Result<ValidationCurve>
where
    F: FnMut(usize, &DeconvProblem) -> Result<Vec<f64>>,
{
    if m == 0 {
        return Err(Error::Parameter("forward validation needs at least one step".into()));
    }
    let rows = problem.n_rows();
    if rows < m + 2 {
        return Err(Error::Dimension(format!("{rows} secondary counts cannot support {m} forward steps")));
    }
    let last = problem.last_date();
    let steps: Vec<(DeconvProblem, DeconvProblem)> = (1..=m)
        .rev()
        .map(|back| {
            let s = shift(last, -(back as i64));
            Ok((problem.through(s)?, problem.through(shift(s, 1))?))
        })
        .collect::<Result<_>>()?;
    let mut failures = Vec::new();
    let errors: Vec<Option<Vec<f64>>> = (0..grid.len())
        .map(|i| {
            let e: Result<Vec<f64>> = steps
                .iter()
                .map(|(cut, next)| {
                    let p = fit(i, cut)?;
                    let y = *next.secondary().last().expect("nonempty");
                    Ok((one_step(next, &p) - y).abs())
                })
                .collect();
            e.map_err(|e| {
                log::warn!("candidate {} failed: {e}", grid.values()[i]);
                failures.push(format!("{}: {e}", grid.values()[i]));
            })
            .ok()
        })
        .collect();
    ValidationCurve::from_errors(grid.values(), &errors).map_err(|_| {
        Error::Tuning(format!("all candidates failed: {}", failures.join("; ")))
    })
}

/// Tail-penalty selection for real-time deconvolution at `lambda`, which
/// has already been chosen with `gamma = 0`.
pub fn forward_validate_gamma(
    problem: &DeconvProblem,
    order: usize,
    lambda: f64,
    grid: &Grid,
    m: usize,
) -> Result<ValidationCurve> {
    forward_validate(problem, grid, m, |i, cut| {
        let spec = DeconvSpec::realtime(order, lambda, grid.values()[i]);
        Ok(solver::solve(cut, &spec)?.curve.values().to_vec())
    })
}

/// Smoothing-window selection for a real-time ratio estimator.
pub fn forward_validate_window(problem: &DeconvProblem, kind: RatioKind, grid: &Grid, m: usize) -> Result<ValidationCurve> {
    // trailing estimates through s use no data after s, so one pass over
    // the full window serves every step
    let full: Vec<Vec<f64>> = grid
        .values()
        .iter()
        .map(|&w| ratio_rates(problem, kind, Setting::RealTime, window_of(w)?, None))
        .collect::<Result<_>>()?;
    forward_validate(problem, grid, m, |i, cut| Ok(full[i][..cut.n_rates()].to_vec()))
}

/// Order with the smallest best validation error; ties go to the smaller
/// order.
pub fn tune_order(results: &[(usize, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(m, e) in results {
        if !e.is_finite() {
            continue;
        }
        match best {
            Some((bm, be)) if be < e || (be == e && bm < m) => {}
            _ => best = Some((m, e)),
        }
    }
    best.map(|(m, _)| m)
        .ok_or_else(|| Error::Tuning("no order produced a finite validation error".into()))
}

/// Candidate minimizing the true error; ties go to the larger candidate.
pub fn oracle_index(errors: &[f64]) -> Result<usize> {
    select_min(errors).ok_or_else(|| Error::Tuning("no candidate has a finite error".into()))
}

/// Mean absolute error of `estimate` against `truth` on `dates`.
pub fn mae_on(
    estimate: &dyn Fn(NaiveDate) -> Option<f64>,
    truth: &dyn Fn(NaiveDate) -> Option<f64>,
    dates: &[NaiveDate],
) -> Result<f64> {
    if dates.is_empty() {
        return Err(Error::Dimension("no evaluation dates".into()));
    }
    let mut acc = 0.0;
    for &d in dates {
        match (estimate(d), truth(d)) {
            (Some(a), Some(b)) => acc += (a - b).abs(),
            _ => return Err(Error::Alignment(format!("no estimate or truth on {d}"))),
        }
    }
    Ok(acc / dates.len() as f64)
}

/// Every `cadence`-th day from `start` through `end` inclusive.
pub fn evaluation_dates(start: NaiveDate, end: NaiveDate, cadence: usize) -> Vec<NaiveDate> {
    let span = day_offset(start, end);
    if span < 0 || cadence == 0 {
        return Vec::new();
    }
    (0..=span).step_by(cadence).map(|i| shift(start, i)).collect()
}

/// Per-cell MAE of one method, indexed `[region][replicate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodCells {
    pub method: String,
    pub cells: Vec<Vec<f64>>,
}

/// Mean and standard error of one aggregated quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Absent when some region has fewer than two replicates.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub mae: Estimate,
    /// Percentage improvement over each named baseline, computed per cell.
    pub improvements: Vec<(String, Estimate)>,
}

/// `(1/R) sum_r mean_i v_ri` with standard error
/// `sqrt((1/R^2) sum_r var_i(v_ri) / I_r)`.
pub fn aggregate(cells: &[Vec<f64>]) -> Result<Estimate> {
    if cells.is_empty() || cells.iter().any(|r| r.is_empty()) {
        return Err(Error::Dimension("every region needs at least one replicate".into()));
    }
    let r = cells.len() as f64;
    let mut mean = 0.0;
    let mut var_sum = 0.0;
    let mut se_defined = true;
    for reps in cells {
        let i = reps.len() as f64;
        let m = reps.iter().sum::<f64>() / i;
        mean += m / r;
        if reps.len() < 2 {
            se_defined = false;
        } else {
            let v = reps.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (i - 1.0);
            var_sum += v / i;
        }
    }
    Ok(Estimate {
        mean,
        se: se_defined.then(|| (var_sum / (r * r)).sqrt()),
    })
}

/// Summary table with improvements over `baselines` (method names present
/// in `methods`).
pub fn mae_report(methods: &[MethodCells], baselines: &[&str]) -> Result<Vec<SummaryRow>> {
    let shape = |m: &MethodCells| m.cells.iter().map(|r| r.len()).collect::<Vec<_>>();
    let Some(first) = methods.first() else {
        return Err(Error::Dimension("no methods to report".into()));
    };
    let reference = shape(first);
    if let Some(m) = methods.iter().find(|m| shape(m) != reference) {
        return Err(Error::Dimension(format!("method {} has a different cell layout", m.method)));
    }
    let base: Vec<&MethodCells> = baselines
        .iter()
        .map(|b| {
            methods
                .iter()
                .find(|m| m.method == *b)
                .ok_or_else(|| Error::Validation(format!("baseline {b} not among methods")))
        })
        .collect::<Result<_>>()?;
    methods
        .iter()
        .map(|m| {
            let improvements = base
                .iter()
                .map(|b| {
                    let rel: Vec<Vec<f64>> = m
                        .cells
                        .iter()
                        .zip(&b.cells)
                        .map(|(mr, br)| mr.iter().zip(br).map(|(a, c)| 100.0 * (c - a) / c).collect())
                        .collect();
                    Ok((b.method.clone(), aggregate(&rel)?))
                })
                .collect::<Result<_>>()?;
            Ok(SummaryRow {
                method: m.method.clone(),
                mae: aggregate(&m.cells)?,
                improvements,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::{discretized_gamma, DelayDistribution};
    use crate::model::expected_secondary;
    use crate::series::{default_origin, SeverityCurve};

    #[test]
    fn fold_examples() {
        assert_eq!(cv_folds(4, 2).unwrap(), vec![vec![0, 2], vec![1, 3]]);
        assert!(cv_folds(100, 5).unwrap().iter().all(|f| f.len() == 20));
        assert!(cv_folds(3, 5).is_err());
        assert!(cv_folds(10, 1).is_err());
    }

    #[test]
    fn rule_examples() {
        let c = ValidationCurve::from_summary(vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0], vec![0.0; 3]).unwrap();
        assert_eq!(c.selected(Rule::Min), 2.0);
        let c = ValidationCurve::from_summary(vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 1.05], vec![0.1; 3]).unwrap();
        assert_eq!(c.selected(Rule::Min), 2.0);
        assert_eq!(c.selected(Rule::OneSe), 3.0);
        let tie = ValidationCurve::from_summary(vec![1.0, 2.0], vec![1.0, 1.0], vec![0.0; 2]).unwrap();
        assert_eq!(tie.min_index, 1);
    }

    #[test]
    fn failed_candidates_are_skipped() {
        let c = ValidationCurve::from_errors(&[1.0, 2.0], &[None, Some(vec![1.0, 3.0])]).unwrap();
        assert_eq!(c.min_index, 1);
        assert!((c.se[1] - 1.0).abs() < 1e-15);
        assert!(ValidationCurve::from_errors(&[1.0], &[None]).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![1.0, 1.0]).is_err());
        assert!(Grid::new(vec![-1.0, 1.0]).is_err());
        let g = Grid::lambda(2.0, 20).unwrap();
        assert_eq!(g.len(), 20);
        assert!((g.values()[0] - 2e-4).abs() < 1e-16);
        assert_eq!(g.values()[19], 2.0);
        assert_eq!(Grid::gamma_default().len(), 10);
    }

    #[test]
    fn order_examples() {
        assert_eq!(tune_order(&[(0, 0.9), (1, 1.0), (2, 1.1)]).unwrap(), 0);
        assert_eq!(tune_order(&[(2, 0.5)]).unwrap(), 2);
        assert_eq!(tune_order(&[(1, 0.5), (0, 0.5)]).unwrap(), 0);
    }

    #[test]
    fn report_examples() {
        let one = MethodCells {
            method: "a".into(),
            cells: vec![vec![0.5]],
        };
        let r = mae_report(&[one], &[]).unwrap();
        assert_eq!(r[0].mae.se, None);

        let a = MethodCells {
            method: "a".into(),
            cells: vec![vec![1.0, 3.0], vec![2.0, 2.0, 5.0]],
        };
        let b = MethodCells {
            method: "b".into(),
            cells: vec![vec![2.0, 4.0], vec![4.0, 4.0, 10.0]],
        };
        let r = mae_report(&[a, b], &["b"]).unwrap();
        // region means 2 and 3; variances 2 and 3
        assert!((r[0].mae.mean - 2.5).abs() < 1e-12);
        let se = ((2.0 / 2.0 + 3.0 / 3.0) / 4.0f64).sqrt();
        assert!((r[0].mae.se.unwrap() - se).abs() < 1e-12);
        // improvements 50, 25 | 50, 50, 50
        let imp = r[0].improvements[0].1;
        assert!((imp.mean - (37.5 + 50.0) / 2.0).abs() < 1e-12);
        assert_eq!(r[1].improvements[0].1.mean, 0.0);
    }

    #[test]
    fn noiseless_data_selects_zero_error_candidate() {
        // held-out days are filled from neighbours, so only W = 1 misses
        // the kink between the two linear pieces by a fixed amount
        let delay = DelayDistribution::point_mass(0);
        let x = CountSeries::from_values(vec![1000; 40]);
        let y = CountSeries::from_values((0..40).map(|t| 100 + 2 * t).collect());
        let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
        let c = cv_tune(&problem, &Method::Ratio(RatioKind::Lagged { lag: 0 }), &Grid::new(vec![1.0, 3.0]).unwrap(), 5).unwrap();
        assert_eq!(c.selected(Rule::Min), 3.0);
        assert!(c.mean[0] > 1e-3);
    }

    #[test]
    fn constant_data_ties_under_forward_validation() {
        let delay = discretized_gamma(3.0, 2.7, 8).unwrap();
        let x = CountSeries::new(default_origin(), vec![500; 60]);
        let p = SeverityCurve::constant(x.origin(), 60, 0.1).unwrap();
        let mean = expected_secondary(&x, &delay, &p).unwrap();
        let y = CountSeries::new(mean.origin, mean.mean.iter().map(|v| v.round() as u64).collect());
        let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
        let c = forward_validate_window(&problem, RatioKind::Convolutional, &Grid::window_default(), 5).unwrap();
        assert!(c.mean.iter().all(|m| *m < 1e-9));
        assert_eq!(c.selected(Rule::OneSe), 28.0);
    }

    #[test]
    fn single_step_forward_validation() {
        let delay = DelayDistribution::new(vec![0.5, 0.5]).unwrap();
        let x = CountSeries::from_values(vec![100; 12]);
        let y = CountSeries::new(x.date(1), (1..12).map(|t| 10 + t as u64).collect());
        let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
        let grid = Grid::new(vec![1.0]).unwrap();
        let c = forward_validate(&problem, &grid, 1, |_, cut| Ok(vec![0.1; cut.n_rates()])).unwrap();
        // prediction 10 against the last count 21
        assert!((c.mean[0] - 11.0).abs() < 1e-12);
    }
}
