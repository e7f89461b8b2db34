//! Simulation study driver: one cell per (region, replicate, delay offset).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, MethodName, NoiseKind};
use super::synth::{region_data, RegionData};
use crate::delay::{misspecify_delay, DelayDistribution};
use crate::error::{Error, Result};
use crate::ratios::{default_lag, ratio_estimate, RatioEstimate, RatioKind, Setting};
use crate::series::{shift, CountSeries, SeverityCurve};
use crate::simulate::{sample_secondary, NoiseModel};
use crate::solver::{lambda_max_bound, solve, DeconvProblem, DeconvSpec};
use crate::tune::{
    aggregate, cv_tune, evaluation_dates, forward_validate_gamma, forward_validate_window, mae_on, mae_report,
    oracle_index, tune_order, Estimate, Grid, MethodCells, Rule, ValidationCurve,
};

pub const ORACLE: &str = "oracle";
/// Rule label for the per-method rule with the lowest mean error.
pub const BEST: &str = "best";
const BASELINES: [&str; 2] = ["conv", "lagged"];

/// Coordinates of one simulation cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellId {
    pub region: usize,
    pub replicate: usize,
    /// Shift applied to the estimation delay mean; 0 is correct specification.
    pub offset: f64,
}

/// Estimates and error of one method under one selection rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: String,
    pub rule: String,
    /// Selected hyperparameters; real-time cells list every refresh.
    pub hyper: String,
    pub mae: f64,
    /// `(date, estimate, clipped)` on the evaluation dates.
    pub estimates: Vec<(NaiveDate, f64, bool)>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub id: CellId,
    pub seed: u64,
    pub outcome: std::result::Result<Vec<MethodOutcome>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryLine {
    pub rule: String,
    pub method: String,
    pub mae: Estimate,
    pub improvements: Vec<(String, Estimate)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisspecLine {
    pub offset: f64,
    pub rule: String,
    pub method: String,
    pub mae: Estimate,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub regions: Vec<String>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryLine>,
    pub misspec: Vec<MisspecLine>,
}

impl RunReport {
    pub fn summary_for(&self, rule: &str, method: &str) -> Option<&SummaryLine> {
        self.summary.iter().find(|l| l.rule == rule && l.method == method)
    }

    pub fn misspec_for(&self, offset: f64, rule: &str, method: &str) -> Option<&MisspecLine> {
        self.misspec
            .iter()
            .find(|l| l.offset == offset && l.rule == rule && l.method == method)
    }

    /// Summary lines under each method's best rule.
    pub fn best_rules(&self) -> Vec<&SummaryLine> {
        self.summary.iter().filter(|l| l.rule == BEST).collect()
    }

    /// Name of the rule whose mean error the `best` line reproduces.
    pub fn best_rule_of(&self, method: &str) -> Option<&str> {
        let best = self.summary_for(BEST, method)?;
        self.summary
            .iter()
            .find(|l| l.method == method && l.rule != BEST && l.rule != ORACLE && l.mae.mean == best.mae.mean)
            .map(|l| l.rule.as_str())
    }

    pub fn failures(&self) -> impl Iterator<Item = (&CellResult, &str)> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().err().map(|e| (c, e.as_str())))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the secondary counts for one region and replicate. Offsets
/// share it, so misspecified fits see the same data.
pub fn cell_seed(seed: u64, region: usize, replicate: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ region as u64) ^ replicate as u64)
}

/// Draws the secondary counts of one replicate.
pub fn simulate_cell(cfg: &ExperimentConfig, region: &RegionData, seed: u64) -> Result<CountSeries> {
    let noise = match cfg.noise {
        NoiseKind::PoissonBinomial => NoiseModel::PoissonBinomial,
        NoiseKind::BetaBinomial => NoiseModel::BetaBinomial {
            beta: region.config.dispersion,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_secondary(&region.primary, &region.delay, &region.truth, noise, &mut rng)
}

fn hyper_window(w: f64) -> String {
    format!("window={w}")
}

fn hyper_lambda(l: f64) -> String {
    format!("lambda={l:.6e}")
}

struct Evaluation<'a> {
    dates: Vec<NaiveDate>,
    truth: &'a SeverityCurve,
}

impl Evaluation<'_> {
    fn outcome(
        &self,
        method: &str,
        rule: &str,
        hyper: String,
        estimate: &dyn Fn(NaiveDate) -> Option<f64>,
        clipped: &dyn Fn(NaiveDate) -> bool,
    ) -> Result<MethodOutcome> {
        let mae = mae_on(estimate, &|t| self.truth.at(t), &self.dates)?;
        let estimates = self
            .dates
            .iter()
            .map(|&t| (t, estimate(t).unwrap_or(f64::NAN), clipped(t)))
            .collect();
        Ok(MethodOutcome {
            method: method.to_string(),
            rule: rule.to_string(),
            hyper,
            mae,
            estimates,
        })
    }

    fn mae(&self, curve: &SeverityCurve) -> Result<f64> {
        mae_on(&|t| curve.at(t), &|t| self.truth.at(t), &self.dates)
    }
}

fn ratio_kind(method: MethodName, delay: &DelayDistribution) -> Option<RatioKind> {
    match method {
        MethodName::Lagged => Some(RatioKind::Lagged { lag: default_lag(delay) }),
        MethodName::Conv => Some(RatioKind::Convolutional),
        _ => None,
    }
}

fn window_of(w: f64) -> usize {
    w as usize
}

/// Real-time deconvolution tunes lambda and gamma under separate rules.
fn rule_pairs(cfg: &ExperimentConfig) -> Vec<(Rule, Rule)> {
    cfg.rules
        .iter()
        .flat_map(|&a| cfg.rules.iter().map(move |&b| (a, b)))
        .collect()
}

/// `min` when both rules agree, otherwise `lambda-rule/gamma-rule`.
fn pair_label((a, b): (Rule, Rule)) -> String {
    if a == b {
        a.name().to_string()
    } else {
        format!("{}/{}", a.name(), b.name())
    }
}

/// Every CV rule label a method can report under.
fn cv_rule_labels(cfg: &ExperimentConfig) -> Vec<String> {
    if cfg.setting == Setting::RealTime && !deconv_orders(cfg).is_empty() {
        rule_pairs(cfg).into_iter().map(pair_label).collect()
    } else {
        cfg.rules.iter().map(|r| r.name().to_string()).collect()
    }
}

fn rules_with_oracle(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = cv_rule_labels(cfg);
    if cfg.oracle && cfg.setting == Setting::Retrospective {
        out.push(ORACLE.into());
    }
    out
}

// ---------------------------------------------------------------- retrospective

fn ratio_retrospective(
    cfg: &ExperimentConfig,
    problem: &DeconvProblem,
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    method: MethodName,
    eval: &Evaluation,
) -> Result<Vec<MethodOutcome>> {
    let kind = ratio_kind(method, delay).expect("ratio method");
    let label = method.label();
    let estimates: Vec<(RatioEstimate, SeverityCurve)> = cfg
        .windows
        .values()
        .iter()
        .map(|&w| {
            let est = ratio_estimate(x, y, delay, kind, Setting::Retrospective, window_of(w), None)?;
            let filled = est.filled()?;
            Ok((est, filled))
        })
        .collect::<Result<_>>()?;
    let cv = cv_tune(problem, &crate::tune::Method::Ratio(kind), &cfg.windows, cfg.folds)?;
    let mut out = Vec::new();
    let mut emit = |rule: &str, i: usize| -> Result<()> {
        let (est, filled) = &estimates[i];
        out.push(eval.outcome(
            &label,
            rule,
            hyper_window(cfg.windows.values()[i]),
            &|t| filled.at(t),
            &|t| est.clipped_at(t),
        )?);
        Ok(())
    };
    for rule in &cfg.rules {
        emit(rule.name(), cv.index(*rule))?;
    }
    if cfg.oracle {
        let errors = estimates
            .iter()
            .map(|(_, c)| eval.mae(c))
            .collect::<Result<Vec<_>>>()?;
        emit(ORACLE, oracle_index(&errors)?)?;
    }
    Ok(out)
}

struct DeconvRetro {
    order: usize,
    cv: ValidationCurve,
    outcomes: Vec<MethodOutcome>,
}

fn deconv_retrospective(
    cfg: &ExperimentConfig,
    problem: &DeconvProblem,
    order: usize,
    eval: &Evaluation,
) -> Result<DeconvRetro> {
    let base = DeconvSpec::retrospective(order, 0.0);
    let bound = lambda_max_bound(problem, &base, cfg.lambda_max_iterations)?;
    let grid = Grid::lambda(bound.value, cfg.lambda_points)?;
    let cv = cv_tune(problem, &crate::tune::Method::Deconv(base), &grid, cfg.folds)?;
    let mut needed: BTreeSet<usize> = cfg.rules.iter().map(|r| cv.index(*r)).collect();
    if cfg.oracle {
        needed.extend(0..grid.len());
    }
    let mut fits: Vec<Option<SeverityCurve>> = vec![None; grid.len()];
    for &i in &needed {
        let spec = DeconvSpec::retrospective(order, grid.values()[i]);
        fits[i] = Some(solve(problem, &spec)?.curve);
    }
    let label = MethodName::Deconv(order).label();
    let emit = |rule: &str, i: usize| -> Result<MethodOutcome> {
        let curve = fits[i].as_ref().expect("fitted candidate");
        eval.outcome(&label, rule, hyper_lambda(grid.values()[i]), &|t| curve.at(t), &|_| false)
    };
    let mut outcomes = cfg
        .rules
        .iter()
        .map(|r| emit(r.name(), cv.index(*r)))
        .collect::<Result<Vec<_>>>()?;
    if cfg.oracle {
        let errors = fits
            .iter()
            .map(|c| eval.mae(c.as_ref().expect("all candidates fitted")))
            .collect::<Result<Vec<_>>>()?;
        outcomes.push(emit(ORACLE, oracle_index(&errors)?)?);
    }
    Ok(DeconvRetro { order, cv, outcomes })
}

/// Order selection over fitted deconvolution results.
fn tuned_order_outcomes(cfg: &ExperimentConfig, fits: &[DeconvRetro]) -> Result<Vec<MethodOutcome>> {
    let label = MethodName::DeconvTuned.label();
    let order = tune_order(&fits.iter().map(|f| (f.order, f.cv.best_error())).collect::<Vec<_>>())?;
    let chosen = fits.iter().find(|f| f.order == order).expect("tuned order was fitted");
    let relabel = |o: &MethodOutcome| MethodOutcome {
        method: label.clone(),
        hyper: format!("order={};{}", order_of(&o.method), o.hyper),
        ..o.clone()
    };
    let mut out: Vec<MethodOutcome> = cfg
        .rules
        .iter()
        .map(|r| relabel(chosen.outcomes.iter().find(|o| o.rule == r.name()).expect("rule outcome")))
        .collect();
    if cfg.oracle {
        let best = fits
            .iter()
            .filter_map(|f| f.outcomes.iter().find(|o| o.rule == ORACLE))
            .fold(None::<&MethodOutcome>, |acc, o| match acc {
                Some(a) if a.mae <= o.mae => Some(a),
                _ => Some(o),
            })
            .expect("oracle outcomes");
        out.push(relabel(best));
    }
    Ok(out)
}

fn order_of(label: &str) -> &str {
    label.strip_prefix("deconv-").unwrap_or(label)
}

fn deconv_orders(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut orders = BTreeSet::new();
    for m in &cfg.methods {
        match m {
            MethodName::Deconv(o) => {
                orders.insert(*o);
            }
            MethodName::DeconvTuned => orders.extend(0..=2),
            _ => {}
        }
    }
    orders.into_iter().collect()
}

fn retrospective_cell(
    cfg: &ExperimentConfig,
    region: &RegionData,
    y: &CountSeries,
    delay: &DelayDistribution,
) -> Result<Vec<MethodOutcome>> {
    let x = &region.primary;
    let problem = DeconvProblem::new(x, y, delay)?;
    let burn = cfg.burn as i64;
    let eval = Evaluation {
        dates: evaluation_dates(
            shift(problem.origin(), burn),
            shift(problem.last_date(), -burn),
            cfg.cadence,
        ),
        truth: &region.truth,
    };
    if eval.dates.is_empty() {
        return Err(Error::Dimension("no evaluation dates after burn-in".into()));
    }
    let mut deconv = Vec::new();
    for order in deconv_orders(cfg) {
        deconv.push(deconv_retrospective(cfg, &problem, order, &eval)?);
    }
    let mut out = Vec::new();
    for &method in &cfg.methods {
        match method {
            MethodName::Lagged | MethodName::Conv => {
                out.extend(ratio_retrospective(cfg, &problem, x, y, delay, method, &eval)?)
            }
            MethodName::Deconv(o) => {
                let f = deconv.iter().find(|f| f.order == o).expect("order fitted");
                out.extend(f.outcomes.iter().cloned());
            }
            MethodName::DeconvTuned => out.extend(tuned_order_outcomes(cfg, &deconv)?),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- real time

/// Hyperparameter refresh schedule over the estimation dates.
struct Schedule {
    dates: Vec<NaiveDate>,
    stride: usize,
}

impl Schedule {
    fn retune(&self, i: usize) -> bool {
        i % self.stride == 0
    }
}

fn realtime_ratio(
    cfg: &ExperimentConfig,
    full: &DeconvProblem,
    x: &CountSeries,
    y: &CountSeries,
    delay: &DelayDistribution,
    method: MethodName,
    schedule: &Schedule,
    eval: &Evaluation,
) -> Result<Vec<MethodOutcome>> {
    let kind = ratio_kind(method, delay).expect("ratio method");
    let n_rules = cfg.rules.len();
    let mut windows = vec![0usize; n_rules];
    let mut hyper = vec![Vec::new(); n_rules];
    let mut values = vec![Vec::new(); n_rules];
    for (i, &t) in schedule.dates.iter().enumerate() {
        if schedule.retune(i) {
            let win = full.through(t)?.trailing(cfg.history)?;
            let fv = forward_validate_window(&win, kind, &cfg.windows, cfg.forward_steps)?;
            for (r, rule) in cfg.rules.iter().enumerate() {
                windows[r] = window_of(fv.selected(*rule));
                hyper[r].push(windows[r].to_string());
            }
        }
        let xs = x.window(x.origin(), t)?;
        let ys = y.window(y.origin(), t)?;
        let mut cache: Vec<(usize, f64, bool)> = Vec::new();
        for r in 0..n_rules {
            let w = windows[r];
            let v = match cache.iter().find(|c| c.0 == w) {
                Some(c) => (c.1, c.2),
                None => {
                    let est = ratio_estimate(&xs, &ys, delay, kind, Setting::RealTime, w, None)?;
                    let v = (est.filled()?.at(t).unwrap_or(f64::NAN), est.clipped_at(t));
                    cache.push((w, v.0, v.1));
                    v
                }
            };
            values[r].push(v);
        }
    }
    let labels: Vec<String> = cfg.rules.iter().map(|r| r.name().to_string()).collect();
    outcomes_from_series(&method.label(), &labels, schedule, eval, "window=", hyper, values)
}

fn outcomes_from_series(
    label: &str,
    rules: &[String],
    schedule: &Schedule,
    eval: &Evaluation,
    prefix: &str,
    hyper: Vec<Vec<String>>,
    values: Vec<Vec<(f64, bool)>>,
) -> Result<Vec<MethodOutcome>> {
    rules
        .iter()
        .zip(hyper.into_iter().zip(values))
        .map(|(rule, (h, v))| {
            let lookup = |t: NaiveDate| schedule.dates.iter().position(|d| *d == t).map(|i| v[i]);
            eval.outcome(
                label,
                rule,
                format!("{prefix}{}", h.join("|")),
                &|t| lookup(t).map(|p| p.0),
                &|t| lookup(t).is_some_and(|p| p.1),
            )
        })
        .collect()
}

/// Hyperparameters of one real-time deconvolution refresh.
#[derive(Debug, Clone, Copy)]
struct RealtimeChoice {
    lambda: f64,
    gamma: f64,
    forward_error: f64,
}

fn realtime_tune(cfg: &ExperimentConfig, win: &DeconvProblem, order: usize) -> Result<Vec<RealtimeChoice>> {
    let base = DeconvSpec::realtime(order, 0.0, 0.0);
    let bound = lambda_max_bound(win, &base, cfg.lambda_max_iterations)?;
    let grid = Grid::lambda(bound.value, cfg.lambda_points)?;
    let cv = cv_tune(win, &crate::tune::Method::Deconv(base), &grid, cfg.folds)?;
    let mut curves: Vec<(Rule, ValidationCurve)> = Vec::new();
    let mut out: Vec<RealtimeChoice> = Vec::new();
    for (lambda_rule, gamma_rule) in rule_pairs(cfg) {
        let lambda = cv.selected(lambda_rule);
        if !curves.iter().any(|(r, _)| *r == lambda_rule) {
            let fv = forward_validate_gamma(win, order, lambda, &cfg.gamma, cfg.forward_steps)?;
            curves.push((lambda_rule, fv));
        }
        let fv = &curves.iter().find(|(r, _)| *r == lambda_rule).expect("curve computed").1;
        out.push(RealtimeChoice {
            lambda,
            gamma: fv.selected(gamma_rule),
            forward_error: fv.best_error(),
        });
    }
    Ok(out)
}

fn realtime_deconv(
    cfg: &ExperimentConfig,
    full: &DeconvProblem,
    schedule: &Schedule,
    eval: &Evaluation,
) -> Result<Vec<MethodOutcome>> {
    let orders = deconv_orders(cfg);
    let tuned = cfg.methods.contains(&MethodName::DeconvTuned);
    let rules: Vec<String> = rule_pairs(cfg).into_iter().map(pair_label).collect();
    let n_rules = rules.len();
    // choices[order][rule pair]
    let mut choices: Vec<Vec<RealtimeChoice>> = Vec::new();
    let mut picked = vec![0usize; n_rules];
    // hyper/values indexed [order slot + tuned slot][rule]
    let slots = orders.len() + usize::from(tuned);
    let mut hyper = vec![vec![Vec::<String>::new(); n_rules]; slots];
    let mut values = vec![vec![Vec::<(f64, bool)>::new(); n_rules]; slots];
    for (i, &t) in schedule.dates.iter().enumerate() {
        let win = full.through(t)?.trailing(cfg.history)?;
        if schedule.retune(i) {
            choices = orders
                .iter()
                .map(|&o| realtime_tune(cfg, &win, o))
                .collect::<Result<_>>()?;
            for r in 0..n_rules {
                let errs: Vec<(usize, f64)> = orders
                    .iter()
                    .zip(&choices)
                    .map(|(&o, c)| (o, c[r].forward_error))
                    .collect();
                picked[r] = if tuned { tune_order(&errs)? } else { orders[0] };
                for (s, c) in choices.iter().enumerate() {
                    hyper[s][r].push(format!("{:.6e}/{:.6e}", c[r].lambda, c[r].gamma));
                }
                if tuned {
                    let s = orders.iter().position(|&o| o == picked[r]).expect("order tuned");
                    let c = choices[s][r];
                    hyper[slots - 1][r].push(format!("{}/{:.6e}/{:.6e}", picked[r], c.lambda, c.gamma));
                }
            }
        }
        let mut cache: Vec<(usize, u64, u64, f64)> = Vec::new();
        let mut estimate = |o: usize, c: RealtimeChoice| -> Result<f64> {
            let key = (o, c.lambda.to_bits(), c.gamma.to_bits());
            if let Some(hit) = cache.iter().find(|e| (e.0, e.1, e.2) == key) {
                return Ok(hit.3);
            }
            let v = solve(&win, &DeconvSpec::realtime(o, c.lambda, c.gamma))?.last();
            cache.push((key.0, key.1, key.2, v));
            Ok(v)
        };
        for r in 0..n_rules {
            for (s, &o) in orders.iter().enumerate() {
                let v = estimate(o, choices[s][r])?;
                values[s][r].push((v, false));
            }
            if tuned {
                let s = orders.iter().position(|&o| o == picked[r]).expect("order tuned");
                let v = estimate(picked[r], choices[s][r])?;
                values[slots - 1][r].push((v, false));
            }
        }
    }
    let mut labels: Vec<String> = orders.iter().map(|&o| MethodName::Deconv(o).label()).collect();
    if tuned {
        labels.push(MethodName::DeconvTuned.label());
    }
    let mut out = Vec::new();
    for ((label, h), v) in labels.iter().zip(hyper).zip(values) {
        let prefix = if label == "deconv-t" { "order/lambda/gamma=" } else { "lambda/gamma=" };
        out.extend(outcomes_from_series(label, &rules, schedule, eval, prefix, h, v)?);
    }
    Ok(out)
}

fn realtime_cell(
    cfg: &ExperimentConfig,
    region: &RegionData,
    y: &CountSeries,
    delay: &DelayDistribution,
) -> Result<Vec<MethodOutcome>> {
    let x = &region.primary;
    let full = DeconvProblem::new(x, y, delay)?;
    if full.n_rows() < cfg.history {
        return Err(Error::Dimension(format!(
            "{} secondary days cannot fill a {}-day history",
            full.n_rows(),
            cfg.history
        )));
    }
    let dates = evaluation_dates(full.row_date(cfg.history - 1), full.last_date(), cfg.cadence);
    let schedule = Schedule {
        stride: (cfg.retune_every / cfg.cadence).max(1),
        dates: dates.clone(),
    };
    let eval = Evaluation {
        dates,
        truth: &region.truth,
    };
    let deconv = if deconv_orders(cfg).is_empty() {
        Vec::new()
    } else {
        realtime_deconv(cfg, &full, &schedule, &eval)?
    };
    let mut out = Vec::new();
    for &method in &cfg.methods {
        match method {
            MethodName::Lagged | MethodName::Conv => {
                out.extend(realtime_ratio(cfg, &full, x, y, delay, method, &schedule, &eval)?)
            }
            m => out.extend(deconv.iter().filter(|o| o.method == m.label()).cloned()),
        }
    }
    Ok(out)
}

/// Runs every method on one cell.
pub fn run_cell(cfg: &ExperimentConfig, region: &RegionData, id: CellId) -> (u64, Result<Vec<MethodOutcome>>) {
    let seed = cell_seed(cfg.seed, id.region, id.replicate);
    let result = (|| {
        let y = match &region.observed {
            Some(y) => y.clone(),
            None => simulate_cell(cfg, region, seed)?,
        };
        let delay = if id.offset == 0.0 {
            region.delay.clone()
        } else {
            misspecify_delay(&region.delay, id.offset)?
        };
        match cfg.setting {
            Setting::Retrospective => retrospective_cell(cfg, region, &y, &delay),
            Setting::RealTime => realtime_cell(cfg, region, &y, &delay),
        }
    })();
    (seed, result)
}

// ---------------------------------------------------------------- aggregation

fn cell_layout(cfg: &ExperimentConfig) -> Vec<CellId> {
    let mut cells = Vec::new();
    for region in 0..cfg.regions.len() {
        for replicate in 0..cfg.replicates {
            cells.push(CellId {
                region,
                replicate,
                offset: 0.0,
            });
        }
    }
    for &offset in &cfg.misspec_offsets {
        for region in 0..cfg.regions.len() {
            for replicate in 0..cfg.misspec_replicates {
                cells.push(CellId {
                    region,
                    replicate,
                    offset,
                });
            }
        }
    }
    cells
}

fn run_parallel(cfg: &ExperimentConfig, regions: &[RegionData], ids: &[CellId]) -> Vec<CellResult> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; ids.len()]);
    std::thread::scope(|s| {
        for _ in 0..cfg.threads.min(ids.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&id) = ids.get(i) else { break };
                let (seed, result) = run_cell(cfg, &regions[id.region], id);
                match &result {
                    Ok(_) => log::info!(
                        "cell {} rep {} offset {} done",
                        regions[id.region].config.name,
                        id.replicate,
                        id.offset
                    ),
                    Err(e) => log::warn!("cell {} rep {} offset {} failed: {e}", regions[id.region].config.name, id.replicate, id.offset),
                }
                slots.lock().expect("no poisoned workers")[i] = Some(CellResult {
                    id,
                    seed,
                    outcome: result.map_err(|e| e.to_string()),
                });
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect()
}

/// MAE grid `[region][replicate]` per method for one rule, over the
/// successful cells at one offset.
fn method_cells(cfg: &ExperimentConfig, cells: &[CellResult], offset: f64, rule: &str) -> Vec<MethodCells> {
    let labels = method_labels(cfg);
    labels
        .iter()
        .map(|label| {
            let grid = (0..cfg.regions.len())
                .map(|r| {
                    cells
                        .iter()
                        .filter(|c| c.id.region == r && c.id.offset == offset)
                        .filter_map(|c| c.outcome.as_ref().ok())
                        .filter_map(|os| os.iter().find(|o| &o.method == label && o.rule == rule).map(|o| o.mae))
                        .collect::<Vec<f64>>()
                })
                .filter(|v| !v.is_empty())
                .collect();
            MethodCells {
                method: label.clone(),
                cells: grid,
            }
        })
        .collect()
}

fn method_labels(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.methods.iter().map(|m| m.label()).collect()
}

fn summarize(cfg: &ExperimentConfig, cells: &[CellResult]) -> Result<Vec<SummaryLine>> {
    let rules = rules_with_oracle(cfg);
    let labels = method_labels(cfg);
    let baselines: Vec<&str> = BASELINES.iter().copied().filter(|b| labels.iter().any(|l| l == b)).collect();
    let mut per_rule: Vec<(String, Vec<MethodCells>)> =
        rules.iter().map(|r| (r.clone(), method_cells(cfg, cells, 0.0, r))).collect();
    // best: each method under its lowest-mean rule among the CV rules
    let best: Vec<MethodCells> = labels
        .iter()
        .enumerate()
        .map(|(i, _)| {
            per_rule
                .iter()
                .filter(|(r, _)| r != ORACLE)
                .map(|(_, mc)| mc[i].clone())
                .min_by(|a, b| grand_mean(a).total_cmp(&grand_mean(b)))
                .expect("at least one rule")
        })
        .collect();
    per_rule.push((BEST.into(), best));
    let mut out = Vec::new();
    for (rule, mcs) in per_rule {
        // ratio methods have no mixed-rule rows
        let mcs: Vec<MethodCells> = mcs.into_iter().filter(|m| !m.cells.is_empty()).collect();
        if mcs.is_empty() {
            continue;
        }
        let present: Vec<&str> = baselines
            .iter()
            .copied()
            .filter(|b| mcs.iter().any(|m| m.method == *b))
            .collect();
        for row in mae_report(&mcs, &present)? {
            out.push(SummaryLine {
                rule: rule.clone(),
                method: row.method,
                mae: row.mae,
                improvements: row.improvements,
            });
        }
    }
    Ok(out)
}

fn grand_mean(m: &MethodCells) -> f64 {
    aggregate(&m.cells).map_or(f64::INFINITY, |e| e.mean)
}

fn misspec_table(cfg: &ExperimentConfig, cells: &[CellResult]) -> Result<Vec<MisspecLine>> {
    if cfg.misspec_offsets.is_empty() {
        return Ok(Vec::new());
    }
    let mut offsets = cfg.misspec_offsets.clone();
    offsets.push(0.0);
    offsets.sort_by(f64::total_cmp);
    let zero: Vec<CellResult> = cells
        .iter()
        .filter(|c| c.id.offset == 0.0 && c.id.replicate < cfg.misspec_replicates)
        .cloned()
        .collect();
    let mut out = Vec::new();
    for &offset in &offsets {
        let pool: &[CellResult] = if offset == 0.0 { &zero } else { cells };
        let per_rule: Vec<(String, Vec<MethodCells>)> = cv_rule_labels(cfg)
            .into_iter()
            .map(|r| {
                let mcs = method_cells(cfg, pool, offset, &r);
                (r, mcs)
            })
            .collect();
        for (i, label) in method_labels(cfg).iter().enumerate() {
            let mut best: Option<Estimate> = None;
            for (rule, mcs) in &per_rule {
                if mcs[i].cells.is_empty() {
                    continue;
                }
                let e = aggregate(&mcs[i].cells)?;
                if best.as_ref().is_none_or(|b| e.mean < b.mean) {
                    best = Some(e.clone());
                }
                out.push(MisspecLine {
                    offset,
                    rule: rule.clone(),
                    method: label.clone(),
                    mae: e,
                });
            }
            if let Some(e) = best {
                out.push(MisspecLine {
                    offset,
                    rule: BEST.into(),
                    method: label.clone(),
                    mae: e,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- output

fn fmt_est(e: &Estimate, scale: f64) -> (String, String) {
    (
        format!("{:.6}", e.mean * scale),
        e.se.map_or_else(|| "NA".to_string(), |s| format!("{:.6}", s * scale)),
    )
}

fn offset_tag(offset: f64) -> String {
    if offset == 0.0 {
        String::new()
    } else {
        format!("_offset{offset:+}")
    }
}

fn write_summary(path: &Path, report: &RunReport, lines: Vec<&SummaryLine>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "rule",
        "mae_x1e3",
        "se_x1e3",
        "improvement_vs_conv_pct",
        "improvement_vs_conv_se",
        "improvement_vs_lagged_pct",
        "improvement_vs_lagged_se",
    ])?;
    for line in lines {
        let rule = if line.rule == BEST {
            report.best_rule_of(&line.method).unwrap_or(BEST).to_string()
        } else {
            line.rule.clone()
        };
        let (m, s) = fmt_est(&line.mae, 1e3);
        let mut rec = vec![line.method.clone(), rule, m, s];
        for b in BASELINES {
            match line.improvements.iter().find(|(n, _)| n == b) {
                Some((_, e)) => {
                    let (m, s) = fmt_est(e, 1.0);
                    rec.push(m);
                    rec.push(s);
                }
                None => rec.extend(["NA".to_string(), "NA".to_string()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_outputs(cfg: &ExperimentConfig, report: &RunReport) -> Result<()> {
    let dir = &cfg.output;
    std::fs::create_dir_all(dir.join("estimates"))?;
    for cell in &report.cells {
        let Ok(outcomes) = &cell.outcome else { continue };
        let name = format!(
            "{}_rep{:02}{}.csv",
            report.regions[cell.id.region],
            cell.id.replicate,
            offset_tag(cell.id.offset)
        );
        let mut w = csv::Writer::from_path(dir.join("estimates").join(name))?;
        w.write_record(["date", "method", "estimate", "clipped_flag"])?;
        for o in outcomes {
            for (t, v, c) in &o.estimates {
                w.write_record([
                    t.to_string(),
                    format!("{}/{}", o.method, o.rule),
                    format!("{v:.8}"),
                    u8::from(*c).to_string(),
                ])?;
            }
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
    w.write_record(["region", "replicate", "offset", "seed", "method", "rule", "hyperparameters", "mae"])?;
    for cell in &report.cells {
        let Ok(outcomes) = &cell.outcome else { continue };
        for o in outcomes {
            w.write_record([
                report.regions[cell.id.region].clone(),
                cell.id.replicate.to_string(),
                cell.id.offset.to_string(),
                cell.seed.to_string(),
                o.method.clone(),
                o.rule.clone(),
                o.hyper.clone(),
                format!("{:.8e}", o.mae),
            ])?;
        }
    }
    w.flush()?;

    // summary.csv: one row per method under its best rule
    write_summary(&dir.join("summary.csv"), report, report.best_rules())?;
    write_summary(
        &dir.join("summary_by_rule.csv"),
        report,
        report.summary.iter().filter(|l| l.rule != BEST).collect(),
    )?;

    if !report.misspec.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("misspec.csv"))?;
        w.write_record(["offset", "rule", "method", "mae_x1e3", "se_x1e3"])?;
        for l in &report.misspec {
            let (m, s) = fmt_est(&l.mae, 1e3);
            w.write_record([l.offset.to_string(), l.rule.clone(), l.method.clone(), m, s])?;
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record(["region", "replicate", "offset", "error"])?;
    for (cell, err) in report.failures() {
        w.write_record([
            report.regions[cell.id.region].clone(),
            cell.id.replicate.to_string(),
            cell.id.offset.to_string(),
            err.to_string(),
        ])?;
    }
    w.flush()?;

    let mut m = String::new();
    let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "config_hash = {}", report.config_hash);
    let _ = writeln!(m, "cells = {}", report.cells.len());
    let _ = writeln!(m, "failures = {}", report.failures().count());
    let _ = writeln!(m, "[config]");
    m.push_str(&cfg.canonical());
    let _ = writeln!(m, "[cells]");
    for cell in &report.cells {
        let _ = writeln!(
            m,
            "region={} replicate={} offset={} seed={} status={}",
            report.regions[cell.id.region],
            cell.id.replicate,
            cell.id.offset,
            cell.seed,
            if cell.outcome.is_ok() { "ok" } else { "failed" }
        );
    }
    std::fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

/// Runs the configured study without writing files.
pub fn run_study(cfg: &ExperimentConfig) -> Result<RunReport> {
    if cfg.misspec_replicates > cfg.replicates && !cfg.misspec_offsets.is_empty() {
        return Err(Error::Validation("misspec_replicates cannot exceed replicates".into()));
    }
    let regions = cfg
        .regions
        .iter()
        .map(|r| region_data(r, cfg))
        .collect::<Result<Vec<_>>>()?;
    let ids = cell_layout(cfg);
    let cells = run_parallel(cfg, &regions, &ids);
    if cells.iter().all(|c| c.outcome.is_err()) {
        let first = cells.first().and_then(|c| c.outcome.as_ref().err()).cloned().unwrap_or_default();
        return Err(Error::Tuning(format!("every cell failed; first error: {first}")));
    }
    Ok(RunReport {
        config_hash: cfg.hash(),
        regions: cfg.regions.iter().map(|r| r.name.clone()).collect(),
        summary: summarize(cfg, &cells)?,
        misspec: misspec_table(cfg, &cells)?,
        cells,
    })
}

/// Runs the study and writes every output table under `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let report = run_study(cfg)?;
    write_outputs(cfg, &report)?;
    Ok(report)
}

/// Reads a finished run's summary table.
pub fn read_summary(dir: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_path(dir.join("summary.csv"))?;
    rdr.records()
        .map(|r| Ok(r?.iter().map(str::to_string).collect()))
        .collect()
}
