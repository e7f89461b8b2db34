mod support;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};

use sevrate::clean::{
    deweekify, impute_daily, redistribute_dumps, redistribute_negatives, truncate_outliers, DEFAULT_IQR_MULT,
    DEFAULT_OUTLIER_WINDOW,
};
use sevrate::smooth::smooth_gcv;
use sevrate::experiment::{region_data, ExperimentConfig};
use sevrate::ratios::{default_lag, lagged_ratio, SmoothingMode};
use sevrate::series::{default_origin, CountSeries, SeverityCurve};
use sevrate::simulate::{estimate_dispersion, sample_beta_binomial_with, sample_poisson_binomial_with};
use sevrate::solver::{lambda_max_bound, objective, solve, DeconvProblem, DeconvSpec, LossKind};
use sevrate::tune::{cv_tune, tune_order, Grid, Method};
use sevrate::{correlation_bound, discretized_gamma, expected_secondary, misspecify_delay, DelayDistribution};
use support::{barrier_solve, l1_of_diff, Instance};

/// Discrete mean of the gamma law binned on `(k, k+1]`, `k = 0..=d`, by
/// Simpson integration of the unnormalized density.
fn fine_grid_mean(mean: f64, sd: f64, d: usize) -> f64 {
    let shape = (mean / sd).powi(2);
    let scale = sd * sd / mean;
    let density = |x: f64| if x <= 0.0 { 0.0 } else { x.powf(shape - 1.0) * (-x / scale).exp() };
    let steps = 2000;
    let h = 1.0 / steps as f64;
    let mass: Vec<f64> = (0..=d)
        .map(|k| {
            let a = k as f64;
            let mut s = density(a) + density(a + 1.0);
            for i in 1..steps {
                s += density(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        })
        .collect();
    let total: f64 = mass.iter().sum();
    mass.iter().enumerate().map(|(k, m)| k as f64 * m / total).sum()
}

#[test]
fn gamma_discretization_matches_fine_grid() {
    let delay = discretized_gamma(14.0, 0.9 * 14.0, 60).unwrap();
    assert!((delay.mean() - fine_grid_mean(14.0, 0.9 * 14.0, 60)).abs() <= 0.5);
    let shifted = misspecify_delay(&delay, 3.0).unwrap();
    assert!((shifted.mean() - fine_grid_mean(17.0, 0.9 * 17.0, 60)).abs() <= 0.5);
}

#[test]
fn correlation_bound_at_national_scale() {
    let cfg = ExperimentConfig::from_text("regions = large", Path::new(".")).unwrap();
    let data = region_data(&cfg.regions[0], &cfg).unwrap();
    let d = data.delay.support();
    let mut bounds: Vec<f64> = (d..data.truth.len())
        .map(|i| correlation_bound(&data.delay, &data.truth, data.truth.date(i)).unwrap())
        .collect();
    bounds.sort_by(f64::total_cmp);
    // the most negative bound over time, set against the lowest observed
    // correlation; within a factor of two of -0.018
    let lowest = bounds[0];
    assert!((-0.036..=-0.009).contains(&lowest), "{lowest} (median {})", bounds[bounds.len() / 2]);
}

fn smooth_mean(n: usize) -> Vec<f64> {
    (0..n).map(|t| 200.0 + 100.0 * (t as f64 / 30.0).sin()).collect()
}

#[test]
fn dispersion_estimates_recover_known_multipliers() {
    let mu = smooth_mean(300);
    let mut rng = ChaCha8Rng::seed_from_u64(153);
    let draw = |mult: f64, rng: &mut ChaCha8Rng| -> f64 {
        let values = mu
            .iter()
            .map(|&m| {
                let p = Poisson::new(m).unwrap().sample(rng);
                (m + mult.sqrt() * (p - m)).round().max(0.0) as u64
            })
            .collect();
        estimate_dispersion(&CountSeries::from_values(values)).unwrap().beta
    };
    let one: f64 = (0..20).map(|_| draw(1.0, &mut rng)).sum::<f64>() / 20.0;
    assert!((one - 1.0).abs() <= 0.15, "{one}");
    let three: f64 = (0..20).map(|_| draw(3.0, &mut rng)).sum::<f64>() / 20.0;
    assert!((three - 3.0).abs() <= 0.5, "{three}");
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(a: &mut [u64], b: &mut [u64]) -> f64 {
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn beta_binomial_without_overdispersion_is_binomial() {
    // with d = 0 the Poisson-binomial variance is binomial, so beta = 1
    // gives rho = 0
    let x = CountSeries::new(default_origin(), vec![120]);
    let p = SeverityCurve::new(default_origin(), vec![0.3]).unwrap();
    let delay = DelayDistribution::point_mass(0);
    let mut rng = ChaCha8Rng::seed_from_u64(171);
    let n = 10_000;
    let mut bb: Vec<u64> = (0..n)
        .map(|_| sample_beta_binomial_with(&x, &delay, &p, 1.0, &mut rng).unwrap().values()[0])
        .collect();
    let binom = Binomial::new(120, 0.3).unwrap();
    let mut reference: Vec<u64> = (0..n).map(|_| binom.sample(&mut rng)).collect();
    let d = ks_statistic(&mut bb, &mut reference);
    let critical = 1.628 * (2.0 / n as f64).sqrt();
    assert!(d < critical, "{d} >= {critical}");
}

#[test]
fn poisson_loss_hand_value() {
    let delay = DelayDistribution::point_mass(0);
    let problem = DeconvProblem::from_parts(default_origin(), vec![10.0; 3], vec![2.0; 3], &delay).unwrap();
    let f = objective(&problem, &DeconvSpec::retrospective(0, 0.0), &[0.2; 3]).unwrap();
    assert!((f - (2.0 - 2.0 * 2f64.ln())).abs() < 1e-12, "{f}");
}

/// Primary counts, delay and noiseless secondary means for a constant rate.
fn noiseless(p0: f64) -> (CountSeries, DelayDistribution, CountSeries, DeconvProblem) {
    let x = CountSeries::from_values((0..160).map(|t| (1000.0 + 400.0 * (t as f64 / 17.0).sin()) as u64).collect());
    let delay = discretized_gamma(8.0, 0.9 * 8.0, 20).unwrap();
    let p = SeverityCurve::new(x.origin(), vec![p0; x.len()]).unwrap();
    let m = expected_secondary(&x, &delay, &p).unwrap();
    let problem = DeconvProblem::from_parts(x.origin(), x.to_f64(), m.mean.clone(), &delay).unwrap();
    let y = CountSeries::new(m.origin, m.mean.iter().map(|v| v.round() as u64).collect());
    (x, delay, y, problem)
}

fn max_dev(values: &[f64], burn: usize, target: f64) -> f64 {
    values[burn..values.len() - burn].iter().fold(0.0f64, |a, v| a.max((v - target).abs()))
}

#[test]
fn noiseless_constant_rate_is_recovered() {
    let (_, delay, _, problem) = noiseless(0.1);
    let d = delay.support();
    for loss in [LossKind::Poisson, LossKind::Gaussian] {
        let fit = solve(&problem, &DeconvSpec::retrospective(0, 1.0).with_loss(loss)).unwrap();
        let dev = max_dev(fit.curve.values(), d, 0.1);
        assert!(dev <= 1e-3, "{loss:?}: {dev}");
    }
}

/// Golden-section minimizer of a unimodal function on `[lo, hi]`.
fn golden(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-12 {
        let a = hi - r * (hi - lo);
        let b = lo + r * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn constant_fit_at_lambda_max_matches_scalar_oracle() {
    let (x, delay, _, _) = noiseless(0.1);
    let truth = SeverityCurve::new(x.origin(), (0..x.len()).map(|t| if t < 80 { 0.08 } else { 0.14 }).collect()).unwrap();
    let y = sample_poisson_binomial_with(&x, &delay, &truth, &mut ChaCha8Rng::seed_from_u64(237)).unwrap();
    let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
    let spec = DeconvSpec::retrospective(0, 0.0);
    let bound = lambda_max_bound(&problem, &spec, 50).unwrap().value;
    let fit = solve(&problem, &DeconvSpec::retrospective(0, bound * 1.5)).unwrap();
    assert!(fit.knots.is_empty());
    let a1: Vec<f64> = problem.predict(&vec![1.0; problem.n_rates()]);
    let ys = problem.secondary();
    let loss = |c: f64| a1.iter().zip(ys).map(|(a, y)| c * a - y * (c * a).ln()).sum::<f64>();
    // coarse grid, then golden section around the best point
    let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
    let start = grid.iter().copied().min_by(|a, b| loss(*a).total_cmp(&loss(*b))).unwrap();
    let c = golden(loss, start - 1e-3, start + 1e-3);
    let p = fit.curve.values();
    assert!(p.iter().all(|v| (v - c).abs() <= 1e-4), "{} vs {c}", p[0]);
}

#[test]
fn tiny_instance_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(238);
    let primary: Vec<f64> = (0..8).map(|_| rng.random_range(20..200) as f64).collect();
    let mass = vec![0.4, 0.6];
    let y: Vec<f64> = (0..7)
        .map(|r| {
            let mu = 0.2 * (mass[0] * primary[r + 1] + mass[1] * primary[r]);
            Poisson::new(mu).unwrap().sample(&mut rng)
        })
        .collect();
    let inst = Instance { primary, y, mass, order: 1, lambda: 0.5, gamma: 0.0, tail: false };
    let fit = solve(&inst.problem(), &inst.spec()).unwrap();
    let reference = inst.objective(&barrier_solve(&inst));
    let ours = inst.objective(fit.curve.values());
    assert!((ours - reference).abs() <= 1e-5 * reference.abs(), "{ours} vs {reference}");
}

#[test]
fn huge_tail_penalty_flattens_the_end() {
    let (x, delay, _, _) = noiseless(0.1);
    let truth = SeverityCurve::new(x.origin(), (0..x.len()).map(|t| 0.05 + 0.001 * t as f64).collect()).unwrap();
    let y = sample_poisson_binomial_with(&x, &delay, &truth, &mut ChaCha8Rng::seed_from_u64(246)).unwrap();
    let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
    let fit = solve(&problem, &DeconvSpec::realtime(1, 1.0, 1e6)).unwrap();
    let p = fit.curve.values();
    let n = p.len();
    let d = delay.support();
    let jump = (n - 1 - d..n).fold(0.0f64, |a, t| a.max((p[t] - p[t - 1]).abs()));
    assert!(jump <= 1e-3, "{jump}");
}

/// Best MAE over non-burn days across a log grid below each loss's own
/// bound.
fn best_mae(problem: &DeconvProblem, loss: LossKind, truth: &[f64], burn: usize) -> f64 {
    let spec = DeconvSpec::retrospective(0, 0.0).with_loss(loss);
    let bound = lambda_max_bound(problem, &spec, 50).unwrap().value;
    Grid::lambda(bound, 12)
        .unwrap()
        .values()
        .iter()
        .map(|&l| {
            let p = solve(problem, &DeconvSpec { lambda: l, ..spec }).unwrap();
            let v = p.curve.values();
            (burn..v.len() - burn).map(|t| (v[t] - truth[t]).abs()).sum::<f64>() / (v.len() - 2 * burn) as f64
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn gaussian_loss_is_close_to_poisson() {
    let (x, delay, _, _) = noiseless(0.1);
    let truth: Vec<f64> = (0..x.len()).map(|t| if t < 70 { 0.08 } else if t < 110 { 0.15 } else { 0.1 }).collect();
    let curve = SeverityCurve::new(x.origin(), truth.clone()).unwrap();
    let y = sample_poisson_binomial_with(&x, &delay, &curve, &mut ChaCha8Rng::seed_from_u64(256)).unwrap();
    let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
    let d = delay.support();
    assert_eq!((problem.origin(), problem.n_rates()), (x.origin(), x.len()));
    let truth = &truth[..];
    let pois = best_mae(&problem, LossKind::Poisson, truth, d);
    let gauss = best_mae(&problem, LossKind::Gaussian, truth, d);
    assert!(gauss <= 1.25 * pois, "{gauss} vs {pois}");
}

#[test]
fn lambda_max_bound_is_close_to_bisection() {
    let inst = Instance {
        primary: vec![50.0, 80.0, 120.0, 90.0, 60.0, 100.0],
        y: vec![9.0, 20.0, 31.0, 12.0, 10.0, 25.0],
        mass: vec![1.0],
        order: 0,
        lambda: 0.0,
        gamma: 0.0,
        tail: false,
    };
    let bound = lambda_max_bound(&inst.problem(), &inst.spec(), 50).unwrap().value;
    let flat = |lambda: f64| {
        let mut i = inst.clone();
        i.lambda = lambda;
        l1_of_diff(&barrier_solve(&i), 1) <= 1e-5
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while !flat(hi) {
        hi *= 2.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if flat(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    assert!((bound - hi).abs() <= 0.1 * hi, "{bound} vs {hi}");
}

#[test]
fn lagged_ratio_is_unbiased_under_stationarity() {
    let p0 = 0.12;
    let x = CountSeries::from_values(vec![500; 120]);
    let delay = discretized_gamma(8.0, 0.9 * 8.0, 20).unwrap();
    let p = SeverityCurve::new(x.origin(), vec![p0; x.len()]).unwrap();
    let lag = default_lag(&delay);
    let mut rng = ChaCha8Rng::seed_from_u64(318);
    let t = 80;
    let draws: Vec<f64> = (0..1000)
        .map(|_| {
            let y = sample_poisson_binomial_with(&x, &delay, &p, &mut rng).unwrap();
            lagged_ratio(&x, &y, lag, SmoothingMode::trailing(7)).unwrap().values()[t].unwrap()
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let se = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - p0).abs() <= 3.0 * se, "{mean} vs {p0} (se {se})");
}

#[test]
fn piecewise_constant_truth_selects_order_zero() {
    let (x, delay, _, _) = noiseless(0.1);
    let truth: Vec<f64> = (0..x.len()).map(|t| if t < 60 { 0.06 } else if t < 110 { 0.16 } else { 0.1 }).collect();
    let curve = SeverityCurve::new(x.origin(), truth).unwrap();
    let mut zero = 0;
    for seed in 0..10 {
        let y = sample_poisson_binomial_with(&x, &delay, &curve, &mut ChaCha8Rng::seed_from_u64(400 + seed)).unwrap();
        let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
        let results: Vec<(usize, f64)> = (0..3)
            .map(|m| {
                let spec = DeconvSpec::retrospective(m, 0.0);
                let bound = lambda_max_bound(&problem, &spec, 50).unwrap().value;
                let grid = Grid::lambda(bound, 8).unwrap();
                (m, cv_tune(&problem, &Method::Deconv(spec), &grid, 5).unwrap().best_error())
            })
            .collect();
        zero += usize::from(tune_order(&results).unwrap() == 0);
    }
    assert!(zero >= 7, "{zero}");
}

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn redistribution_expectations() {
    let runs = 10_000;
    let mut dumps = vec![Vec::with_capacity(runs); 7];
    let mut daily = vec![Vec::with_capacity(runs); 7];
    let mut negative = vec![Vec::with_capacity(runs); 4];
    for seed in 0..runs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = redistribute_dumps(&[0, 0, 0, 0, 0, 0, 70], &mut rng);
        let imputed = impute_daily(default_origin(), &[70], &mut rng);
        let neg = redistribute_negatives(&[20, 20, 20, 20, -14], &mut rng).unwrap();
        for i in 0..7 {
            dumps[i].push(out[i] as f64);
            daily[i].push(imputed.values()[i] as f64);
        }
        for i in 0..4 {
            negative[i].push(neg[i] as f64);
        }
    }
    for (samples, target) in dumps.iter().chain(&daily).map(|s| (s, 10.0)).chain(negative.iter().map(|s| (s, 16.5))) {
        let (m, se) = mean_and_se(samples);
        assert!((m - target).abs() <= 3.0 * se, "{m} vs {target} (se {se})");
    }
}

#[test]
fn deweekify_scales_residuals_by_root_seven() {
    let mut rng = ChaCha8Rng::seed_from_u64(473);
    let values: Vec<u64> = (0..1000).map(|_| Poisson::new(100.0).unwrap().sample(&mut rng) as u64).collect();
    let series = CountSeries::from_values(values);
    let raw = series.to_f64();
    let averaged: Vec<f64> = (0..raw.len())
        .map(|t| {
            let w = &raw[t.saturating_sub(6)..=t];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect();
    let cut = truncate_outliers(&averaged, DEFAULT_OUTLIER_WINDOW, DEFAULT_IQR_MULT).unwrap();
    let fit = smooth_gcv(&cut).unwrap().fitted;
    let out = deweekify(&series, &mut rng).unwrap().to_f64();
    // residuals about the same smooth fit, rounding and total matching aside
    let var = |v: &[f64]| v.iter().zip(&fit).map(|(x, f)| (x - f).powi(2)).sum::<f64>() / v.len() as f64;
    let ratio = var(&out) / var(&cut);
    assert!((ratio / 7.0 - 1.0).abs() <= 0.05, "{ratio}");
}
