use super::*;
use crate::delay::discretized_gamma;
use crate::series::default_origin;

fn synthetic(n: usize, d: usize, scale: f64) -> (CountSeries, CountSeries, DelayDistribution, Vec<f64>) {
    let delay = if d == 0 {
        DelayDistribution::point_mass(0)
    } else {
        discretized_gamma(d as f64 / 3.0, 0.9 * d as f64 / 3.0, d).unwrap()
    };
    let xs: Vec<u64> = (0..n)
        .map(|t| (scale * (1.5 + (t as f64 / 17.0).sin())).round() as u64)
        .collect();
    let truth: Vec<f64> = (0..n).map(|t| if t < n / 2 { 0.2 } else { 0.1 }).collect();
    let x = CountSeries::new(default_origin(), xs.clone());
    let curve = SeverityCurve::new(default_origin(), truth.clone()).unwrap();
    let mean = crate::model::expected_secondary(&x, &delay, &curve).unwrap();
    let y = CountSeries::new(mean.origin, mean.mean.iter().map(|m| m.round() as u64).collect());
    (x, y, delay, truth)
}

#[test]
fn recovers_piecewise_constant_rate() {
    let (x, y, delay, truth) = synthetic(200, 20, 500.0);
    let fit = solve_retrospective(&x, &y, &delay, 0, 0.05).unwrap();
    assert!(fit.converged, "{fit:?}");
    assert_eq!(fit.curve.origin(), x.origin());
    let err: f64 = fit
        .curve
        .values()
        .iter()
        .zip(&truth)
        .skip(20)
        .take(160)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 160.0;
    assert!(err < 0.01, "mean abs error {err}");
    assert!(fit.curve.values().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn huge_lambda_gives_polynomial() {
    let (x, y, delay, _) = synthetic(120, 10, 300.0);
    for m in 0..=2 {
        let fit = solve_retrospective(&x, &y, &delay, m, 1e6).unwrap();
        assert!(fit.converged, "order {m}: {} iterations, residual {:e}", fit.iterations, fit.kkt_residual);
        assert!(fit.knots.is_empty(), "order {m}: {:?}", fit.knots);
    }
}

#[test]
fn realtime_constraint_holds() {
    let (x, y, delay, _) = synthetic(150, 15, 300.0);
    let t = x.date(120);
    for m in 0..=2 {
        let fit = solve_realtime(&x, &y, &delay, m, 0.01, 10.0, t).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.curve.end(), t);
        let k = m + 1;
        let p = fit.curve.values();
        let coef = difference_coefficients(k);
        let tail: f64 = coef.iter().zip(&p[p.len() - k - 1..]).map(|(c, v)| c * v).sum();
        assert!(tail.abs() < 1e-8, "order {m}: {tail}");
    }
}

#[test]
fn realtime_without_tail_terms_is_truncated_retrospective() {
    let (x, y, delay, _) = synthetic(150, 15, 300.0);
    let t = x.date(110);
    let problem = DeconvProblem::new(&x, &y, &delay).unwrap().through(t).unwrap();
    let mut spec = DeconvSpec::realtime(1, 0.02, 0.0);
    spec.tail_constraint = false;
    let a = solve(&problem, &spec).unwrap();
    let b = solve_retrospective(&x, &y.window(y.origin(), t).unwrap(), &delay, 1, 0.02).unwrap();
    assert_eq!(a.curve.len(), b.curve.len());
    for (u, v) in a.curve.values().iter().zip(b.curve.values()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn gaussian_loss_runs() {
    let (x, y, delay, truth) = synthetic(150, 10, 800.0);
    let fit = solve_gaussian(&x, &y, &delay, 0, 0.01, None).unwrap();
    assert!(fit.converged);
    let mid = fit.curve.values()[40];
    assert!((mid - truth[40]).abs() < 0.02);
}

#[test]
fn bad_inputs_are_rejected() {
    let (x, y, delay, _) = synthetic(100, 10, 100.0);
    assert!(matches!(
        solve_retrospective(&x, &y, &delay, 3, 1.0),
        Err(Error::Parameter(_))
    ));
    assert!(solve_retrospective(&x, &y, &delay, 0, -1.0).is_err());
    let late = CountSeries::new(shift(x.end(), 5), vec![1, 2, 3]);
    assert!(matches!(solve_retrospective(&x, &late, &delay, 0, 1.0), Err(Error::Alignment(_))));
}

#[test]
fn lambda_max_bound_has_no_knots() {
    let (x, y, delay, _) = synthetic(100, 10, 200.0);
    let problem = DeconvProblem::new(&x, &y, &delay).unwrap();
    for m in 0..=1 {
        let spec = DeconvSpec::retrospective(m, 0.0);
        let bound = lambda_max_bound(&problem, &spec, 200).unwrap();
        let at = solve(&problem, &DeconvSpec::retrospective(m, bound.value)).unwrap();
        let dsum: f64 = diff_matrix(m + 1, at.curve.len()).unwrap().apply(at.curve.values()).iter().map(|v| v.abs()).sum();
        assert!(at.knots.is_empty(), "order {m}: {:?} {} {:?} {dsum:e} {:?}", at.knots, at.converged, bound, at.curve.values());
        let below = solve(&problem, &DeconvSpec::retrospective(m, 0.8 * bound.value)).unwrap();
        assert!(!below.knots.is_empty(), "order {m}");
    }
}
