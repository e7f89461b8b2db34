mod support;

use rand::Rng;
use sevrate::solver::{lambda_max_bound, objective, smooth_gradient, smooth_objective, solve};
use support::{barrier_solve, l1_of_diff, random_instance, rng};

#[test]
fn library_objective_matches_formula() {
    let mut r = rng(11);
    for i in 0..30 {
        let inst = random_instance(&mut r, i % 3, i % 2 == 1);
        let p: Vec<f64> = (0..inst.n()).map(|_| r.random_range(0.02..0.98)).collect();
        let lib = objective(&inst.problem(), &inst.spec(), &p).unwrap();
        let reference = inst.objective(&p);
        assert!((lib - reference).abs() <= 1e-12 * reference.abs().max(1.0), "{lib} vs {reference}");
        let smooth = smooth_objective(&inst.problem(), &inst.spec(), &p).unwrap();
        assert!((smooth - inst.smooth(&p)).abs() <= 1e-12 * smooth.abs().max(1.0));
    }
}

#[test]
fn barrier_reference_is_optimal_against_perturbations() {
    let mut r = rng(12);
    for i in 0..6 {
        let inst = random_instance(&mut r, i % 3, false);
        let p = barrier_solve(&inst);
        let f = inst.objective(&p);
        for _ in 0..50 {
            let q: Vec<f64> = p.iter().map(|v| (v + r.random_range(-1e-3..1e-3)).clamp(0.0, 1.0)).collect();
            assert!(inst.objective(&q) >= f - 1e-10 * f.abs());
        }
    }
}

#[test]
fn realtime_solutions_satisfy_tail_constraint() {
    let mut r = rng(13);
    for i in 0..9 {
        let inst = random_instance(&mut r, i % 3, true);
        let fit = solve(&inst.problem(), &inst.spec()).unwrap();
        let p = fit.curve.values();
        let row = inst.tail_row();
        let v: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
        assert!(v.abs() <= 1e-7, "tail residual {v}");
    }
}

#[test]
fn smooth_gradient_is_consistent_with_the_value() {
    let mut r = rng(14);
    for i in 0..6 {
        let inst = random_instance(&mut r, i % 3, true);
        let p: Vec<f64> = (0..inst.n()).map(|_| r.random_range(0.1..0.9)).collect();
        let g = smooth_gradient(&inst.problem(), &inst.spec(), &p).unwrap();
        let dir: Vec<f64> = (0..inst.n()).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let plus: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
        let fd = (inst.smooth(&plus) - inst.smooth(&minus)) / (2.0 * h);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
    }
}

#[test]
fn penalty_shrinks_along_the_lambda_path() {
    let mut r = rng(15);
    for order in 0..2 {
        let mut inst = random_instance(&mut r, order, false);
        let mut last = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0, 100.0] {
            inst.lambda = lambda;
            let p = barrier_solve(&inst);
            let pen = l1_of_diff(&p, inst.k());
            assert!(pen <= last + 1e-7, "penalty rose to {pen} from {last} at {lambda}");
            last = pen;
        }
    }
}

#[test]
fn knots_appear_below_lambda_max() {
    let mut r = rng(16);
    let mut with_knots = 0;
    for i in 0..10 {
        let mut inst = random_instance(&mut r, i % 2, false);
        let bound = lambda_max_bound(&inst.problem(), &inst.spec(), 50).unwrap().value;
        inst.lambda = 0.25 * bound;
        if l1_of_diff(&barrier_solve(&inst), inst.k()) > 1e-6 {
            with_knots += 1;
        }
    }
    // the bound is a certificate, not only an upper estimate
    assert!(with_knots >= 8, "{with_knots}");
}
