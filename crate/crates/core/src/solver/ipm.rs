//! Primal-dual interior-point method for the deconvolution programs.
//!
//! The l1 term is split with a slack `s >= |D p|`, giving the inequality
//! system `D p - s <= 0`, `-D p - s <= 0`, `-p <= 0`, `p - 1 <= 0` and an
//! optional single equality row. The slack block of each Newton system is
//! diagonal and is eliminated, leaving a symmetric banded system in `p`
//! whose half-bandwidth is the larger of the delay support and the
//! difference order.

use super::{Compiled, LossKind};
use crate::band::BandMatrix;
use crate::error::{Error, Result};

const MAX_ITER: usize = 200;
const MU: f64 = 10.0;
const GAP_TOL: f64 = 1e-9;
const STALL_GAP_TOL: f64 = 1e-7;
const FEAS_TOL: f64 = 1e-8;
const ALPHA: f64 = 0.01;
const BETA: f64 = 0.5;
const MIN_STEP: f64 = 1e-14;

pub(crate) struct Output {
    pub p: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

struct Diff {
    coef: Vec<f64>,
    rows: usize,
}

impl Diff {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.coef.iter().zip(&x[i..]).map(|(c, v)| c * v).sum())
            .collect()
    }

    fn apply_t(&self, v: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (i, vi) in v.iter().enumerate() {
            for (k, c) in self.coef.iter().enumerate() {
                out[i + k] += c * vi;
            }
        }
        out
    }
}

#[derive(Clone)]
struct Point {
    p: Vec<f64>,
    s: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
    l3: Vec<f64>,
    l4: Vec<f64>,
    nu: f64,
}

/// Residuals and derived quantities at a strictly feasible point.
struct Eval {
    mu: Vec<f64>,
    grad: Vec<f64>,
    dp: Vec<f64>,
    dual_p: Vec<f64>,
    dual_s: Vec<f64>,
    pri: f64,
    gap: f64,
    value: f64,
}

impl Eval {
    fn cent_norm_sq(&self, pt: &Point, t: f64) -> f64 {
        let inv = 1.0 / t;
        let mut acc = 0.0;
        for i in 0..pt.s.len() {
            acc += (pt.l1[i] * (pt.s[i] - self.dp[i]) - inv).powi(2);
            acc += (pt.l2[i] * (pt.s[i] + self.dp[i]) - inv).powi(2);
        }
        for j in 0..pt.p.len() {
            acc += (pt.l3[j] * pt.p[j] - inv).powi(2);
            acc += (pt.l4[j] * (1.0 - pt.p[j]) - inv).powi(2);
        }
        acc
    }

    fn norm(&self, pt: &Point, t: f64) -> f64 {
        let d: f64 = self.dual_p.iter().map(|v| v * v).sum::<f64>()
            + self.dual_s.iter().map(|v| v * v).sum::<f64>();
        (d + self.cent_norm_sq(pt, t) + self.pri * self.pri).sqrt()
    }

    fn dual_inf(&self) -> f64 {
        self.dual_p
            .iter()
            .chain(&self.dual_s)
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

struct Solver<'a> {
    c: &'a Compiled<'a>,
    n: usize,
    diff: Option<Diff>,
    bw: usize,
    m_ineq: f64,
}

impl<'a> Solver<'a> {
    fn new(c: &'a Compiled<'a>) -> Self {
        let n = c.conv.cols();
        let k = c.diff_order;
        let diff = (c.l1_weight > 0.0).then(|| Diff {
            coef: crate::operators::difference_coefficients(k),
            rows: n - k,
        });
        let r = diff.as_ref().map_or(0, |d| d.rows);
        Self {
            c,
            n,
            bw: c.conv.support().max(k).max(1),
            m_ineq: (2 * r + 2 * n) as f64,
            diff,
        }
    }

    fn strictly_feasible(&self, pt: &Point, dp: &[f64]) -> bool {
        pt.p.iter().all(|v| *v > 0.0 && *v < 1.0)
            && pt.s.iter().zip(dp).all(|(s, d)| s - d > 0.0 && s + d > 0.0)
    }

    fn eval(&self, pt: &Point) -> Option<Eval> {
        let dp = self.diff.as_ref().map_or_else(Vec::new, |d| d.apply(&pt.p));
        if !self.strictly_feasible(pt, &dp) {
            return None;
        }
        let mu = self.c.conv.apply(&pt.p);
        if self.c.loss == LossKind::Poisson
            && self
                .c
                .row_weight
                .iter()
                .zip(&mu)
                .any(|(w, m)| *w != 0.0 && !(*m > 0.0))
        {
            return None;
        }
        let grad = self.c.smooth_gradient_mu(&pt.p, &mu);
        let mut value = self.c.smooth_value_mu(&pt.p, &mu);
        let mut dual_p = grad.clone();
        for j in 0..self.n {
            dual_p[j] += pt.l4[j] - pt.l3[j];
        }
        let mut dual_s = Vec::new();
        let mut gap = 0.0;
        if let Some(d) = &self.diff {
            let diff_l: Vec<f64> = pt.l1.iter().zip(&pt.l2).map(|(a, b)| a - b).collect();
            for (dp_j, v) in dual_p.iter_mut().zip(d.apply_t(&diff_l, self.n)) {
                *dp_j += v;
            }
            dual_s = (0..d.rows).map(|i| self.c.l1_weight - pt.l1[i] - pt.l2[i]).collect();
            for i in 0..d.rows {
                gap += pt.l1[i] * (pt.s[i] - dp[i]) + pt.l2[i] * (pt.s[i] + dp[i]);
            }
            value += self.c.l1_weight * pt.s.iter().sum::<f64>();
        }
        let mut pri = 0.0;
        if let Some(e) = &self.c.equality {
            for &(j, v) in e {
                dual_p[j] += v * pt.nu;
                pri += v * pt.p[j];
            }
        }
        for j in 0..self.n {
            gap += pt.l3[j] * pt.p[j] + pt.l4[j] * (1.0 - pt.p[j]);
        }
        Some(Eval {
            mu,
            grad,
            dp,
            dual_p,
            dual_s,
            pri,
            gap,
            value,
        })
    }

    fn initial(&self) -> Point {
        let c = self.c;
        let (mut num, mut den) = (0.0, 0.0);
        for (r, w) in c.row_weight.iter().enumerate() {
            if *w != 0.0 {
                num += c.y[r];
                den += c.conv.row_sum(r);
            }
        }
        let p0 = if den > 0.0 { (num / den).clamp(1e-3, 0.9) } else { 0.1 };
        let p = vec![p0; self.n];
        let kappa = 1e-3 * p0.min(1.0 - p0);
        let l3 = vec![kappa / p0; self.n];
        let l4 = vec![kappa / (1.0 - p0); self.n];
        let r = self.diff.as_ref().map_or(0, |d| d.rows);
        let s0 = 1e-2 * p0;
        Point {
            p,
            s: vec![s0; r],
            l1: vec![0.5 * c.l1_weight; r],
            l2: vec![0.5 * c.l1_weight; r],
            l3,
            l4,
            nu: 0.0,
        }
    }

    fn newton_matrix(&self, pt: &Point, ev: &Eval, h: &mut BandMatrix) -> (Vec<f64>, Vec<f64>) {
        h.clear();
        let c = self.c;
        let d = c.conv.support();
        let mut row = vec![0.0f64; d + 1];
        for (r, w) in c.row_weight.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let hr = w * c.dphi(r, ev.mu[r]).1;
            if hr == 0.0 {
                continue;
            }
            // row r covers columns r..=r+d in ascending order
            for (slot, (_, v)) in row.iter_mut().zip(c.conv.row(r)) {
                *slot = v;
            }
            h.add_outer(r, &row, hr);
        }
        if let Some(q) = &c.quad_weight {
            for (i, qi) in q.iter().enumerate() {
                if *qi != 0.0 {
                    h.add(i, i, 2.0 * qi);
                    h.add(i + 1, i + 1, 2.0 * qi);
                    h.add(i + 1, i, -2.0 * qi);
                }
            }
        }
        let diag: Vec<f64> = (0..self.n)
            .map(|j| pt.l3[j] / pt.p[j] + pt.l4[j] / (1.0 - pt.p[j]))
            .collect();
        h.add_diagonal(&diag);
        let (mut d1, mut d2) = (Vec::new(), Vec::new());
        if let Some(df) = &self.diff {
            d1 = (0..df.rows).map(|i| pt.l1[i] / (pt.s[i] - ev.dp[i])).collect();
            d2 = (0..df.rows).map(|i| pt.l2[i] / (pt.s[i] + ev.dp[i])).collect();
            for i in 0..df.rows {
                let e = 4.0 * d1[i] * d2[i] / (d1[i] + d2[i]);
                h.add_outer(i, &df.coef, e);
            }
        }
        (d1, d2)
    }

    fn run(&self) -> Result<Output> {
        let n = self.n;
        let mut pt = self.initial();
        let mut ev = self.eval(&pt).ok_or_else(|| {
            Error::Infeasible("starting point lies outside the loss domain".into())
        })?;
        let scale_f = |v: f64| v.abs().max(1.0);
        // dual residuals are measured against the largest term they balance
        let grad_scale = ev
            .grad
            .iter()
            .fold(1.0f64, |a, v| a.max(v.abs()))
            .max(self.c.l1_weight);
        let stall_ok = |ev: &Eval| {
            ev.gap <= STALL_GAP_TOL * scale_f(ev.value)
                && ev.dual_inf() <= FEAS_TOL * grad_scale
                && ev.pri.abs() <= FEAS_TOL
        };
        let mut h = BandMatrix::zeros(n, self.bw);
        let mut converged = false;
        let mut iterations = 0;
        let mut best: Option<(f64, Vec<f64>)> = None;
        while iterations < MAX_ITER {
            let kkt = ev.gap.max(ev.dual_inf()).max(ev.pri.abs());
            if best.as_ref().is_none_or(|(b, _)| kkt < *b) {
                best = Some((kkt, pt.p.clone()));
            }
            if ev.gap <= GAP_TOL * scale_f(ev.value)
                && ev.dual_inf() <= FEAS_TOL * grad_scale
                && ev.pri.abs() <= FEAS_TOL
            {
                converged = true;
                break;
            }
            iterations += 1;
            log::trace!(
                "iteration {iterations}: gap {:e}, dual {:e}, objective {}",
                ev.gap,
                ev.dual_inf(),
                ev.value
            );
            let t = MU * self.m_ineq / ev.gap.max(f64::MIN_POSITIVE);
            let inv_t = 1.0 / t;
            let (d1, d2) = self.newton_matrix(&pt, &ev, &mut h);

            // reduced right-hand side
            let mut rhs: Vec<f64> = (0..n)
                .map(|j| {
                    -ev.grad[j] + inv_t / pt.p[j] - inv_t / (1.0 - pt.p[j])
                })
                .collect();
            if let Some(e) = &self.c.equality {
                for &(j, v) in e {
                    rhs[j] -= v * pt.nu;
                }
            }
            let mut rhs_s = Vec::new();
            if let Some(df) = &self.diff {
                let g1: Vec<f64> = (0..df.rows).map(|i| pt.s[i] - ev.dp[i]).collect();
                let g2: Vec<f64> = (0..df.rows).map(|i| pt.s[i] + ev.dp[i]).collect();
                let bar: Vec<f64> = (0..df.rows).map(|i| inv_t / g1[i] - inv_t / g2[i]).collect();
                rhs_s = (0..df.rows)
                    .map(|i| -self.c.l1_weight + inv_t / g1[i] + inv_t / g2[i])
                    .collect();
                let mix: Vec<f64> = (0..df.rows)
                    .map(|i| bar[i] + (d2[i] - d1[i]) / (d1[i] + d2[i]) * rhs_s[i])
                    .collect();
                for (r, v) in rhs.iter_mut().zip(df.apply_t(&mix, n)) {
                    *r -= v;
                }
            }

            let chol = match h.cholesky() {
                Ok(ch) => ch,
                Err(e) => {
                    converged = stall_ok(&ev);
                    log::debug!("newton system factorization failed at iteration {iterations}: {e}");
                    break;
                }
            };
            let mut dp_step = chol.solve(&rhs);
            refine(&h, &chol, &rhs, &mut dp_step);
            let mut dnu = 0.0;
            if let Some(e) = &self.c.equality {
                let mut b = vec![0.0; n];
                for &(j, v) in e {
                    b[j] = v;
                }
                let eb_rhs = b.clone();
                chol.solve_in_place(&mut b);
                refine(&h, &chol, &eb_rhs, &mut b);
                let ea: f64 = e.iter().map(|&(j, v)| v * dp_step[j]).sum();
                let eb: f64 = e.iter().map(|&(j, v)| v * b[j]).sum();
                dnu = (ea + ev.pri) / eb;
                for (x, bj) in dp_step.iter_mut().zip(&b) {
                    *x -= bj * dnu;
                }
            }

            let mut ds = Vec::new();
            let (mut dl1, mut dl2) = (Vec::new(), Vec::new());
            if let Some(df) = &self.diff {
                let ddp = df.apply(&dp_step);
                ds = (0..df.rows)
                    .map(|i| (rhs_s[i] - (d2[i] - d1[i]) * ddp[i]) / (d1[i] + d2[i]))
                    .collect();
                dl1 = (0..df.rows)
                    .map(|i| {
                        d1[i] * (ddp[i] - ds[i]) - pt.l1[i] + inv_t / (pt.s[i] - ev.dp[i])
                    })
                    .collect();
                dl2 = (0..df.rows)
                    .map(|i| {
                        d2[i] * (-ddp[i] - ds[i]) - pt.l2[i] + inv_t / (pt.s[i] + ev.dp[i])
                    })
                    .collect();
            }
            let dl3: Vec<f64> = (0..n)
                .map(|j| pt.l3[j] / pt.p[j] * (-dp_step[j]) - pt.l3[j] + inv_t / pt.p[j])
                .collect();
            let dl4: Vec<f64> = (0..n)
                .map(|j| {
                    pt.l4[j] / (1.0 - pt.p[j]) * dp_step[j] - pt.l4[j] + inv_t / (1.0 - pt.p[j])
                })
                .collect();

            let mut step: f64 = 1.0;
            for (l, dl) in [(&pt.l1, &dl1), (&pt.l2, &dl2), (&pt.l3, &dl3), (&pt.l4, &dl4)] {
                for (a, b) in l.iter().zip(dl.iter()) {
                    if *b < 0.0 {
                        step = step.min(-a / b);
                    }
                }
            }
            step *= 0.99;

            let base = ev.norm(&pt, t);
            let mut accepted = None;
            while step >= MIN_STEP {
                let trial = Point {
                    p: axpy(&pt.p, step, &dp_step),
                    s: axpy(&pt.s, step, &ds),
                    l1: axpy(&pt.l1, step, &dl1),
                    l2: axpy(&pt.l2, step, &dl2),
                    l3: axpy(&pt.l3, step, &dl3),
                    l4: axpy(&pt.l4, step, &dl4),
                    nu: pt.nu + step * dnu,
                };
                if let Some(tev) = self.eval(&trial) {
                    if tev.norm(&trial, t) <= (1.0 - ALPHA * step) * base {
                        accepted = Some((trial, tev));
                        break;
                    }
                }
                step *= BETA;
            }
            match accepted {
                Some((p, e)) => {
                    pt = p;
                    ev = e;
                }
                None => {
                    // Newton directions lose accuracy as the barrier weights
                    // grow; accept a stall once the gap is small
                    converged = stall_ok(&ev);
                    log::debug!("line search stalled at iteration {iterations}, gap {:e}", ev.gap);
                    break;
                }
            }
        }
        let kkt = ev.gap.max(ev.dual_inf()).max(ev.pri.abs());
        let p = match best {
            Some((b, p)) if !converged && b < kkt => p,
            _ => pt.p,
        };
        if !converged {
            log::debug!("interior-point method stopped after {iterations} iterations, residual {kkt:e}");
        }
        Ok(Output {
            p,
            iterations,
            converged,
            kkt_residual: kkt,
        })
    }
}

/// One step of iterative refinement against the assembled matrix.
fn refine(h: &BandMatrix, chol: &crate::band::BandCholesky, rhs: &[f64], x: &mut [f64]) {
    let ax = h.mul_vec(x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    chol.solve_in_place(&mut r);
    for (xi, ri) in x.iter_mut().zip(&r) {
        *xi += ri;
    }
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(u, v)| u + a * v).collect()
}

pub(crate) fn solve(c: &Compiled<'_>) -> Result<Output> {
    Solver::new(c).run()
}
