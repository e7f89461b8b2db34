//! Smallest penalty level at which the estimate is a single polynomial.
//!
//! For `lambda` large enough the solution has `D^(m+1) p = 0`, so it is the
//! degree-`m` polynomial `p = B alpha` minimizing the smooth part over the
//! box. At that point the optimality conditions of the full problem read
//! `grad + nu = -lambda/(n-m-1) D^T v` with `||v||_inf <= 1`, where `nu`
//! collects the box multipliers. The bound is therefore
//! `(n-m-1) ||(D D^T)^{-1} D (grad + nu)||_inf` evaluated at the polynomial
//! minimizer, which alternates between a Newton step in `alpha` and the
//! maximizing row of the dual certificate.

use super::{Compiled, DeconvProblem, DeconvSpec, LossKind};
use crate::band::BandMatrix;
use crate::error::Result;
use crate::operators::{diff_matrix, difference_coefficients};

/// Relative margin covering the residual error of the polynomial fit.
const SAFETY: f64 = 1e-8;

/// Dual certificate for the all-polynomial solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaMaxBound {
    pub value: f64,
    /// Polynomial coefficients on the centered grid `tau in [-1, 1]`.
    pub alpha: Vec<f64>,
    /// Row of `D^(m+1)` attaining the certificate norm.
    pub argmax_row: usize,
    pub iterations: usize,
    /// Certificate value after each completed stage; the last entry is the
    /// returned value before the safety margin.
    pub trace: Vec<f64>,
}

fn basis(n: usize, q: usize) -> Vec<Vec<f64>> {
    let half = (n - 1) as f64 / 2.0;
    (0..q)
        .map(|c| {
            (0..n)
                .map(|j| ((j as f64 - half) / half.max(1.0)).powi(c as i32))
                .collect()
        })
        .collect()
}

fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let q = b.len();
    for c in 0..q {
        let piv = (c..q).max_by(|x, y| a[*x][c].abs().total_cmp(&a[*y][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..q {
            let f = a[r][c] / a[c][c];
            for k in c..q {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    for c in (0..q).rev() {
        let s: f64 = (c + 1..q).map(|k| a[c][k] * b[k]).sum();
        b[c] = (b[c] - s) / a[c][c];
    }
    Some(b)
}

struct Restricted<'a> {
    c: &'a Compiled<'a>,
    cols: Vec<Vec<f64>>,
    // columns of A B
    acols: Vec<Vec<f64>>,
}

impl Restricted<'_> {
    /// Damped Newton on the restricted objective until no further decrease.
    fn minimize(&self, mut alpha: Vec<f64>, t: Option<f64>, cap: usize, used: &mut usize) -> Vec<f64> {
        while *used < cap {
            let Some((step, dec)) = self.newton_step(&alpha, t) else {
                break;
            };
            *used += 1;
            let Some(f0) = self.barrier(&alpha, t) else {
                break;
            };
            if !(dec > 0.0) || dec <= 1e-15 * f0.abs().max(1.0) {
                break;
            }
            let mut s = 1.0;
            let mut moved = false;
            while s >= 1e-12 {
                let trial: Vec<f64> = alpha.iter().zip(&step).map(|(a, d)| a + s * d).collect();
                if let Some(f1) = self.barrier(&trial, t) {
                    if f1 <= f0 - 0.25 * s * dec && trial != alpha {
                        alpha = trial;
                        moved = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            if !moved {
                break;
            }
        }
        alpha
    }

    fn point(&self, alpha: &[f64]) -> Vec<f64> {
        let n = self.cols[0].len();
        (0..n)
            .map(|j| self.cols.iter().zip(alpha).map(|(b, a)| b[j] * a).sum())
            .collect()
    }

    /// Barrier objective `t F(p) - sum log p - sum log(1-p)`, or plain
    /// `F(p)` without a barrier; `None` outside the domain.
    fn barrier(&self, alpha: &[f64], t: Option<f64>) -> Option<f64> {
        let p = self.point(alpha);
        if t.is_some() && p.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return None;
        }
        let mu = self.c.conv.apply(&p);
        if self.c.loss == LossKind::Poisson
            && self.c.row_weight.iter().zip(&mu).any(|(w, m)| *w != 0.0 && !(*m > 0.0))
        {
            return None;
        }
        let f = self.c.smooth_value_mu(&p, &mu);
        match t {
            Some(t) => Some(t * f - p.iter().map(|v| v.ln() + (1.0 - v).ln()).sum::<f64>()),
            None => Some(f),
        }
    }

    fn newton_step(&self, alpha: &[f64], barrier: Option<f64>) -> Option<(Vec<f64>, f64)> {
        let q = alpha.len();
        let p = self.point(alpha);
        let mu = self.c.conv.apply(&p);
        let g = self.c.smooth_gradient_mu(&p, &mu);
        let t = barrier.unwrap_or(1.0);
        let on = if barrier.is_some() { 1.0 } else { 0.0 };
        let gb: Vec<f64> = (0..p.len())
            .map(|j| t * g[j] + on * (1.0 / (1.0 - p[j]) - 1.0 / p[j]))
            .collect();
        let grad: Vec<f64> = self.cols.iter().map(|b| b.iter().zip(&gb).map(|(x, y)| x * y).sum()).collect();
        let mut hess = vec![vec![0.0; q]; q];
        for (r, w) in self.c.row_weight.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let h = t * w * self.c.dphi(r, mu[r]).1;
            for a in 0..q {
                for b in 0..=a {
                    hess[a][b] += h * self.acols[a][r] * self.acols[b][r];
                }
            }
        }
        let box_curv: Vec<f64> = p
            .iter()
            .map(|v| on * (1.0 / (v * v) + 1.0 / ((1.0 - v) * (1.0 - v))))
            .collect();
        for a in 0..q {
            for b in 0..=a {
                let mut s: f64 = (0..p.len()).map(|j| box_curv[j] * self.cols[a][j] * self.cols[b][j]).sum();
                if let Some(qw) = &self.c.quad_weight {
                    for (i, wi) in qw.iter().enumerate() {
                        let da = self.cols[a][i + 1] - self.cols[a][i];
                        let db = self.cols[b][i + 1] - self.cols[b][i];
                        s += t * 2.0 * wi * da * db;
                    }
                }
                hess[a][b] += s;
            }
        }
        for a in 0..q {
            for b in a + 1..q {
                hess[a][b] = hess[b][a];
            }
        }
        let step = dense_solve(hess, grad.iter().map(|v| -v).collect())?;
        let decrement: f64 = -step.iter().zip(&grad).map(|(s, g)| s * g).sum::<f64>();
        Some((step, decrement))
    }

    /// Certificate `(n-k) ||(D D^T)^{-1} D (grad + nu)||_inf` at `alpha`.
    fn certificate(&self, alpha: &[f64], t: Option<f64>) -> Result<(f64, usize)> {
        let p = self.point(alpha);
        let n = p.len();
        let k = self.c.diff_order;
        let mu = self.c.conv.apply(&p);
        let mut z = self.c.smooth_gradient_mu(&p, &mu);
        if let Some(t) = t {
            for (zj, pj) in z.iter_mut().zip(&p) {
                // barrier multipliers of p >= 0 and p <= 1
                *zj += 1.0 / (t * (1.0 - pj)) - 1.0 / (t * pj);
            }
        }
        let d = diff_matrix(k, n)?;
        let rows = d.rows();
        let coef = difference_coefficients(k);
        let mut ddt = BandMatrix::zeros(rows, k);
        for i in 0..rows {
            for s in 0..=k.min(i) {
                let v: f64 = (0..=k - s).map(|a| coef[a] * coef[a + s]).sum();
                ddt.add(i, i - s, v);
            }
        }
        let v = ddt.cholesky()?.solve(&d.apply(&z));
        let (arg, best) = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(ai, av), (i, x)| if x.abs() > av { (i, x.abs()) } else { (ai, av) });
        Ok(((n - k) as f64 * best, arg))
    }
}

/// Bound on the smallest `lambda` giving an all-polynomial solution for the
/// loss, order and tail penalty in `spec`; `spec.lambda` is ignored.
/// `iterations` caps the Newton steps on the polynomial coefficients.
pub fn lambda_max_bound(problem: &DeconvProblem, spec: &DeconvSpec, iterations: usize) -> Result<LambdaMaxBound> {
    let mut spec = *spec;
    spec.lambda = 0.0;
    let c = Compiled::new(problem, &spec)?;
    bound_for(&c, iterations)
}

fn restricted<'a>(c: &'a Compiled<'a>) -> (Restricted<'a>, Vec<f64>) {
    let n = c.conv.cols();
    let q = c.diff_order;
    let cols = basis(n, q);
    let acols = cols.iter().map(|b| c.conv.apply(b)).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (r, w) in c.row_weight.iter().enumerate() {
        if *w != 0.0 {
            num += c.y[r];
            den += c.conv.row_sum(r);
        }
    }
    let mut alpha = vec![0.0; q];
    alpha[0] = if den > 0.0 { (num / den).clamp(1e-3, 0.9) } else { 0.1 };
    (Restricted { c, cols, acols }, alpha)
}

/// Best polynomial of degree `m` strictly inside the box, if the
/// unconstrained polynomial fit lies there.
pub(crate) fn interior_polynomial(c: &Compiled<'_>, iterations: usize) -> Option<Vec<f64>> {
    let (rs, alpha) = restricted(c);
    let mut used = 0;
    let alpha = rs.minimize(alpha, None, iterations, &mut used);
    let p = rs.point(&alpha);
    p.iter().all(|v| *v > 0.0 && *v < 1.0).then_some(p)
}

fn bound_for(c: &Compiled<'_>, iterations: usize) -> Result<LambdaMaxBound> {
    let n = c.conv.cols();
    let q = c.diff_order;
    let (rs, mut alpha) = restricted(c);
    let mut used = 0;
    let mut trace = Vec::new();
    // the box is usually inactive at the polynomial fit, where the box
    // multipliers vanish and the certificate is exact
    alpha = rs.minimize(alpha, None, iterations, &mut used);
    let p = rs.point(&alpha);
    let mut stage = None;
    if p.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        alpha = vec![0.0; q];
        alpha[0] = 0.5;
        let mut t = 1.0;
        while used < iterations {
            alpha = rs.minimize(alpha, Some(t), iterations, &mut used);
            trace.push(rs.certificate(&alpha, Some(t))?.0);
            let scale = rs.barrier(&alpha, None).map_or(1.0, |f| f.abs().max(1.0));
            if 2.0 * n as f64 / t <= 1e-12 * scale {
                break;
            }
            t *= 20.0;
        }
        stage = Some(t);
    }
    let (value, argmax_row) = rs.certificate(&alpha, stage)?;
    trace.push(value);
    Ok(LambdaMaxBound {
        value: value * (1.0 + SAFETY),
        alpha,
        argmax_row,
        iterations: used,
        trace,
    })
}
