//! Test-side reference implementations, written from the model definitions
//! without calling into the library's numerical code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use sevrate::series::default_origin;
use sevrate::solver::{DeconvProblem, DeconvSpec};
use sevrate::DelayDistribution;

/// A tiny deconvolution instance in plain arrays.
#[derive(Debug, Clone)]
pub struct Instance {
    pub primary: Vec<f64>,
    /// `y[r]` is observed on rate index `r + d`.
    pub y: Vec<f64>,
    pub mass: Vec<f64>,
    pub order: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub tail: bool,
}

/// Dense `(n-k) x n` matrix of k-th differences built by repeated first
/// differencing.
pub fn dense_diff(k: usize, n: usize) -> Vec<Vec<f64>> {
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..k {
        m = (0..m.len() - 1)
            .map(|i| m[i + 1].iter().zip(&m[i]).map(|(a, b)| a - b).collect())
            .collect();
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Instance {
    pub fn n(&self) -> usize {
        self.primary.len()
    }

    pub fn d(&self) -> usize {
        self.mass.len() - 1
    }

    pub fn k(&self) -> usize {
        self.order + 1
    }

    /// Coefficients of `mu_r` in the rates.
    pub fn conv_row(&self, r: usize) -> Vec<f64> {
        let d = self.d();
        let mut a = vec![0.0; self.n()];
        for lag in 0..=d {
            let j = r + d - lag;
            a[j] = self.mass[lag] * self.primary[j];
        }
        a
    }

    /// Weights on `(p_{i+1} - p_i)^2`: the reciprocal delay CDF at the lag
    /// from day `i + 1` to the last day, for the last `d + 1` differences.
    pub fn tail_weights(&self) -> Vec<f64> {
        let n = self.n();
        (0..n - 1)
            .map(|i| {
                let lag = n - 1 - (i + 1);
                if lag <= self.d() {
                    1.0 / self.mass[..=lag].iter().sum::<f64>()
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Loss plus tail penalty.
    pub fn smooth(&self, p: &[f64]) -> f64 {
        let rows = self.y.len() as f64;
        let mut f = 0.0;
        for (r, &y) in self.y.iter().enumerate() {
            let mu = dot(&self.conv_row(r), p);
            f += if y > 0.0 { mu - y * mu.ln() } else { mu } / rows;
        }
        if self.gamma > 0.0 {
            let scale = self.gamma / (self.d() + 1) as f64;
            for (i, w) in self.tail_weights().iter().enumerate() {
                f += scale * w * (p[i + 1] - p[i]).powi(2);
            }
        }
        f
    }

    pub fn l1_weight(&self) -> f64 {
        self.lambda / (self.n() - self.k()) as f64
    }

    pub fn objective(&self, p: &[f64]) -> f64 {
        let dm = dense_diff(self.k(), self.n());
        self.smooth(p) + self.l1_weight() * dm.iter().map(|row| dot(row, p).abs()).sum::<f64>()
    }

    /// Signed coefficients of the tail equality on the last `k + 1` rates.
    pub fn tail_row(&self) -> Vec<f64> {
        let n = self.n();
        let dm = dense_diff(self.k(), n);
        dm.last().expect("nonempty").clone()
    }

    pub fn delay(&self) -> DelayDistribution {
        DelayDistribution::new(self.mass.clone()).expect("valid mass")
    }

    pub fn problem(&self) -> DeconvProblem {
        DeconvProblem::from_parts(default_origin(), self.primary.clone(), self.y.clone(), &self.delay()).expect("valid")
    }

    pub fn spec(&self) -> DeconvSpec {
        if self.tail {
            DeconvSpec::realtime(self.order, self.lambda, self.gamma)
        } else {
            DeconvSpec {
                gamma: self.gamma,
                ..DeconvSpec::retrospective(self.order, self.lambda)
            }
        }
    }
}

/// Random instance with `n <= 12`, `d <= 2`.
pub fn random_instance(rng: &mut ChaCha8Rng, order: usize, realtime: bool) -> Instance {
    random_sized_instance(rng, order, realtime, 12, 2)
}

/// Random instance with at most `max_n` rates and delay support at most
/// `max_d`.
pub fn random_sized_instance(rng: &mut ChaCha8Rng, order: usize, realtime: bool, max_n: usize, max_d: usize) -> Instance {
    let d = rng.random_range(0..=max_d);
    let n = rng.random_range((order + 4).max(d + 3)..=max_n);
    let mut mass: Vec<f64> = (0..=d).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    let primary: Vec<f64> = (0..n).map(|_| rng.random_range(5..200) as f64).collect();
    let truth: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
    let y = (0..n - d)
        .map(|r| {
            let mu: f64 = (0..=d).map(|lag| mass[lag] * primary[r + d - lag] * truth[r + d - lag]).sum();
            Poisson::new(mu).expect("positive").sample(rng)
        })
        .collect();
    Instance {
        primary,
        y,
        mass,
        order,
        lambda: 10f64.powf(rng.random_range(-1.0..2.0)),
        gamma: if realtime { 10f64.powf(rng.random_range(-1.0..2.0)) } else { 0.0 },
        tail: realtime,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("rows");
        a.swap(c, piv);
        b.swap(c, piv);
        let pv = a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / pv;
            if f != 0.0 {
                for j in c..n {
                    a[r][j] -= f * a[c][j];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|j| a[c][j] * x[j]).sum();
        x[c] = (b[c] - s) / a[c][c];
    }
    x
}

/// Primal log-barrier method on the epigraph form
/// `min smooth(p) + w * sum s  s.t. -s <= D p <= s, 0 <= p <= 1`
/// with dense Newton steps. Returns the rates.
pub fn barrier_solve(inst: &Instance) -> Vec<f64> {
    let n = inst.n();
    let dm = dense_diff(inst.k(), n);
    let rows = dm.len();
    let nv = n + rows;
    let w = inst.l1_weight();
    let eq = inst.tail.then(|| inst.tail_row());
    let scale = inst.gamma / (inst.d() + 1) as f64;
    let tw = inst.tail_weights();
    let conv: Vec<Vec<f64>> = (0..inst.y.len()).map(|r| inst.conv_row(r)).collect();
    let ny = inst.y.len() as f64;

    // constraint values; None when outside the domain
    let slacks = |z: &[f64]| -> Option<Vec<f64>> {
        let p = &z[..n];
        let mut g = Vec::with_capacity(2 * rows + 2 * n);
        for (i, row) in dm.iter().enumerate() {
            let dp = dot(row, p);
            g.push(z[n + i] - dp);
            g.push(z[n + i] + dp);
        }
        for &v in p {
            g.push(v);
            g.push(1.0 - v);
        }
        for (r, a) in conv.iter().enumerate() {
            if inst.y[r] > 0.0 && dot(a, p) <= 0.0 {
                return None;
            }
        }
        g.iter().all(|v| *v > 0.0).then_some(g)
    };
    let phi = |z: &[f64], tau: f64| -> Option<f64> {
        let g = slacks(z)?;
        let f0 = inst.smooth(&z[..n]) + w * z[n..].iter().sum::<f64>();
        Some(tau * f0 - g.iter().map(|v| v.ln()).sum::<f64>())
    };

    let mut z = vec![0.5; nv];
    for (i, row) in dm.iter().enumerate() {
        z[n + i] = dot(row, &z[..n]).abs() + 1.0;
    }
    let m_ineq = (2 * rows + 2 * n) as f64;
    let mut tau = 1.0;
    loop {
        for _ in 0..200 {
            let p = &z[..n];
            let mut grad = vec![0.0; nv];
            let mut hess = vec![vec![0.0; nv]; nv];
            for (r, a) in conv.iter().enumerate() {
                let mu = dot(a, p);
                let y = inst.y[r];
                let g1 = (1.0 - y / mu) / ny;
                let h1 = y / (mu * mu) / ny;
                for i in 0..n {
                    grad[i] += tau * g1 * a[i];
                    for j in 0..n {
                        hess[i][j] += tau * h1 * a[i] * a[j];
                    }
                }
            }
            if inst.gamma > 0.0 {
                for (i, wi) in tw.iter().enumerate() {
                    let c = tau * scale * wi;
                    let diff = p[i + 1] - p[i];
                    grad[i + 1] += 2.0 * c * diff;
                    grad[i] -= 2.0 * c * diff;
                    hess[i][i] += 2.0 * c;
                    hess[i + 1][i + 1] += 2.0 * c;
                    hess[i][i + 1] -= 2.0 * c;
                    hess[i + 1][i] -= 2.0 * c;
                }
            }
            for i in 0..rows {
                grad[n + i] += tau * w;
            }
            // barrier terms: each slack is linear in z with gradient `e`
            let mut add = |e: &[(usize, f64)], u: f64| {
                for &(i, ei) in e {
                    grad[i] -= ei / u;
                    for &(j, ej) in e {
                        hess[i][j] += ei * ej / (u * u);
                    }
                }
            };
            for (i, row) in dm.iter().enumerate() {
                let dp = dot(row, p);
                let mut lo: Vec<(usize, f64)> = row.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, c)| (j, -c)).collect();
                lo.push((n + i, 1.0));
                add(&lo, z[n + i] - dp);
                let mut hi: Vec<(usize, f64)> = row.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, c)| (j, *c)).collect();
                hi.push((n + i, 1.0));
                add(&hi, z[n + i] + dp);
            }
            for j in 0..n {
                add(&[(j, 1.0)], p[j]);
                add(&[(j, -1.0)], 1.0 - p[j]);
            }
            let step = match &eq {
                None => gauss_solve(hess, grad.iter().map(|g| -g).collect()),
                Some(a) => {
                    let mut kkt = vec![vec![0.0; nv + 1]; nv + 1];
                    for i in 0..nv {
                        kkt[i][..nv].copy_from_slice(&hess[i]);
                    }
                    for j in 0..n {
                        kkt[nv][j] = a[j];
                        kkt[j][nv] = a[j];
                    }
                    let mut rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
                    rhs.push(0.0);
                    let mut s = gauss_solve(kkt, rhs);
                    s.truncate(nv);
                    s
                }
            };
            let decrement = -dot(&grad, &step);
            if decrement / 2.0 <= 1e-13 {
                break;
            }
            let base = phi(&z, tau).expect("feasible iterate");
            let mut alpha = 1.0;
            loop {
                let trial: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + alpha * b).collect();
                if let Some(v) = phi(&trial, tau) {
                    if v <= base - 0.25 * alpha * decrement {
                        z = trial;
                        break;
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-20 {
                    break;
                }
            }
            if alpha < 1e-20 {
                break;
            }
        }
        if m_ineq / tau < 1e-12 {
            break;
        }
        tau *= 8.0;
    }
    z[..n].to_vec()
}

/// Sum of `|D^(k) p|`.
pub fn l1_of_diff(p: &[f64], k: usize) -> f64 {
    dense_diff(k, p.len()).iter().map(|row| dot(row, p).abs()).sum()
}
