//! Symmetric banded matrices and their Cholesky factorization.
//!
//! Only the lower band is stored: entry `(i, j)` with `i - bw <= j <= i`
//! lives at `data[i * (bw + 1) + bw - (i - j)]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + self.bw - (i - j)
    }

    /// Entry `(i, j)`; either triangle may be addressed.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// Adds `weight * v v^T` to the square block whose top-left corner is
    /// `(start, start)`. Requires `v.len() <= bw + 1`.
    pub fn add_outer(&mut self, start: usize, v: &[f64], weight: f64) {
        assert!(v.len() <= self.bw + 1 && start + v.len() <= self.n);
        for (a, va) in v.iter().enumerate() {
            let f = weight * va;
            if f == 0.0 {
                continue;
            }
            let k = self.idx(start + a, start);
            for (slot, vb) in self.data[k..=k + a].iter_mut().zip(&v[..=a]) {
                *slot += f * vb;
            }
        }
    }

    pub fn add_diagonal(&mut self, diag: &[f64]) {
        assert_eq!(diag.len(), self.n);
        for (i, v) in diag.iter().enumerate() {
            let k = self.idx(i, i);
            self.data[k] += v;
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[self.idx(i, lo)..=self.idx(i, i)];
            y[i] += dot(row, &x[lo..=i]);
            let xi = x[i];
            for (yj, a) in y[lo..i].iter_mut().zip(row) {
                *yj += a * xi;
            }
        }
        y
    }

    /// Cholesky factor `L` with `A = L L^T`, stored in the same band layout.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                // row r of L is stored so that L(r, k) sits at r * w + bw - r + k
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                let s = self.data[self.idx(i, j)] - dot(&l[ri + lo..ri + j], &l[rj + lo..rj + j]);
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite(i));
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Ok(BandCholesky { n, bw, l })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b[..a.len()].as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + self.bw - (i - j)]
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let ri = i * w + bw - i;
            let s = b[i] - dot(&self.l[ri + lo..ri + i], &b[lo..i]);
            b[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            let bi = b[i] / self.at(i, i);
            b[i] = bi;
            // column i of L^T scatters into the earlier unknowns
            let lo = i.saturating_sub(bw);
            let ri = i * w + bw - i;
            for (bk, lik) in b[lo..i].iter_mut().zip(&self.l[ri + lo..ri + i]) {
                *bk -= lik * bi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Diagonal of `A^{-1}` by selected inversion within the band.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        // z holds the band of the inverse in the same layout (lower part)
        let w = bw + 1;
        let mut z = vec![0.0; n * w];
        let zi = |i: usize, j: usize| -> usize {
            let (i, j) = if i >= j { (i, j) } else { (j, i) };
            i * w + bw - (i - j)
        };
        for i in (0..n).rev() {
            let lii = self.at(i, i);
            let hi = (i + bw).min(n - 1);
            for j in (i..=hi).rev() {
                let mut s = if i == j { 1.0 / lii } else { 0.0 };
                for k in i + 1..=hi {
                    if k.abs_diff(j) <= bw {
                        s -= self.at(k, i) * z[zi(k, j)];
                    }
                }
                z[zi(i, j)] = s / lii;
            }
        }
        (0..n).map(|i| z[zi(i, i)]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, bw: usize) -> BandMatrix {
        let mut a = BandMatrix::zeros(n, bw);
        for i in 0..n {
            a.add(i, i, 4.0 + i as f64 * 0.1);
            for j in i.saturating_sub(bw)..i {
                a.add(i, j, 0.3 / (1.0 + (i - j) as f64) * if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        a
    }

    fn dense_inverse(a: &BandMatrix) -> Vec<Vec<f64>> {
        let n = a.n();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r: Vec<f64> = (0..n).map(|j| a.get(i, j)).collect();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for c in 0..n {
            let piv = (c..n).max_by(|x, y| m[*x][c].abs().total_cmp(&m[*y][c].abs())).unwrap();
            m.swap(c, piv);
            let d = m[c][c];
            m[c].iter_mut().for_each(|v| *v /= d);
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let row_c = m[c].clone();
                    m[r].iter_mut().zip(row_c).for_each(|(v, w)| *v -= f * w);
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    #[test]
    fn solve_matches_product() {
        let a = sample(30, 4);
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&x);
        let sol = a.cholesky().unwrap().solve(&b);
        for (u, v) in sol.iter().zip(&x) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_diagonal_matches_dense() {
        let a = sample(15, 3);
        let inv = dense_inverse(&a);
        let diag = a.cholesky().unwrap().inverse_diagonal();
        for i in 0..15 {
            assert!((diag[i] - inv[i][i]).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn indefinite_is_reported() {
        let mut a = BandMatrix::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 0, 2.0);
        a.add(1, 1, 1.0);
        assert!(matches!(a.cholesky(), Err(Error::NotPositiveDefinite(1))));
    }
}
