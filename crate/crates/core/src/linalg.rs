//! Small sparse/banded kernels for the radial operators.
//!
//! Every stencil on the radial grid couples at most a handful of neighbouring
//! nodes, so the normal matrices that appear in the energy (`Lᵀ W L`, `Dᵀ W D`)
//! are banded and symmetric. A dense factorization would be wasteful at the
//! grid sizes used here.

use crate::error::{Error, Result};

/// Row-compressed sparse matrix with few entries per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Adds `value` to entry `(row, col)`, merging duplicates.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(col < self.ncols);
        let r = &mut self.rows[row];
        match r.iter_mut().find(|(c, _)| *c == col) {
            Some((_, v)) => *v += value,
            None => r.push((col, value)),
        }
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn clear_row(&mut self, i: usize) {
        self.rows[i].clear();
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `selfᵀ y`.
    pub fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows.len());
        let mut out = vec![0.0; self.ncols];
        for (r, yi) in self.rows.iter().zip(y) {
            for &(c, v) in r {
                out[c] += v * yi;
            }
        }
        out
    }

    /// `self · rhs` where `rhs` is another sparse matrix.
    pub fn compose(&self, rhs: &SparseRows) -> SparseRows {
        assert_eq!(self.ncols, rhs.nrows());
        let mut out = SparseRows::new(self.nrows(), rhs.ncols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(k, a) in r {
                for &(j, b) in rhs.row(k) {
                    out.add(i, j, a * b);
                }
            }
        }
        out
    }

    /// Largest |row − col| over stored entries.
    pub fn bandwidth(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(c, _)| i.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    /// Weighted Gram matrix `selfᵀ diag(w) self` in symmetric band storage.
    pub fn weighted_gram(&self, w: &[f64]) -> SymBand {
        debug_assert_eq!(w.len(), self.rows.len());
        let kd = self
            .rows
            .iter()
            .map(|r| {
                let lo = r.iter().map(|e| e.0).min().unwrap_or(0);
                let hi = r.iter().map(|e| e.0).max().unwrap_or(0);
                hi - lo
            })
            .max()
            .unwrap_or(0);
        let mut g = SymBand::zeros(self.ncols, kd);
        for (r, &wi) in self.rows.iter().zip(w) {
            if wi == 0.0 {
                continue;
            }
            for &(a, va) in r {
                for &(b, vb) in r {
                    if b >= a {
                        g.add(a, b, wi * va * vb);
                    }
                }
            }
        }
        g
    }
}

/// Symmetric banded matrix, upper band stored row-wise: `data[i][k] = A[i][i+k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    kd: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, kd: usize) -> Self {
        Self {
            n,
            kd,
            data: vec![0.0; n * (kd + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.kd
    }

    fn idx(&self, i: usize, k: usize) -> usize {
        i * (self.kd + 1) + k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        if b - a > self.kd {
            0.0
        } else {
            self.data[self.idx(a, b - a)]
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        assert!(b - a <= self.kd, "entry ({a},{b}) outside band {}", self.kd);
        let k = self.idx(a, b - a);
        self.data[k] += v;
    }

    pub fn add_diag(&mut self, d: &[f64], scale: f64) {
        for (i, di) in d.iter().enumerate() {
            let k = self.idx(i, 0);
            self.data[k] += scale * di;
        }
    }

    /// `self + scale · other`, widening the band if needed.
    pub fn plus(&self, other: &SymBand, scale: f64) -> SymBand {
        assert_eq!(self.n, other.n);
        let kd = self.kd.max(other.kd);
        let mut out = SymBand::zeros(self.n, kd);
        for i in 0..self.n {
            for k in 0..=kd {
                if i + k >= self.n {
                    break;
                }
                let v = self.get(i, i + k) + scale * other.get(i, i + k);
                if v != 0.0 {
                    out.add(i, i + k, v);
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let d = self.data[self.idx(i, 0)];
            y[i] += d * x[i];
            for k in 1..=self.kd {
                let j = i + k;
                if j >= self.n {
                    break;
                }
                let a = self.data[self.idx(i, k)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn cholesky(&self) -> Result<BandCholesky> {
        let (n, kd) = (self.n, self.kd);
        let mut u = self.data.clone();
        let at = |i: usize, k: usize| i * (kd + 1) + k;
        for j in 0..n {
            let k0 = j.saturating_sub(kd);
            let mut s = u[at(j, 0)];
            for k in k0..j {
                let ukj = u[at(k, j - k)];
                s -= ukj * ukj;
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::LinAlg(format!(
                    "matrix not positive definite at pivot {j} (value {s:e})"
                )));
            }
            let djj = s.sqrt();
            u[at(j, 0)] = djj;
            let imax = (j + kd).min(n - 1);
            for i in j + 1..=imax {
                let mut s = u[at(j, i - j)];
                for k in i.saturating_sub(kd)..j {
                    s -= u[at(k, j - k)] * u[at(k, i - k)];
                }
                u[at(j, i - j)] = s / djj;
            }
        }
        Ok(BandCholesky { n, kd, u })
    }
}

/// Upper factor `U` with `A = Uᵀ U`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    kd: usize,
    u: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kd) = (self.n, self.kd);
        let at = |i: usize, k: usize| i * (kd + 1) + k;
        let mut y = b.to_vec();
        // Uᵀ y = b
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(kd)..i {
                s -= self.u[at(k, i - k)] * y[k];
            }
            y[i] = s / self.u[at(i, 0)];
        }
        // U x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in 1..=kd {
                let j = i + k;
                if j >= n {
                    break;
                }
                s -= self.u[at(i, k)] * y[j];
            }
            y[i] = s / self.u[at(i, 0)];
        }
        y
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ w_i a_i b_i`.
pub fn wdot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

/// Removes from `z` its H-orthogonal projection onto `span(ys)`, given `hys[i] = H ys[i]`.
pub fn h_project(z: &[f64], ys: &[Vec<f64>], hys: &[Vec<f64>]) -> Vec<f64> {
    let k = ys.len();
    let mut g = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            g[i][j] = dot(&hys[i], &ys[j]);
        }
        g[i][k] = dot(&hys[i], z);
    }
    // Gaussian elimination with partial pivoting on the small Gram system.
    for c in 0..k {
        let piv = (c..k).max_by(|&a, &b| g[a][c].abs().total_cmp(&g[b][c].abs())).unwrap();
        g.swap(c, piv);
        for r in c + 1..k {
            let f = g[r][c] / g[c][c];
            for j in c..=k {
                g[r][j] -= f * g[c][j];
            }
        }
    }
    let mut coef = vec![0.0; k];
    for c in (0..k).rev() {
        let s: f64 = (c + 1..k).map(|j| g[c][j] * coef[j]).sum();
        coef[c] = (g[c][k] - s) / g[c][c];
    }
    let mut out = z.to_vec();
    for (y, cf) in ys.iter().zip(&coef) {
        out.iter_mut().zip(y).for_each(|(o, v)| *o -= cf * v);
    }
    out
}

/// Neumaier-compensated sum.
pub fn ksum(it: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut comp) = (0.0f64, 0.0f64);
    for x in it {
        let t = s + x;
        comp += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + comp
}
