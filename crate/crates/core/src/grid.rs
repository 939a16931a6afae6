//! Radial discretization of ℝ^N.
//!
//! Nodes are `r_i = R (i/M)^σ`, so all stencils live in the uniform variable
//! `ξ = i/M` and are mapped to `r` by the chain rule. Derivatives use 5-point
//! fourth-order central differences in ξ, with an even ghost extension across
//! the origin and an odd one across `R` (so `u(R) = 0`).
//!
//! Quadrature is the trapezoid rule in ξ with a sixth-order Gregory correction
//! at `ξ = 1`. The left end needs no correction: the Jacobian `r^{N-1} r_ξ`
//! vanishes to high order there. Unlike Simpson weights these do not alternate,
//! which keeps `W⁻¹ Lᵀ W` a consistent approximation of `L`.
//!
//! The solvers work on the free nodes `1..M-1`. The origin value is tied to
//! them by even extrapolation in `t = r²`, and `u_M = 0`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SparseRows, SymBand};
use crate::quadrature::sphere_area;

const D1: [f64; 5] = [1.0, -8.0, 0.0, 8.0, -1.0];
const D2: [f64; 5] = [-1.0, 16.0, -30.0, 16.0, -1.0];
const GREGORY: [f64; 5] = [95.0 / 288.0, 317.0 / 240.0, 23.0 / 30.0, 793.0 / 720.0, 157.0 / 160.0];

pub const MIN_NODES: usize = 64;

#[derive(Debug, Clone)]
pub struct RadialGrid {
    n: usize,
    r_max: f64,
    m: usize,
    stretch: f64,
    xi: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    omega: f64,
    lap: SparseRows,
    grad: SparseRows,
    tie: [f64; 3],
    prolong: SparseRows,
    lap_free: SparseRows,
    grad_free: SparseRows,
    gram_lap: SymBand,
    gram_grad: SymBand,
}

fn ghost(j: isize, m: usize) -> (usize, f64) {
    if j < 0 {
        ((-j) as usize, 1.0)
    } else if j as usize > m {
        (2 * m - j as usize, -1.0)
    } else {
        (j as usize, 1.0)
    }
}

/// Builds the grid and assembles its operators.
pub fn make_grid(n: usize, r_max: f64, m: usize, stretch: f64) -> Result<RadialGrid> {
    if n < 5 {
        return Err(Error::InvalidParams(format!("dimension N = {n}, need N >= 5")));
    }
    if !(r_max > 0.0) || !r_max.is_finite() {
        return Err(Error::InvalidParams(format!("radius R = {r_max} must be positive")));
    }
    if m < MIN_NODES {
        return Err(Error::InvalidParams(format!(
            "M = {m} too small for the stencil, need M >= {MIN_NODES}"
        )));
    }
    if !(stretch >= 1.0) || !stretch.is_finite() {
        return Err(Error::InvalidParams(format!("stretch = {stretch} must be >= 1")));
    }
    let h = 1.0 / m as f64;
    let xi: Vec<f64> = (0..=m).map(|i| i as f64 * h).collect();
    let nodes: Vec<f64> = xi.iter().map(|&x| r_max * x.powf(stretch)).collect();
    let r_xi = |x: f64| r_max * stretch * x.powf(stretch - 1.0);
    let r_xixi = |x: f64| r_max * stretch * (stretch - 1.0) * x.powf(stretch - 2.0);
    let omega = sphere_area(n);

    let mut gamma = vec![1.0; m + 1];
    gamma[0] = 0.5;
    for (k, g) in GREGORY.iter().enumerate() {
        gamma[m - k] = *g;
    }
    let weights: Vec<f64> = (0..=m)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                omega * h * gamma[i] * nodes[i].powi(n as i32 - 1) * r_xi(xi[i])
            }
        })
        .collect();

    let mut grad = SparseRows::new(m + 1, m + 1);
    let mut lap = SparseRows::new(m + 1, m + 1);
    for i in 1..=m {
        let rx = r_xi(xi[i]);
        for (k, (&c1, &c2)) in D1.iter().zip(&D2).enumerate() {
            let (j, sgn) = ghost(i as isize + k as isize - 2, m);
            let du = sgn * c1 / (12.0 * h);
            let ddu = sgn * c2 / (12.0 * h * h);
            if c1 != 0.0 {
                grad.add(i, j, du / rx);
            }
            if i < m {
                // Δu = u_ξξ/r_ξ² + u_ξ (−r_ξξ/r_ξ³ + (N−1)/(r r_ξ))
                let first = -r_xixi(xi[i]) / rx.powi(3) + (n as f64 - 1.0) / (nodes[i] * rx);
                let v = ddu / (rx * rx) + du * first;
                if v != 0.0 {
                    lap.add(i, j, v);
                }
            }
        }
    }
    // Δu(0) = N u''(0), with u''(0) = 2·d/dt of the quadratic in t = r² through nodes 0..2.
    let (t1, t2) = (nodes[1].powi(2), nodes[2].powi(2));
    let l1 = t2 / (t1 * (t2 - t1));
    let l2 = -t1 / (t2 * (t2 - t1));
    let nf = n as f64;
    lap.add(0, 0, 2.0 * nf * (-l1 - l2));
    lap.add(0, 1, 2.0 * nf * l1);
    lap.add(0, 2, 2.0 * nf * l2);

    let t: [f64; 3] = [nodes[1].powi(2), nodes[2].powi(2), nodes[3].powi(2)];
    let mut tie = [0.0; 3];
    for k in 0..3 {
        let mut l = 1.0;
        for j in 0..3 {
            if j != k {
                l *= -t[j] / (t[k] - t[j]);
            }
        }
        tie[k] = l;
    }

    let mut prolong = SparseRows::new(m + 1, m - 1);
    for (k, &l) in tie.iter().enumerate() {
        prolong.add(0, k, l);
    }
    for i in 1..m {
        prolong.add(i, i - 1, 1.0);
    }
    let lap_free = lap.compose(&prolong);
    let grad_free = grad.compose(&prolong);
    let gram_lap = lap_free.weighted_gram(&weights);
    let gram_grad = grad_free.weighted_gram(&weights);

    Ok(RadialGrid {
        n,
        r_max,
        m,
        stretch,
        xi,
        nodes,
        weights,
        omega,
        lap,
        grad,
        tie,
        prolong,
        lap_free,
        grad_free,
        gram_lap,
        gram_grad,
    })
}

impl RadialGrid {
    pub fn dim(&self) -> usize {
        self.n
    }
    pub fn radius(&self) -> f64 {
        self.r_max
    }
    /// Number of intervals; there are `M + 1` nodes.
    pub fn intervals(&self) -> usize {
        self.m
    }
    pub fn stretch(&self) -> f64 {
        self.stretch
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn xi(&self) -> &[f64] {
        &self.xi
    }
    pub fn sphere_area(&self) -> f64 {
        self.omega
    }
    pub fn lap_operator(&self) -> &SparseRows {
        &self.lap
    }
    pub fn grad_operator(&self) -> &SparseRows {
        &self.grad
    }
    /// `LP`: Laplacian of the prolonged free vector.
    pub fn lap_free(&self) -> &SparseRows {
        &self.lap_free
    }
    /// `DP`: derivative of the prolonged free vector.
    pub fn grad_free(&self) -> &SparseRows {
        &self.grad_free
    }
    /// `‖ΔPx‖²` as a sum of squares; the band quadratic form loses digits to cancellation.
    pub fn lap_sq_free(&self, x: &[f64]) -> f64 {
        let l = self.lap_free.matvec(x);
        l.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum()
    }
    pub fn grad_sq_free(&self, x: &[f64]) -> f64 {
        let l = self.grad_free.matvec(x);
        l.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum()
    }
    /// `(LP)ᵀ W (LP) x` without forming the band matrix.
    pub fn lap_normal_apply(&self, x: &[f64]) -> Vec<f64> {
        let mut l = self.lap_free.matvec(x);
        l.iter_mut().zip(&self.weights).for_each(|(v, w)| *v *= w);
        self.lap_free.tmatvec(&l)
    }
    pub fn grad_normal_apply(&self, x: &[f64]) -> Vec<f64> {
        let mut l = self.grad_free.matvec(x);
        l.iter_mut().zip(&self.weights).for_each(|(v, w)| *v *= w);
        self.grad_free.tmatvec(&l)
    }
    /// `(LP)ᵀ W (LP)` on the free nodes.
    pub fn gram_lap(&self) -> &SymBand {
        &self.gram_lap
    }
    /// `(DP)ᵀ W (DP)` on the free nodes.
    pub fn gram_grad(&self) -> &SymBand {
        &self.gram_grad
    }
    pub fn free_len(&self) -> usize {
        self.m - 1
    }
    /// Weights restricted to the free nodes.
    pub fn free_weights(&self) -> &[f64] {
        &self.weights[1..self.m]
    }

    /// Quadrature of `f(r_i)` against the radial measure.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&r, &w)| w * f(r)).sum()
    }

    /// Full nodal vector from free values (tie at the origin, zero at R).
    pub fn prolong(&self, x: &[f64]) -> Vec<f64> {
        self.prolong.matvec(x)
    }

    /// Adjoint of [`prolong`](Self::prolong).
    pub fn restrict_adjoint(&self, g: &[f64]) -> Vec<f64> {
        self.prolong.tmatvec(g)
    }

    pub fn to_free(&self, u: &[f64]) -> Vec<f64> {
        u[1..self.m].to_vec()
    }

    pub fn origin_tie(&self) -> [f64; 3] {
        self.tie
    }

    /// Fine-grained index of the first node with `r >= r0`.
    pub fn index_at_or_after(&self, r0: f64) -> usize {
        self.nodes.partition_point(|&r| r < r0)
    }

    /// Samples a radial profile on the nodes.
    pub fn sample(self: &Arc<Self>, f: impl Fn(f64) -> f64) -> RadialField {
        let values = self.nodes.iter().map(|&r| f(r)).collect();
        RadialField::new(self.clone(), values)
    }
}

/// Values of a radial function on a shared grid.
#[derive(Debug, Clone)]
pub struct RadialField {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
}

impl RadialField {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.m + 1, "field length does not match grid");
        Self { grid, values }
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let len = grid.m + 1;
        Self::new(grid, vec![0.0; len])
    }

    pub fn from_free(grid: Arc<RadialGrid>, x: &[f64]) -> Self {
        let v = grid.prolong(x);
        Self::new(grid, v)
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn free(&self) -> Vec<f64> {
        self.grid.to_free(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Projects onto the solver space: `u_M = 0` and the origin tie.
    pub fn admissible(&self) -> RadialField {
        RadialField::from_free(self.grid.clone(), &self.free())
    }

    pub fn scaled(&self, k: f64) -> RadialField {
        RadialField::new(self.grid.clone(), self.values.iter().map(|v| k * v).collect())
    }

    /// `self + k·other`.
    pub fn axpy(&self, k: f64, other: &RadialField) -> RadialField {
        let v = self.values.iter().zip(&other.values).map(|(a, b)| a + k * b).collect();
        RadialField::new(self.grid.clone(), v)
    }

    pub fn mass(&self) -> f64 {
        crate::linalg::ksum(self.values.iter().zip(&self.grid.weights).map(|(u, w)| w * u * u))
    }

    /// `‖u‖_q^q`.
    pub fn norm_pow(&self, q: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.grid.weights)
            .map(|(u, w)| w * u.abs().powf(q))
            .sum()
    }

    /// Weighted inner product `∫ u v`.
    pub fn inner(&self, other: &RadialField) -> f64 {
        crate::linalg::wdot(&self.grid.weights, &self.values, &other.values)
    }

    /// `u'(r_i)`.
    pub fn derivative(&self) -> RadialField {
        RadialField::new(self.grid.clone(), self.grid.grad.matvec(&self.values))
    }

    pub fn laplacian(&self) -> RadialField {
        RadialField::new(self.grid.clone(), self.grid.lap.matvec(&self.values))
    }

    pub fn bilaplacian(&self) -> RadialField {
        self.laplacian().laplacian()
    }

    pub fn grad_seminorm_sq(&self) -> f64 {
        self.derivative().mass()
    }

    pub fn lap_seminorm_sq(&self) -> f64 {
        self.laplacian().mass()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest increase `u(r_{i+1}) − u(r_i)` relative to `max |u|`; zero for a nonincreasing field.
    pub fn monotonicity_defect(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        self.values
            .windows(2)
            .map(|w| (w[1] - w[0]).max(0.0))
            .fold(0.0, f64::max)
            / scale
    }

    /// Dilation generator `(N/2) u + r u'`, the derivative of `e^{Ns/2} u(e^s r)` at `s = 0`.
    pub fn dilation_generator(&self) -> RadialField {
        let du = self.grid.grad.matvec(&self.values);
        let half_n = self.grid.n as f64 / 2.0;
        let v = self
            .values
            .iter()
            .zip(&du)
            .zip(&self.grid.nodes)
            .map(|((u, d), r)| half_n * u + r * d)
            .collect();
        RadialField::new(self.grid.clone(), v)
    }

    /// Samples `e^{Ns/2} u(e^s r)` by 6-point Lagrange interpolation in ξ.
    pub fn rescale(&self, s: f64) -> RadialField {
        let g = &self.grid;
        let m = g.m as isize;
        let es = s.exp();
        let amp = (g.n as f64 * s / 2.0).exp();
        let mut out = vec![0.0; g.m + 1];
        for (i, &r) in g.nodes.iter().enumerate() {
            let rr = es * r;
            if rr >= g.r_max {
                continue;
            }
            let x = (rr / g.r_max).powf(1.0 / g.stretch) * g.m as f64;
            let j0 = (x.floor() as isize).clamp(0, m - 1);
            let mut acc = 0.0;
            for a in -2..=3isize {
                let mut l = 1.0;
                for b in -2..=3isize {
                    if a != b {
                        l *= (x - (j0 + b) as f64) / (a - b) as f64;
                    }
                }
                let (j, sgn) = ghost(j0 + a, g.m);
                acc += l * sgn * self.values[j];
            }
            out[i] = amp * acc;
        }
        let res = RadialField::new(g.clone(), out);
        let (m0, m1) = (self.mass(), res.mass());
        if m0 > 0.0 && ((m1 - m0) / m0).abs() > 1e-6 {
            log::warn!(
                "rescale by s = {s}: mass changed from {m0:e} to {m1:e}; support under-resolved or truncated"
            );
        }
        res
    }

    pub fn to_data(&self) -> RadialFieldData {
        RadialFieldData {
            version: FIELD_VERSION,
            n: self.grid.n,
            r_max: self.grid.r_max,
            stretch: self.grid.stretch,
            nodes: self.grid.nodes.clone(),
            values: self.values.clone(),
        }
    }
}

pub const FIELD_VERSION: u32 = 1;

/// Serialized form of a field together with its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialFieldData {
    pub version: u32,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "R")]
    pub r_max: f64,
    pub stretch: f64,
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl RadialFieldData {
    /// Rebuilds the grid and checks that its nodes match the stored ones.
    pub fn into_field(self) -> Result<RadialField> {
        if self.version != FIELD_VERSION {
            return Err(Error::Format(format!("unsupported field version {}", self.version)));
        }
        if self.nodes.len() != self.values.len() || self.nodes.len() < MIN_NODES + 1 {
            return Err(Error::Format("nodes/values length mismatch".into()));
        }
        let grid = make_grid(self.n, self.r_max, self.nodes.len() - 1, self.stretch)?;
        let worst = grid
            .nodes
            .iter()
            .zip(&self.nodes)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if worst > 1e-12 * self.r_max {
            return Err(Error::Format(format!("stored nodes differ from the rebuilt grid by {worst:e}")));
        }
        Ok(RadialField::new(Arc::new(grid), self.values))
    }

    /// Little-endian binary layout: magic, version, N, M, R, stretch, then values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * self.values.len());
        out.extend_from_slice(b"BNLS");
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&((self.nodes.len() - 1) as u64).to_le_bytes());
        out.extend_from_slice(&self.r_max.to_le_bytes());
        out.extend_from_slice(&self.stretch.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("truncated or malformed binary field".into());
        if bytes.len() < 40 || &bytes[..4] != b"BNLS" {
            return Err(bad());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        let n = u64_at(8) as usize;
        let m = u64_at(16) as usize;
        let r_max = f64_at(24);
        let stretch = f64_at(32);
        if bytes.len() != 40 + 8 * (m + 1) {
            return Err(bad());
        }
        let values = (0..=m).map(|i| f64_at(40 + 8 * i)).collect();
        let grid = make_grid(n, r_max, m, stretch)?;
        Ok(Self {
            version,
            n,
            r_max,
            stretch,
            nodes: grid.nodes,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gamma_half;

    fn grid(m: usize) -> Arc<RadialGrid> {
        Arc::new(make_grid(5, 12.0, m, 2.0).unwrap())
    }

    #[test]
    fn ball_volume() {
        for &(n, s) in &[(5, 2.0), (7, 1.0), (9, 1.5)] {
            let g = make_grid(n, 3.0, 400, s).unwrap();
            let vol: f64 = g.weights().iter().sum();
            let exact = sphere_area(n) * 3f64.powi(n as i32) / n as f64;
            assert!(((vol - exact) / exact).abs() < 1e-10, "N={n} σ={s}: {vol} vs {exact}");
        }
    }

    #[test]
    fn weights_nonnegative_and_origin_once() {
        let g = grid(100);
        assert!(g.weights().iter().all(|&w| w >= 0.0));
        assert_eq!(g.nodes()[0], 0.0);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(make_grid(4, 1.0, 100, 2.0).is_err());
        assert!(make_grid(5, 1.0, 10, 2.0).is_err());
        assert!(make_grid(5, -1.0, 100, 2.0).is_err());
    }

    #[test]
    fn gaussian_integral() {
        let g = grid(800);
        let v = g.integrate(|r| (-r * r).exp());
        let exact = std::f64::consts::PI.powf(2.5);
        assert!(((v - exact) / exact).abs() < 1e-8);
        // ∫ e^{-r²} r^{N-1} dr = Γ(N/2)/2
        assert!((v / g.sphere_area() - gamma_half(5) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn quadrature_order_at_least_four() {
        // Integrand with a nonzero value at R so that the end correction matters.
        let f = |r: f64| (1.0 + (3.0 * r).sin()) / (1.0 + r * r);
        let fine = grid(12800).integrate(f);
        let e1 = (grid(100).integrate(f) - fine).abs();
        let e2 = (grid(200).integrate(f) - fine).abs();
        assert!(e1 / e2 >= 16.0, "errors {e1:e} {e2:e}");
    }

    #[test]
    fn laplacian_of_r_squared() {
        let g = grid(400);
        let u = g.sample(|r| r * r);
        let l = u.laplacian();
        // r² does not vanish at R, so the odd ghost extension spoils the last two rows.
        for i in 0..g.intervals() - 2 {
            assert!((l.values()[i] - 10.0).abs() < 1e-7, "i={i} {}", l.values()[i]);
        }
    }

    #[test]
    fn laplacian_of_gaussian() {
        let mut errs = vec![];
        for m in [200, 400] {
            let g = grid(m);
            let u = g.sample(|r| (-r * r / 2.0).exp());
            let l = u.laplacian();
            let e = g
                .nodes()
                .iter()
                .zip(l.values())
                .take(m)
                .map(|(&r, v)| (v - (r * r - 5.0) * (-r * r / 2.0).exp()).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!(errs[1] < 1e-4);
        assert!(errs[0] / errs[1] > 3.5, "{errs:?}");
    }

    #[test]
    fn bilaplacian_is_composition() {
        let g = grid(128);
        let u = g.sample(|r| (-r * r).exp());
        let a = u.bilaplacian();
        let lap = g.lap_operator();
        let b = lap.matvec(&lap.matvec(u.values()));
        assert_eq!(a.values(), &b[..]);
    }

    #[test]
    fn gaussian_norms_match_closed_forms() {
        let g = grid(1600);
        let u = g.sample(|r| (-r * r / 2.0).exp());
        let pi = std::f64::consts::PI;
        // mass = π^{N/2}, ‖∇u‖² = (N/2)π^{N/2}, ‖Δu‖² = N(N+2)/4 π^{N/2}
        let m = pi.powf(2.5);
        assert!((u.mass() / m - 1.0).abs() < 1e-8);
        assert!((u.grad_seminorm_sq() / (2.5 * m) - 1.0).abs() < 1e-7);
        assert!((u.lap_seminorm_sq() / (35.0 / 4.0 * m) - 1.0).abs() < 1e-7);
        assert_eq!(RadialField::zeros(g.clone()).mass(), 0.0);
    }

    #[test]
    fn laplacian_is_symmetric_on_interior_fields() {
        let g = grid(800);
        let bump = |c: f64| move |r: f64| {
            let t = (r - c) / 1.5;
            if t.abs() < 1.0 { (1.0 - t * t).powi(4) } else { 0.0 }
        };
        let u = g.sample(bump(4.0));
        let v = g.sample(bump(5.0));
        let a = u.laplacian().inner(&v);
        let b = u.inner(&v.laplacian());
        assert!(((a - b) / a.abs()).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn rescale_identity_and_mass() {
        let g = grid(1000);
        let u = g.sample(|r| (-r * r / 2.0).exp());
        let same = u.rescale(0.0);
        for (a, b) in same.values().iter().zip(u.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        let v = u.rescale(0.5);
        assert!((v.mass() / u.mass() - 1.0).abs() < 1e-7);
        let ratio = v.lap_seminorm_sq() / u.lap_seminorm_sq();
        assert!((ratio / (2.0f64).exp() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn interpolation_inequality_on_samples() {
        let g = grid(1000);
        for w in [0.5, 1.0, 2.0] {
            let u = g.sample(|r| (1.0 + r) * (-r * r / (w * w)).exp());
            let lhs = u.grad_seminorm_sq();
            let rhs = (u.lap_seminorm_sq() * u.mass()).sqrt();
            assert!(lhs <= rhs * (1.0 + 1e-6));
        }
    }

    #[test]
    fn field_roundtrip() {
        let g = grid(100);
        let u = g.sample(|r| (-r).exp());
        let data = u.to_data();
        let json = serde_json::to_string(&data).unwrap();
        let back: RadialFieldData = serde_json::from_str(&json).unwrap();
        let f = back.clone().into_field().unwrap();
        assert_eq!(f.values(), u.values());
        let bin = RadialFieldData::from_bytes(&data.to_bytes()).unwrap();
        assert_eq!(bin, data);
    }

    #[test]
    fn tie_reproduces_even_quadratics() {
        let g = grid(100);
        let u = g.sample(|r| 3.0 - 2.0 * r * r + 0.5 * r.powi(4)).admissible();
        assert!((u.values()[0] - 3.0).abs() < 1e-12);
    }
}
