//! Gauss–Legendre rules and a composite integrator with panel doubling.

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Composite Gauss–Legendre integral of `f` over [a, b] with `panels` equal panels.
pub fn composite<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panels: usize, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let mid = a + (k as f64 + 0.5) * h;
        let s: f64 = rule
            .0
            .iter()
            .zip(&rule.1)
            .map(|(x, w)| w * f(mid + 0.5 * h * x))
            .sum();
        total += 0.5 * h * s;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct QuadSettings {
    /// Points per panel.
    pub order: usize,
    pub initial_panels: usize,
    pub max_panels: usize,
    /// Relative agreement required between two successive panel doublings.
    pub rel_tol: f64,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self {
            order: 16,
            initial_panels: 4,
            max_panels: 1 << 14,
            rel_tol: 1e-12,
        }
    }
}

/// Doubles the panel count until two levels agree; returns `(value, panels)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, q: &QuadSettings) -> Result<(f64, usize)> {
    let rule = gauss_legendre(q.order);
    let mut panels = q.initial_panels.max(1);
    let mut prev = composite(&f, a, b, panels, &rule);
    while panels < q.max_panels {
        panels *= 2;
        let cur = composite(&f, a, b, panels, &rule);
        if !cur.is_finite() {
            return Err(Error::Quadrature(format!("non-finite value with {panels} panels")));
        }
        if (cur - prev).abs() <= q.rel_tol * cur.abs().max(f64::MIN_POSITIVE) {
            return Ok((cur, panels));
        }
        prev = cur;
    }
    Err(Error::Quadrature(format!(
        "no agreement to {:e} after {} panels",
        q.rel_tol, panels
    )))
}

/// Γ(k/2) for a positive integer `k`.
pub fn gamma_half(k: usize) -> f64 {
    assert!(k >= 1);
    if k % 2 == 0 {
        (1..k / 2).map(|j| j as f64).product()
    } else {
        // Γ(1/2) = √π, Γ(x+1) = xΓ(x)
        let mut g = std::f64::consts::PI.sqrt();
        let mut x = 0.5;
        while x < k as f64 / 2.0 - 0.25 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

/// Surface area of the unit sphere in ℝ^n.
pub fn sphere_area(n: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / gamma_half(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gl_integrates_polynomials_exactly() {
        let rule = gauss_legendre(5);
        let v = composite(&|x: f64| x.powi(9) + x.powi(8), -1.0, 1.0, 1, &rule);
        assert!((v - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn half_integer_gamma() {
        assert!((gamma_half(1) - std::f64::consts::PI.sqrt()).abs() < 1e-15);
        assert!((gamma_half(5) - 1.329_340_388_179_137).abs() < 1e-14);
        assert_eq!(gamma_half(10), 24.0);
        assert!((sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-13);
    }

    #[test]
    fn integrate_reports_failure() {
        let q = QuadSettings { max_panels: 8, rel_tol: 1e-300, ..Default::default() };
        assert!(integrate(|x: f64| x.sqrt(), 0.0, 1.0, &q).is_err());
    }
}
