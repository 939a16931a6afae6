//! Energy, Pohozaev functional, gradient and the closed-form fiber map.

use serde::{Deserialize, Serialize};

use crate::constants::ProblemParams;
use crate::error::{Error, Result};
use crate::grid::RadialField;

/// The four integrals that determine the energy along a fiber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberCoefficients {
    /// `‖Δu‖²`
    pub a: f64,
    /// `‖∇u‖²`
    pub b: f64,
    /// `‖u‖_p^p`
    pub d: f64,
    /// `‖u‖_{4*}^{4*}`
    pub e: f64,
}

pub fn fiber_coefficients(u: &RadialField, params: &ProblemParams) -> FiberCoefficients {
    FiberCoefficients {
        a: u.lap_seminorm_sq(),
        b: u.grad_seminorm_sq(),
        d: u.norm_pow(params.p),
        e: u.norm_pow(params.four_star()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub lap_term: f64,
    pub grad_term: f64,
    pub p_term: f64,
    pub crit_term: f64,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub lambda_est: f64,
    pub mass: f64,
}

pub fn energy_from(fc: &FiberCoefficients, mass: f64, params: &ProblemParams) -> EnergyBreakdown {
    let beta = params.beta();
    let lap_term = 0.5 * fc.a;
    let grad_term = 0.5 * beta * fc.b;
    let p_term = params.mu / params.p * fc.d;
    let crit_term = fc.e / params.four_star();
    EnergyBreakdown {
        lap_term,
        grad_term,
        p_term,
        crit_term,
        i: lap_term + grad_term - p_term - crit_term,
        p: pohozaev_from(fc, params),
        lambda_est: (fc.a + beta * fc.b - params.mu * fc.d - fc.e) / params.c,
        mass,
    }
}

pub fn energy(u: &RadialField, params: &ProblemParams) -> EnergyBreakdown {
    energy_from(&fiber_coefficients(u, params), u.mass(), params)
}

/// `P = ‖Δu‖² + ½‖∇u‖² − μγ_p‖u‖_p^p − ‖u‖_{4*}^{4*}`; the gradient term follows the toggle.
pub fn pohozaev_from(fc: &FiberCoefficients, params: &ProblemParams) -> f64 {
    fc.a + 0.5 * params.beta() * fc.b - params.mu * params.gamma_p() * fc.d - fc.e
}

pub fn pohozaev(u: &RadialField, params: &ProblemParams) -> f64 {
    pohozaev_from(&fiber_coefficients(u, params), params)
}

/// Fiber exponents `k` such that each term of `Ĩ(s)` scales like `e^{ks}`.
fn exponents(params: &ProblemParams) -> [f64; 4] {
    [4.0, 2.0, 2.0 * params.p * params.gamma_p(), 2.0 * params.four_star()]
}

/// Gradient of `I(𝓗(u, s))` with respect to the free nodal values of `u`,
/// scaling each term by its fiber factor `e^{ks}`. At `s = 0` this is the plain gradient.
pub fn free_gradient_at(u: &RadialField, params: &ProblemParams, s: f64) -> Vec<f64> {
    let grid = u.grid();
    let k = exponents(params);
    let x = u.free();
    let w = grid.free_weights();
    let la = grid.lap_normal_apply(&x);
    let gb = grid.grad_normal_apply(&x);
    let (fa, fb, fd, fe) = (
        (k[0] * s).exp(),
        params.beta() * (k[1] * s).exp(),
        params.mu * (k[2] * s).exp(),
        (k[3] * s).exp(),
    );
    let (p, fs) = (params.p, params.four_star());
    (0..x.len())
        .map(|i| {
            let v = x[i];
            fa * la[i] + fb * gb[i]
                - w[i] * (fd * v.abs().powf(p - 2.0) * v + fe * v.abs().powf(fs - 2.0) * v)
        })
        .collect()
}

/// Euclidean gradient of `I` in the free nodal values.
///
/// Uses the admissible projection of `u` (origin tie, `u(R) = 0`).
pub fn free_gradient(u: &RadialField, params: &ProblemParams) -> Vec<f64> {
    free_gradient_at(u, params, 0.0)
}

/// L²-gradient of `I` on the admissible space: `g_i = (∂I/∂u_i)/w_i`.
pub fn euler_gradient(u: &RadialField, params: &ProblemParams) -> RadialField {
    let grid = u.grid();
    let mut g = free_gradient(u, params);
    g.iter_mut().zip(grid.free_weights()).for_each(|(v, w)| *v /= w);
    RadialField::from_free(grid.clone(), &g)
}

/// `Ĩ(s) = e^{4s}a/2 + e^{2s}b/2 − μe^{2pγs}d/p − e^{2·4*s}e/4*`.
pub fn fiber_energy(fc: &FiberCoefficients, s: f64, params: &ProblemParams) -> f64 {
    let k = exponents(params);
    0.5 * (k[0] * s).exp() * fc.a + 0.5 * params.beta() * (k[1] * s).exp() * fc.b
        - params.mu / params.p * (k[2] * s).exp() * fc.d
        - (k[3] * s).exp() * fc.e / params.four_star()
}

/// `∂_s Ĩ(s) = 2e^{4s}a + e^{2s}b − 2μγe^{2pγs}d − 2e^{2·4*s}e`.
pub fn fiber_derivative(fc: &FiberCoefficients, s: f64, params: &ProblemParams) -> f64 {
    let k = exponents(params);
    2.0 * (k[0] * s).exp() * fc.a + params.beta() * (k[1] * s).exp() * fc.b
        - 2.0 * params.mu * params.gamma_p() * (k[2] * s).exp() * fc.d
        - 2.0 * (k[3] * s).exp() * fc.e
}

/// `∂_s Ĩ(s)` divided by its largest term; same sign, never overflows.
fn scaled_derivative(fc: &FiberCoefficients, s: f64, params: &ProblemParams) -> f64 {
    let k = exponents(params);
    let coef = [
        2.0 * fc.a,
        params.beta() * fc.b,
        -2.0 * params.mu * params.gamma_p() * fc.d,
        -2.0 * fc.e,
    ];
    let logs: Vec<(f64, f64)> = coef
        .iter()
        .zip(k)
        .filter(|(c, _)| **c != 0.0)
        .map(|(c, k)| (c.signum(), c.abs().ln() + k * s))
        .collect();
    let top = logs.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    logs.iter().map(|(sg, l)| sg * (l - top).exp()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PohozaevProjection {
    /// Unique zero `s_u` of `∂_s Ĩ`.
    pub s: f64,
    /// `Ĩ(s_u)`.
    pub value: f64,
    /// Final bracket on which exactly one sign change was found.
    pub bracket: (f64, f64),
    pub sign_changes: usize,
}

pub const FIBER_BRACKET_START: f64 = 5.0;
pub const FIBER_BRACKET_CAP: f64 = 50.0;
const FIBER_SCAN: usize = 400;

/// Locates the maximum of the fiber map from its four coefficients.
pub fn project_pohozaev_from(fc: &FiberCoefficients, params: &ProblemParams) -> Result<PohozaevProjection> {
    if params.p * params.gamma_p() <= 2.0 {
        return Err(Error::Regime(format!(
            "fiber projection needs p > 2 + 8/N, got p = {} for N = {}",
            params.p, params.n
        )));
    }
    if !(fc.e > 0.0) || ![fc.a, fc.b, fc.d, fc.e].iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("field is zero or not finite".into()));
    }
    let f = |s: f64| scaled_derivative(fc, s, params);
    let mut half = FIBER_BRACKET_START;
    while !(f(-half) > 0.0 && f(half) < 0.0) {
        if half >= FIBER_BRACKET_CAP {
            return Err(Error::Bracket(format!(
                "fiber derivative has no sign change on [-{FIBER_BRACKET_CAP}, {FIBER_BRACKET_CAP}]"
            )));
        }
        half = (2.0 * half).min(FIBER_BRACKET_CAP);
    }
    let (lo, hi) = (-half, half);
    let mut changes = 0;
    let mut prev = f(lo);
    for i in 1..=FIBER_SCAN {
        let v = f(lo + (hi - lo) * i as f64 / FIBER_SCAN as f64);
        if v != 0.0 && prev != 0.0 && v.signum() != prev.signum() {
            changes += 1;
        }
        if v != 0.0 {
            prev = v;
        }
    }
    if changes != 1 {
        return Err(Error::FiberNotUnique { changes, lo, hi });
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > 1e-12 {
        let m = 0.5 * (a + b);
        if f(m) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    let s = 0.5 * (a + b);
    Ok(PohozaevProjection { s, value: fiber_energy(fc, s, params), bracket: (lo, hi), sign_changes: changes })
}

pub fn project_pohozaev(u: &RadialField, params: &ProblemParams) -> Result<PohozaevProjection> {
    project_pohozaev_from(&fiber_coefficients(u, params), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use std::sync::Arc;

    fn gaussian(m: usize, w: f64) -> RadialField {
        let g = Arc::new(make_grid(5, 20.0, m, 2.0).unwrap());
        g.sample(|r| (-r * r / (2.0 * w * w)).exp()).admissible()
    }

    #[test]
    fn zero_field() {
        let u = gaussian(200, 1.0).scaled(0.0);
        let p = ProblemParams::new(5, 3.0, 1.0, 1.0);
        let e = energy(&u, &p);
        assert_eq!((e.i, e.p, e.lap_term, e.crit_term), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(pohozaev(&u, &p), 0.0);
    }

    #[test]
    fn breakdown_sums() {
        let u = gaussian(400, 1.2);
        let p = ProblemParams::new(5, 3.0, 2.0, u.mass());
        let e = energy(&u, &p);
        assert_eq!(e.i, e.lap_term + e.grad_term - e.p_term - e.crit_term);
        let fc = fiber_coefficients(&u, &p);
        // λc + μd + e = a + b
        assert!((e.lambda_est * p.c + p.mu * fc.d + fc.e - fc.a - fc.b).abs() < 1e-12 * (fc.a + fc.b));
        let q = ProblemParams { include_gradient_term: false, ..p };
        let e0 = energy(&u, &q);
        assert_eq!(e0.grad_term, 0.0);
        assert!((e0.p - (fc.a - p.mu * p.gamma_p() * fc.d - fc.e)).abs() < 1e-12);
    }

    #[test]
    fn pohozaev_is_half_fiber_derivative() {
        let u = gaussian(400, 0.8);
        let p = ProblemParams::new(5, 5.0, 3.0, u.mass());
        let fc = fiber_coefficients(&u, &p);
        assert!((pohozaev(&u, &p) - 0.5 * fiber_derivative(&fc, 0.0, &p)).abs() < 1e-12 * fc.a);
        assert!((fiber_energy(&fc, 0.0, &p) - energy(&u, &p).i).abs() < 1e-12 * fc.a);
    }

    #[test]
    fn fiber_derivative_matches_difference() {
        let fc = FiberCoefficients { a: 3.0, b: 1.5, d: 0.7, e: 0.2 };
        let p = ProblemParams::new(5, 5.0, 2.0, 1.0);
        for s in [-1.0, 0.0, 0.3] {
            let h = 1e-5;
            let fd = (fiber_energy(&fc, s + h, &p) - fiber_energy(&fc, s - h, &p)) / (2.0 * h);
            assert!((fd - fiber_derivative(&fc, s, &p)).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn fiber_vanishes_at_minus_infinity() {
        let fc = FiberCoefficients { a: 3.0, b: 1.5, d: 0.7, e: 0.2 };
        let p = ProblemParams::new(5, 5.0, 2.0, 1.0);
        let v = fiber_energy(&fc, -20.0, &p);
        assert!(v > 0.0 && v < 1e-15);
    }

    #[test]
    fn projection_lands_on_manifold() {
        let fc = FiberCoefficients { a: 3.0, b: 1.5, d: 0.7, e: 0.2 };
        let p = ProblemParams::new(5, 5.0, 10.0, 1.0);
        let pr = project_pohozaev_from(&fc, &p).unwrap();
        assert!(fiber_derivative(&fc, pr.s, &p).abs() < 1e-9 * fc.a);
        assert!(pr.value > 0.0);
        for ds in [0.1, 1.0] {
            assert!(fiber_energy(&fc, pr.s + ds, &p) < pr.value);
            assert!(fiber_energy(&fc, pr.s - ds, &p) < pr.value);
        }
    }

    #[test]
    fn projection_errors() {
        let p = ProblemParams::new(5, 2.5, 1.0, 1.0);
        let fc = FiberCoefficients { a: 1.0, b: 1.0, d: 1.0, e: 1.0 };
        assert!(matches!(project_pohozaev_from(&fc, &p), Err(Error::Regime(_))));
        let q = ProblemParams::new(5, 5.0, 1.0, 1.0);
        let zero = FiberCoefficients { a: 0.0, b: 0.0, d: 0.0, e: 0.0 };
        assert!(matches!(project_pohozaev_from(&zero, &q), Err(Error::Degenerate(_))));
        // no quadratic terms: the derivative is negative everywhere
        let far = FiberCoefficients { a: 0.0, b: 0.0, d: 1.0, e: 1.0 };
        assert!(matches!(project_pohozaev_from(&far, &q), Err(Error::Bracket(_))));
    }

    #[test]
    fn nonpositive_energy_means_negative_shift() {
        // I(u) ≤ 0 forces s_u < 0 and P(u) < 0
        let fc = FiberCoefficients { a: 1.0, b: 0.5, d: 4.0, e: 1.0 };
        let p = ProblemParams::new(5, 5.0, 1.0, 1.0);
        assert!(fiber_energy(&fc, 0.0, &p) <= 0.0);
        let pr = project_pohozaev_from(&fc, &p).unwrap();
        assert!(pr.s < 0.0 && pohozaev_from(&fc, &p) < 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let u = gaussian(300, 1.0);
        let p = ProblemParams::new(5, 3.0, 1.5, 1.0);
        let grid = u.grid().clone();
        let v = grid.sample(|r| (1.0 + r) * (-r * r / 3.0).exp() * (2.0 * r).cos()).admissible();
        let g = euler_gradient(&u, &p);
        let lhs = g.inner(&v);
        let h = 1e-4;
        let ip = energy(&u.axpy(h, &v), &p).i;
        let im = energy(&u.axpy(-h, &v), &p).i;
        let fd = (ip - im) / (2.0 * h);
        assert!(((lhs - fd) / fd).abs() < 1e-6, "{lhs} vs {fd}");
    }
}
