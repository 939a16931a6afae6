//! Truncated bubbles `u_ε = ψ U_ε` and the asymptotics of their norms.
//!
//! `U_ε(r) = D_N ε^{(N−4)/2} (ε² + r²)^{−(N−4)/2}` is the extremal of the
//! second-order Sobolev inequality, and `ψ` is a radial cutoff equal to 1 on
//! `[0, inner]` and 0 beyond `outer`. Norms are integrated from closed-form
//! values of `u`, `u'` and `Δu`, either by adaptive Gauss–Legendre or on a
//! radial grid.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{bubble_prefactor, four_star, sobolev_constant, ProblemParams};
use crate::error::{Error, Result};
use crate::functional::{fiber_energy, project_pohozaev_from, FiberCoefficients};
use crate::grid::{RadialField, RadialGrid};
use crate::quadrature::{integrate, sphere_area, QuadSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffProfile {
    /// `1 − (10t³ − 15t⁴ + 6t⁵)` on the transition, C² at both ends.
    #[default]
    QuinticSmoothstep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleSpec {
    pub epsilon: f64,
    pub inner: f64,
    pub outer: f64,
    pub smoothness: CutoffProfile,
}

impl BubbleSpec {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, inner: 1.0, outer: 2.0, smoothness: CutoffProfile::QuinticSmoothstep }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParams(format!("epsilon = {} must be positive", self.epsilon)));
        }
        if !(0.0 < self.inner && self.inner < self.outer && self.outer.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "cutoff radii must satisfy 0 < inner < outer, got {} and {}",
                self.inner, self.outer
            )));
        }
        Ok(())
    }

    /// `(ψ, ψ', ψ'')` at `r`.
    pub fn cutoff(&self, r: f64) -> (f64, f64, f64) {
        if r <= self.inner {
            return (1.0, 0.0, 0.0);
        }
        if r >= self.outer {
            return (0.0, 0.0, 0.0);
        }
        let w = self.outer - self.inner;
        let t = (r - self.inner) / w;
        match self.smoothness {
            CutoffProfile::QuinticSmoothstep => {
                let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
                let ds = 30.0 * t * t * (1.0 - t) * (1.0 - t);
                let dds = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
                (1.0 - s, -ds / w, -dds / (w * w))
            }
        }
    }

    /// `(u_ε, u_ε', Δu_ε)` at `r` in dimension `n`.
    pub fn values(&self, n: usize, r: f64) -> (f64, f64, f64) {
        let nf = n as f64;
        let eps = self.epsilon;
        let d = bubble_prefactor(n);
        let q = eps * eps + r * r;
        let amp = d * eps.powf((nf - 4.0) / 2.0);
        let u = amp * q.powf(-(nf - 4.0) / 2.0);
        let du = amp * (4.0 - nf) * r * q.powf(-(nf - 2.0) / 2.0);
        let lap = amp * (4.0 - nf) * (nf * q.powf(-(nf - 2.0) / 2.0) - (nf - 2.0) * r * r * q.powf(-nf / 2.0));
        let (p0, p1, p2) = self.cutoff(r);
        let lap_psi = if r > 0.0 { p2 + (nf - 1.0) / r * p1 } else { 0.0 };
        (p0 * u, p1 * u + p0 * du, p0 * lap + u * lap_psi + 2.0 * p1 * du)
    }
}

/// Nodes of `grid` inside `r ≤ ε`.
pub fn core_nodes(spec: &BubbleSpec, grid: &RadialGrid) -> usize {
    grid.nodes().iter().filter(|&&r| r <= spec.epsilon).count()
}

pub const MIN_CORE_NODES: usize = 16;

/// Samples `u_ε` on the grid; warns when fewer than [`MIN_CORE_NODES`] nodes resolve the core.
pub fn bubble_field(spec: &BubbleSpec, grid: &Arc<RadialGrid>) -> Result<RadialField> {
    spec.validate()?;
    if spec.outer > grid.radius() {
        return Err(Error::InvalidParams(format!(
            "cutoff radius {} exceeds grid radius {}",
            spec.outer,
            grid.radius()
        )));
    }
    let k = core_nodes(spec, grid);
    if k < MIN_CORE_NODES {
        log::warn!("bubble with epsilon = {} has only {k} nodes in its core; refine the grid", spec.epsilon);
    }
    let n = grid.dim();
    Ok(grid.sample(|r| spec.values(n, r).0))
}

/// The five integrals of `u_ε` that the asymptotic estimates are about.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleNorms {
    pub epsilon: f64,
    pub mass: f64,
    /// `‖Δu_ε‖²`
    pub lap: f64,
    /// `‖∇u_ε‖²`
    pub grad: f64,
    /// `‖u_ε‖_{4*}^{4*}`
    pub crit: f64,
    /// `‖u_ε‖_p^p`
    pub p_norm: f64,
}

impl BubbleNorms {
    pub fn fiber(&self) -> FiberCoefficients {
        FiberCoefficients { a: self.lap, b: self.grad, d: self.p_norm, e: self.crit }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NormMethod {
    /// Adaptive Gauss–Legendre with breakpoints at `ε`, `10ε`, `inner`, `outer`.
    Quadrature(QuadSettings),
    /// Grid weights applied to exact nodal values.
    #[serde(skip)]
    Grid(Arc<RadialGrid>),
}

impl Default for NormMethod {
    fn default() -> Self {
        Self::Quadrature(QuadSettings::default())
    }
}

pub fn bubble_norms(spec: &BubbleSpec, n: usize, p: f64, method: &NormMethod) -> Result<BubbleNorms> {
    spec.validate()?;
    let fs = four_star(n);
    let mut out = BubbleNorms { epsilon: spec.epsilon, mass: 0.0, lap: 0.0, grad: 0.0, crit: 0.0, p_norm: 0.0 };
    match method {
        NormMethod::Quadrature(q) => {
            let mut cuts = vec![0.0, spec.epsilon, 10.0 * spec.epsilon, spec.inner, spec.outer];
            cuts.retain(|&x| x <= spec.inner || x == spec.outer);
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            let omega = sphere_area(n);
            let nm1 = n as i32 - 1;
            let mut acc = [0.0; 5];
            for w in cuts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let parts: [&(dyn Fn(f64) -> f64 + Sync); 5] = [
                    &|r| spec.values(n, r).0.powi(2) * r.powi(nm1),
                    &|r| spec.values(n, r).2.powi(2) * r.powi(nm1),
                    &|r| spec.values(n, r).1.powi(2) * r.powi(nm1),
                    &|r| spec.values(n, r).0.abs().powf(fs) * r.powi(nm1),
                    &|r| spec.values(n, r).0.abs().powf(p) * r.powi(nm1),
                ];
                for (k, f) in parts.iter().enumerate() {
                    acc[k] += integrate(f, a, b, q)?.0;
                }
            }
            out.mass = omega * acc[0];
            out.lap = omega * acc[1];
            out.grad = omega * acc[2];
            out.crit = omega * acc[3];
            out.p_norm = omega * acc[4];
        }
        NormMethod::Grid(g) => {
            if g.dim() != n {
                return Err(Error::InvalidParams(format!("grid dimension {} differs from N = {n}", g.dim())));
            }
            if spec.outer > g.radius() {
                return Err(Error::InvalidParams("cutoff radius exceeds grid radius".into()));
            }
            for (&r, &w) in g.nodes().iter().zip(g.weights()) {
                let (u, du, lap) = spec.values(n, r);
                out.mass += w * u * u;
                out.lap += w * lap * lap;
                out.grad += w * du * du;
                out.crit += w * u.abs().powf(fs);
                out.p_norm += w * u.abs().powf(p);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    LapExcess,
    GradNorm,
    CritExcess,
    PNorm,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::LapExcess, Quantity::GradNorm, Quantity::CritExcess, Quantity::PNorm];

    fn pick(self, b: &BubbleNorms) -> f64 {
        match self {
            Quantity::LapExcess => b.lap,
            Quantity::GradNorm => b.grad,
            Quantity::CritExcess => b.crit,
            Quantity::PNorm => b.p_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOrder {
    pub quantity: Quantity,
    /// Value the quantity tends to (or is bounded by, for `grad_norm`).
    pub limit: f64,
    pub order: f64,
    /// The estimate carries an extra `|ln ε|` factor.
    pub log_factor: bool,
    /// The estimate is an upper bound only, so no rate is asserted.
    pub bound_only: bool,
}

/// Case table of the four norm estimates. `s_pow` is `S^{N/4}`.
pub fn expected_orders(params: &ProblemParams, s_pow: f64) -> Vec<ExpectedOrder> {
    let nf = params.n as f64;
    let p = params.p;
    let (grad_order, grad_log) = match params.n {
        n if n > 8 => (4.0, false),
        8 => (4.0, true),
        _ => (nf - 4.0, false),
    };
    let pivot = nf / (nf - 4.0);
    let (p_order, p_log) = if (p - pivot).abs() <= 1e-12 * pivot {
        (nf / 2.0, true)
    } else if p > pivot {
        (nf - (nf - 4.0) * p / 2.0, false)
    } else {
        ((nf - 4.0) * p / 2.0, false)
    };
    vec![
        ExpectedOrder { quantity: Quantity::LapExcess, limit: s_pow, order: nf - 4.0, log_factor: false, bound_only: false },
        ExpectedOrder { quantity: Quantity::GradNorm, limit: 0.5 * s_pow, order: grad_order, log_factor: grad_log, bound_only: true },
        ExpectedOrder { quantity: Quantity::CritExcess, limit: s_pow, order: nf, log_factor: false, bound_only: false },
        ExpectedOrder { quantity: Quantity::PNorm, limit: 0.0, order: p_order, log_factor: p_log, bound_only: false },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticFit {
    pub quantity: Quantity,
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    /// `value − limit` (for `grad_norm`, the value itself).
    pub excess: Vec<f64>,
    pub limit: f64,
    pub fitted_order: f64,
    pub expected_order: f64,
    pub log_factor: bool,
    /// Number of leading samples used after truncation.
    pub window: usize,
    /// The excess stopped shrinking before the last sample (noise floor) and the fit was cut short.
    pub truncated: bool,
    /// +1 or −1 when the excess has one sign across the window, 0 otherwise.
    pub excess_sign: i8,
    /// Only for `grad_norm`: every value lies below `½S^{N/4}`.
    pub bound_holds: Option<bool>,
    pub pass: bool,
}

pub const ORDER_TOLERANCE: f64 = 0.15;

fn check_epsilons(eps: &[f64]) -> Result<()> {
    if eps.len() < 4 {
        return Err(Error::InvalidParams(format!("need at least 4 epsilons, got {}", eps.len())));
    }
    if eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) || eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParams("epsilons must be positive and strictly decreasing".into()));
    }
    let q = eps[1] / eps[0];
    if eps.windows(2).any(|w| ((w[1] / w[0]) / q - 1.0).abs() > 1e-9) {
        return Err(Error::InvalidParams("epsilons must form a geometric progression".into()));
    }
    Ok(())
}

/// `ε_0 q^k`, `k = 0..count`, as used on the command line (`0.2:0.025:geometric` means halving from 0.2 to 0.025).
pub fn geometric_epsilons(first: f64, last: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 || !(first > last && last > 0.0) {
        return Err(Error::InvalidParams("geometric range needs first > last > 0 and at least 2 points".into()));
    }
    let q = (last / first).powf(1.0 / (count - 1) as f64);
    Ok((0..count).map(|k| first * q.powi(k as i32)).collect())
}

/// Least-squares slope of `y` against `x`.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn fit_one(eo: &ExpectedOrder, eps: &[f64], norms: &[BubbleNorms]) -> AsymptoticFit {
    let values: Vec<f64> = norms.iter().map(|b| eo.quantity.pick(b)).collect();
    let base = if eo.bound_only { 0.0 } else { eo.limit };
    let excess: Vec<f64> = values.iter().map(|v| v - base).collect();
    // keep the leading run on which |excess| strictly shrinks
    let mut window = 1;
    while window < excess.len() && excess[window].abs() < excess[window - 1].abs() && excess[window] != 0.0 {
        window += 1;
    }
    let truncated = window < excess.len();
    let xs: Vec<f64> = eps[..window].iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = excess[..window]
        .iter()
        .zip(&eps[..window])
        .map(|(v, e)| if eo.log_factor { v.abs().ln() - e.ln().abs().ln() } else { v.abs().ln() })
        .collect();
    let fitted = if window >= 3 { slope(&xs, &ys) } else { f64::NAN };
    let w = &excess[..window];
    let excess_sign = if w.iter().all(|v| *v > 0.0) {
        1
    } else if w.iter().all(|v| *v < 0.0) {
        -1
    } else {
        0
    };
    let bound_holds = eo.bound_only.then(|| values.iter().all(|v| *v <= eo.limit));
    let pass = if eo.bound_only {
        bound_holds == Some(true)
    } else {
        fitted.is_finite() && ((fitted - eo.order) / eo.order).abs() <= ORDER_TOLERANCE
    };
    AsymptoticFit {
        quantity: eo.quantity,
        epsilons: eps.to_vec(),
        values,
        excess,
        limit: eo.limit,
        fitted_order: fitted,
        expected_order: eo.order,
        log_factor: eo.log_factor,
        window,
        truncated,
        excess_sign,
        bound_holds,
        pass,
    }
}

/// Norms of `u_ε` for every ε, computed in parallel.
pub fn norms_over(params: &ProblemParams, epsilons: &[f64], method: &NormMethod) -> Result<Vec<BubbleNorms>> {
    if let NormMethod::Grid(g) = method {
        for &e in epsilons {
            let cells = core_nodes(&BubbleSpec::new(e), g);
            if cells < 8 {
                return Err(Error::InvalidParams(format!(
                    "epsilon = {e} spans {cells} grid cells; at least 8 are needed"
                )));
            }
        }
    }
    epsilons.par_iter().map(|&e| bubble_norms(&BubbleSpec::new(e), params.n, params.p, method)).collect()
}

/// Fits the decay order of every quantity over a geometric ε sequence.
pub fn fit_orders(params: &ProblemParams, epsilons: &[f64], method: &NormMethod, quad: &QuadSettings) -> Result<Vec<AsymptoticFit>> {
    params.validate()?;
    check_epsilons(epsilons)?;
    let s_pow = sobolev_constant(params.n, quad)?.lap_integral;
    let norms = norms_over(params, epsilons, method)?;
    Ok(expected_orders(params, s_pow).iter().map(|eo| fit_one(eo, epsilons, &norms)).collect())
}

/// Rows `epsilon,value,excess` for every fit.
pub fn write_fits_csv<W: std::io::Write>(fits: &[AsymptoticFit], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["quantity", "epsilon", "value", "excess"])?;
    for f in fits {
        let q = crate::solvers::kebab(&f.quantity);
        for ((e, v), x) in f.epsilons.iter().zip(&f.values).zip(&f.excess) {
            wr.write_record([q.clone(), format!("{e:e}"), format!("{v:e}"), format!("{x:e}")])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Max of `g(s) = (e^{4s}/2)a − (e^{2·4* s}/4*)e` in closed form: `(2/N)(a / e^{2/4*})^{4*/(4*−2)}`.
pub fn g_max_closed_form(n: usize, a: f64, e: f64) -> f64 {
    let q = four_star(n);
    2.0 / n as f64 * (a / e.powf(2.0 / q)).powf(q / (q - 2.0))
}

/// The same maximum found by golden-section search on `g`.
pub fn g_max_numeric(n: usize, a: f64, e: f64) -> f64 {
    let q = four_star(n);
    let g = |s: f64| 0.5 * (4.0 * s).exp() * a - (2.0 * q * s).exp() * e / q;
    // g' = 0 lies where e^{(2q−4)s} = 2a/(2e), bracket it generously
    let s0 = (a / e).ln() / (2.0 * q - 4.0);
    let (mut lo, mut hi) = (s0 - 5.0, s0 + 5.0);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (g(x1), g(x2));
    for _ in 0..200 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = g(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = g(x1);
        }
    }
    g(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub epsilon: f64,
    /// `s_{v_ε}`, the fiber maximum of the mass-normalized bubble.
    pub s: f64,
    /// `e^{4s}‖∇v_ε‖² / ‖v_ε‖_p^p`.
    pub ratio: f64,
    /// `e^{2s}‖∇v_ε‖²/2 − (μ e^{2pγ_p s}/p)‖v_ε‖_p^p`.
    pub combined: f64,
    /// `max_s I(𝓗(v_ε, s))`.
    pub fiber_max: f64,
    /// `g_ε` maximum in closed form and by direct search.
    pub g_max_closed: f64,
    pub g_max_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTrend {
    pub params: ProblemParams,
    pub rows: Vec<RatioRow>,
    pub ratio_strictly_decreasing: bool,
    pub combined_negative_at_smallest: bool,
    /// Largest ε from which the combined term stays negative down to the smallest sample.
    pub epsilon0: Option<f64>,
    pub s_range: (f64, f64),
    /// `(2/N)S^{N/4}`.
    pub level_threshold: f64,
}

/// Tracks the ratio behind the mountain-pass level estimate along a sequence of bubbles.
pub fn ratio_vanishing_check(params: &ProblemParams, epsilons: &[f64], method: &NormMethod, quad: &QuadSettings) -> Result<RatioTrend> {
    params.validate()?;
    if params.p * params.gamma_p() <= 2.0 || params.p >= params.four_star() {
        return Err(Error::Regime(format!(
            "ratio check needs 2 + 8/N < p < 4*, got p = {} for N = {}",
            params.p, params.n
        )));
    }
    if epsilons.is_empty() || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParams("epsilons must be non-empty and strictly decreasing".into()));
    }
    let s_pow = sobolev_constant(params.n, quad)?.lap_integral;
    let norms = norms_over(params, epsilons, method)?;
    let (p, q, g2) = (params.p, params.four_star(), 2.0 * params.p * params.gamma_p());
    let mut rows = Vec::with_capacity(norms.len());
    for b in &norms {
        // v_ε = √c u_ε / ‖u_ε‖
        let k = params.c / b.mass;
        let fc = FiberCoefficients { a: b.lap * k, b: b.grad * k, d: b.p_norm * k.powf(p / 2.0), e: b.crit * k.powf(q / 2.0) };
        let pr = project_pohozaev_from(&fc, params)?;
        let s = pr.s;
        rows.push(RatioRow {
            epsilon: b.epsilon,
            s,
            ratio: (4.0 * s).exp() * fc.b / fc.d,
            combined: 0.5 * (2.0 * s).exp() * fc.b - params.mu / p * (g2 * s).exp() * fc.d,
            fiber_max: fiber_energy(&fc, s, params),
            g_max_closed: g_max_closed_form(params.n, fc.a, fc.e),
            g_max_numeric: g_max_numeric(params.n, fc.a, fc.e),
        });
    }
    let ratio_strictly_decreasing = rows.windows(2).all(|w| w[1].ratio < w[0].ratio);
    let combined_negative_at_smallest = rows.last().is_some_and(|r| r.combined < 0.0);
    let epsilon0 = if combined_negative_at_smallest {
        let first_neg_tail = rows.iter().rposition(|r| r.combined >= 0.0).map_or(0, |i| i + 1);
        Some(rows[first_neg_tail].epsilon)
    } else {
        None
    };
    let s_range = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.s), hi.max(r.s)));
    Ok(RatioTrend {
        params: *params,
        rows,
        ratio_strictly_decreasing,
        combined_negative_at_smallest,
        epsilon0,
        s_range,
        level_threshold: 2.0 / params.n as f64 * s_pow,
    })
}
