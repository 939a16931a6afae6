//! Constrained critical-point solvers on the mass sphere.
//!
//! Both solvers are Riemannian descent methods on `{u : ‖u‖² = c}` in the
//! free nodal values, preconditioned by the Sobolev operator
//! `H = LᵀWL + β DᵀWD + κW` (banded, factored once). Search directions are
//! H-gradients projected onto the tangent space, the retraction is plain
//! rescaling to mass `c`, and step sizes come from Barzilai–Borwein with
//! Armijo backtracking.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::constants::{r_star, c_star, k_threshold, BestConstants, MassRegime, ProblemParams};
use crate::error::{Error, Result};
use crate::functional::{
    energy, fiber_coefficients, fiber_energy, free_gradient_at, pohozaev, project_pohozaev_from,
    EnergyBreakdown,
};
use crate::grid::{RadialField, RadialGrid};
use crate::linalg::{dot, h_project, ksum, BandCholesky};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Armijo {
    /// Sufficient-decrease constant.
    pub c1: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for Armijo {
    fn default() -> Self {
        Self { c1: 1e-4, shrink: 0.5, max_backtracks: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// First trial step; later steps come from Barzilai–Borwein.
    pub step: f64,
    pub armijo: Armijo,
    /// Bound on the constrained residual in the dual Sobolev norm, relative to `‖u‖_H`.
    pub grad_tol: f64,
    /// Bound on `|P(u)| / (‖Δu‖² + ‖∇u‖²)` for the Pohozaev solver.
    pub pohozaev_tol: f64,
    pub seed: u64,
    /// Mass shift `κ` in the preconditioner.
    pub precond_shift: f64,
    /// Nominal width of the Gaussian seed; jittered by the RNG.
    pub seed_width: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            step: 1.0,
            armijo: Armijo::default(),
            grad_tol: 1e-6,
            pohozaev_tol: 1e-6,
            seed: 0,
            precond_shift: 1.0,
            seed_width: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.grad_tol > 0.0) || !(self.pohozaev_tol > 0.0) {
            return Err(Error::InvalidParams("step and tolerances must be positive".into()));
        }
        if !(self.precond_shift > 0.0) || !(self.seed_width > 0.0) {
            return Err(Error::InvalidParams("precond_shift and seed_width must be positive".into()));
        }
        if !(self.armijo.shrink > 0.0 && self.armijo.shrink < 1.0) || !(self.armijo.c1 > 0.0 && self.armijo.c1 < 1.0) {
            return Err(Error::InvalidParams("armijo parameters must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverRegime {
    SubcriticalMinimizer,
    PohozaevMountainPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    /// No seed with negative energy inside `V_r(c)` exists along the fiber.
    NoDescent,
    /// Backtracking could not keep the iterate inside `V_r(c)`.
    LeftAdmissibleSet,
    /// Line search failed before the tolerance was met.
    Stagnated,
    /// The iterate collapsed toward a bubble the grid cannot resolve.
    Concentrated,
}

/// Minimum number of nodes inside the radius carrying half of `‖Δu‖²`.
pub const MIN_CORE_NODES: usize = 16;

/// Index of the first node by which half of `‖Δu‖²` has accumulated.
pub fn core_index(u: &RadialField) -> usize {
    let lap = u.laplacian();
    let w = u.grid().weights();
    let total: f64 = lap.values().iter().zip(w).map(|(l, w)| w * l * l).sum();
    let mut acc = 0.0;
    for (i, (l, w)) in lap.values().iter().zip(w).enumerate() {
        acc += w * l * l;
        if acc >= 0.5 * total {
            return i;
        }
    }
    w.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    /// Objective before the step (`I`, or `max_s Ĩ` for the Pohozaev solver).
    pub before: f64,
    /// Objective after the accepted step.
    pub after: f64,
    /// Objective after recentring on the Pohozaev manifold (equal to `after` otherwise).
    pub recentred: f64,
    pub residual: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintChecks {
    /// `‖Δu‖² + ‖∇u‖²`.
    pub seminorm_sum: f64,
    pub r_star_sq: Option<f64>,
    pub in_vr: Option<bool>,
    pub vr_margin: Option<f64>,
    pub level: f64,
    /// `(2/N) S^{N/4}`.
    pub level_threshold: f64,
    pub below_level_threshold: bool,
    pub min_value: f64,
    pub max_value: f64,
    /// `min u ≥ −1e-8 · max u`.
    pub nonneg: bool,
    pub mass_error: f64,
    pub monotonicity_defect: f64,
    /// `|P| / (‖Δu‖² + ‖∇u‖²)`.
    pub pohozaev_rel: f64,
    /// `Ĩ(s_u) − max Ĩ(s_u ± {0.1, 1})`, positive at a strict fiber maximum.
    pub fiber_max_gap: Option<f64>,
    /// Whether the report satisfies every invariant declared for its regime.
    pub invariants_hold: bool,
}

fn ser_field<S: Serializer>(u: &RadialField, s: S) -> std::result::Result<S::Ok, S::Error> {
    u.to_data().serialize(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub schema_version: u32,
    pub regime: SolverRegime,
    pub status: SolverStatus,
    pub converged: bool,
    pub params: ProblemParams,
    pub seed: u64,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub lambda: f64,
    /// Dual-norm residual relative to `‖u‖_H`.
    pub residual: f64,
    /// Unscaled L² norm of `∇I − λu`.
    pub residual_l2: f64,
    pub iters: usize,
    pub wall_time_s: f64,
    pub energy: EnergyBreakdown,
    pub constraint_checks: ConstraintChecks,
    pub trace: Vec<TraceEntry>,
    #[serde(serialize_with = "ser_field")]
    pub u: RadialField,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Sobolev preconditioner and the inner products it induces.
struct Precond {
    grid: Arc<RadialGrid>,
    chol: BandCholesky,
    beta: f64,
    kappa: f64,
}

impl Precond {
    fn new(grid: &Arc<RadialGrid>, beta: f64, kappa: f64) -> Result<Self> {
        let mut h = grid.gram_lap().plus(grid.gram_grad(), beta);
        h.add_diag(grid.free_weights(), kappa);
        Ok(Self { grid: grid.clone(), chol: h.cholesky()?, beta, kappa })
    }

    fn solve(&self, v: &[f64]) -> Vec<f64> {
        self.chol.solve(v)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let l = self.grid.lap_normal_apply(x);
        let g = self.grid.grad_normal_apply(x);
        let w = self.grid.free_weights();
        (0..x.len()).map(|i| l[i] + self.beta * g[i] + self.kappa * w[i] * x[i]).collect()
    }

    fn norm_sq(&self, x: &[f64]) -> f64 {
        self.grid.lap_sq_free(x) + self.beta * self.grid.grad_sq_free(x) + self.kappa * wmass(self.grid.free_weights(), x)
    }
}

fn wmass(w: &[f64], x: &[f64]) -> f64 {
    ksum(w.iter().zip(x).map(|(w, v)| w * v * v))
}

fn retract(w: &[f64], x: &mut [f64], c: f64) {
    let k = (c / wmass(w, x)).sqrt();
    x.iter_mut().for_each(|v| *v *= k);
}

fn wx(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(x).map(|(a, b)| a * b).collect()
}

/// Residual `G − λWx` with `λ = xᵀG / xᵀWx`, in the dual norm and in L².
fn residuals(pre: &Precond, w: &[f64], x: &[f64], g: &[f64]) -> (f64, f64) {
    let lam = dot(x, g) / wmass(w, x);
    let r: Vec<f64> = (0..x.len()).map(|i| g[i] - lam * w[i] * x[i]).collect();
    let dual = dot(&r, &pre.solve(&r)).max(0.0).sqrt() / pre.norm_sq(x).sqrt();
    let l2 = r.iter().zip(w).map(|(r, w)| r * r / w).sum::<f64>().sqrt();
    (dual, l2)
}

/// H-gradient projected onto the tangent space of the sphere (and optionally H-orthogonal to `extra`).
fn direction(pre: &Precond, w: &[f64], x: &[f64], g: &[f64], extra: Option<Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let z = pre.solve(g);
    let wxv = wx(w, x);
    let y = pre.solve(&wxv);
    let mut ys = vec![y];
    let mut hys = vec![wxv];
    if let Some(e) = extra {
        hys.push(pre.apply(&e));
        ys.push(e);
    }
    let d = h_project(&z, &ys, &hys);
    let hd = pre.apply(&d);
    (d, hd)
}

fn gaussian_seed(grid: &Arc<RadialGrid>, width: f64, c: f64) -> Vec<f64> {
    let mut x: Vec<f64> = grid.nodes()[1..grid.intervals()]
        .iter()
        .map(|r| (-r * r / (2.0 * width * width)).exp())
        .collect();
    retract(grid.free_weights(), &mut x, c);
    x
}

fn jittered_width(cfg: &SolverConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    cfg.seed_width * (1.0 + 0.2 * (rng.gen::<f64>() - 0.5))
}

/// Seminorm sum `‖Δu‖² + ‖∇u‖²` that defines `V_r(c)`, `𝓐` and `𝓑`.
pub fn seminorm_sum(u: &RadialField) -> f64 {
    u.lap_seminorm_sq() + u.grad_seminorm_sq()
}

fn check_mass(u: &RadialField, params: &ProblemParams) -> Result<()> {
    let m = u.mass();
    if ((m - params.c) / params.c).abs() > 1e-8 {
        return Err(Error::Constraint(format!("mass {m} differs from c = {}", params.c)));
    }
    Ok(())
}

pub fn in_vr(u: &RadialField, params: &ProblemParams, consts: &BestConstants) -> Result<bool> {
    check_mass(u, params)?;
    Ok(seminorm_sum(u) < r_star(params, consts)?.powi(2))
}

pub fn in_a(u: &RadialField, params: &ProblemParams, consts: &BestConstants) -> Result<bool> {
    check_mass(u, params)?;
    Ok(seminorm_sum(u) <= k_threshold(params, consts)?)
}

pub fn in_b(u: &RadialField, params: &ProblemParams, consts: &BestConstants) -> Result<bool> {
    check_mass(u, params)?;
    let k2 = 2.0 * k_threshold(params, consts)?;
    Ok(((seminorm_sum(u) - k2) / k2).abs() <= 1e-8)
}

struct Outcome {
    x: Vec<f64>,
    status: SolverStatus,
    iters: usize,
    residual: f64,
    residual_l2: f64,
    trace: Vec<TraceEntry>,
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    grid: &Arc<RadialGrid>,
    params: &ProblemParams,
    consts: &BestConstants,
    cfg: &SolverConfig,
    regime: SolverRegime,
    out: Outcome,
    r_star_sq: Option<f64>,
    started: Instant,
) -> SolverReport {
    let u = RadialField::from_free(grid.clone(), &out.x);
    let e = energy(&u, params);
    let sn = seminorm_sum(&u);
    let thr = consts.level_threshold(params.n);
    let (mn, mx) = (u.min_value(), u.max_value());
    let fiber_max_gap = if regime == SolverRegime::PohozaevMountainPass {
        let fc = fiber_coefficients(&u, params);
        project_pohozaev_from(&fc, params).ok().map(|pr| {
            let others = [0.1, -0.1, 1.0, -1.0].map(|d| fiber_energy(&fc, pr.s + d, params));
            pr.value - others.into_iter().fold(f64::NEG_INFINITY, f64::max)
        })
    } else {
        None
    };
    let converged = out.status == SolverStatus::Converged;
    let pohozaev_rel = e.p.abs() / sn;
    let invariants_hold = converged
        && match regime {
            SolverRegime::SubcriticalMinimizer => {
                e.i < 0.0 && e.lambda_est < 0.0 && r_star_sq.is_some_and(|r2| sn < r2)
            }
            SolverRegime::PohozaevMountainPass => {
                pohozaev_rel <= cfg.pohozaev_tol && e.i > 0.0 && e.i < thr && e.lambda_est < 0.0
            }
        };
    let checks = ConstraintChecks {
        seminorm_sum: sn,
        r_star_sq,
        in_vr: r_star_sq.map(|r2| sn < r2),
        vr_margin: r_star_sq.map(|r2| r2 - sn),
        level: e.i,
        level_threshold: thr,
        below_level_threshold: e.i < thr,
        min_value: mn,
        max_value: mx,
        nonneg: mn >= -1e-8 * mx.abs(),
        mass_error: (u.mass() - params.c).abs(),
        monotonicity_defect: u.monotonicity_defect(),
        pohozaev_rel,
        fiber_max_gap,
        invariants_hold,
    };
    SolverReport {
        schema_version: REPORT_SCHEMA_VERSION,
        regime,
        status: out.status,
        converged,
        params: *params,
        seed: cfg.seed,
        i: e.i,
        p: e.p,
        lambda: e.lambda_est,
        residual: out.residual,
        residual_l2: out.residual_l2,
        iters: out.iters,
        wall_time_s: started.elapsed().as_secs_f64(),
        energy: e,
        constraint_checks: checks,
        trace: out.trace,
        u,
    }
}

/// Barzilai–Borwein step in the H-metric, clamped to a safe range.
fn bb_step(pre: &Precond, s: &[f64], dy: &[f64], fallback: f64) -> f64 {
    let num = pre.norm_sq(s);
    let den = dot(s, dy);
    let t = num / den;
    if t.is_finite() && t > 0.0 {
        t.clamp(1e-6, 1e4)
    } else {
        fallback
    }
}

/// Local minimizer of `I` on `S_r(c) ∩ V_r(c)` for `2 < p < 2 + 4/N`, `c < c*`.
pub fn minimize_subcritical(
    params: &ProblemParams,
    grid: &Arc<RadialGrid>,
    consts: &BestConstants,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    params.validate()?;
    cfg.validate()?;
    let started = Instant::now();
    let n = params.n as f64;
    if !(params.p < 2.0 + 4.0 / n) {
        return Err(Error::Regime(format!(
            "subcritical solver needs p < 2 + 4/N = {}, got p = {}",
            2.0 + 4.0 / n,
            params.p
        )));
    }
    if params.mu > 0.0 {
        let cs = c_star(params, consts)?;
        if params.c >= cs {
            return Err(Error::Regime(format!("subcritical solver needs c < c* = {cs}, got c = {}", params.c)));
        }
    }
    let r2 = r_star(params, consts)?.powi(2);
    let w = grid.free_weights().to_vec();
    let c = params.c;

    // Seed: Gaussian pushed along the fiber until it enters V_r(c) with negative energy.
    let width = jittered_width(cfg);
    let base = RadialField::from_free(grid.clone(), &gaussian_seed(grid, width, c));
    let fc = fiber_coefficients(&base, params);
    let mut s0 = 0.0;
    let ok = |s: f64| {
        (4.0 * s).exp() * fc.a + (2.0 * s).exp() * fc.b < r2 && fiber_energy(&fc, s, params) < 0.0
    };
    while !ok(s0) {
        s0 -= 0.05;
        if s0 < -20.0 {
            let out = Outcome {
                x: base.free(),
                status: SolverStatus::NoDescent,
                iters: 0,
                residual: f64::NAN,
                residual_l2: f64::NAN,
                trace: vec![],
            };
            return Ok(build_report(grid, params, consts, cfg, SolverRegime::SubcriticalMinimizer, out, Some(r2), started));
        }
    }
    // one more notch so the sampled field is safely inside
    s0 -= 0.05;
    let mut x = gaussian_seed(grid, width * (-s0).exp(), c);
    log::info!("subcritical seed: width {width:.4}, fiber shift {s0:.3}");

    let pre = Precond::new(grid, params.beta(), cfg.precond_shift)?;
    let eval = |x: &[f64]| {
        let u = RadialField::from_free(grid.clone(), x);
        let fc = fiber_coefficients(&u, params);
        (fiber_energy(&fc, 0.0, params), fc.a + fc.b)
    };
    let (mut val, sn) = eval(&x);
    if !(sn < r2 && val < 0.0) {
        return Err(Error::Infeasible(format!(
            "sampled seed is outside V_r(c) or has I >= 0 (seminorm {sn:e}, I {val:e}); increase R or M"
        )));
    }
    let mut trace = Vec::new();
    let mut tau = cfg.step;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut status = SolverStatus::MaxIterations;
    let (mut res, mut res_l2) = (f64::NAN, f64::NAN);
    let mut it = 0;
    while it < cfg.max_iters {
        let u = RadialField::from_free(grid.clone(), &x);
        let g = free_gradient_at(&u, params, 0.0);
        (res, res_l2) = residuals(&pre, &w, &x, &g);
        if res <= cfg.grad_tol {
            status = SolverStatus::Converged;
            break;
        }
        let (d, hd) = direction(&pre, &w, &x, &g, None);
        if let Some((px, phd)) = &prev {
            let s: Vec<f64> = x.iter().zip(px).map(|(a, b)| a - b).collect();
            let dy: Vec<f64> = hd.iter().zip(phd).map(|(a, b)| a - b).collect();
            tau = bb_step(&pre, &s, &dy, tau);
        }
        let slope = dot(&g, &d);
        let mut accepted = None;
        let mut escaped = 0;
        for _ in 0..cfg.armijo.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - tau * b).collect();
            retract(&w, &mut trial, c);
            let (tv, tsn) = eval(&trial);
            if tsn >= r2 {
                escaped += 1;
            } else if tv <= val - cfg.armijo.c1 * tau * slope {
                accepted = Some((trial, tv));
                break;
            }
            tau *= cfg.armijo.shrink;
        }
        match accepted {
            Some((trial, tv)) => {
                trace.push(TraceEntry { iter: it, before: val, after: tv, recentred: tv, residual: res, step: tau });
                prev = Some((x, hd));
                x = trial;
                val = tv;
            }
            None => {
                status = if escaped > cfg.armijo.max_backtracks / 2 {
                    SolverStatus::LeftAdmissibleSet
                } else {
                    SolverStatus::Stagnated
                };
                break;
            }
        }
        it += 1;
    }
    log::info!("subcritical solve: {status:?} after {it} iterations, residual {res:e}");
    let out = Outcome { x, status, iters: it, residual: res, residual_l2: res_l2, trace };
    Ok(build_report(grid, params, consts, cfg, SolverRegime::SubcriticalMinimizer, out, Some(r2), started))
}

/// Moves `x` along the dilation orbit onto the discrete Pohozaev manifold.
fn recentre(grid: &Arc<RadialGrid>, params: &ProblemParams, w: &[f64], x: &mut Vec<f64>) -> Result<f64> {
    let mut value = f64::NAN;
    for _ in 0..8 {
        let u = RadialField::from_free(grid.clone(), x);
        let pr = project_pohozaev_from(&fiber_coefficients(&u, params), params)?;
        value = pr.value;
        if pr.s.abs() < 1e-12 {
            break;
        }
        *x = if pr.s.abs() < 1e-3 {
            // first order is exact enough here and avoids interpolation noise
            let gen = u.dilation_generator().free();
            x.iter().zip(&gen).map(|(v, g)| v + pr.s * g).collect()
        } else {
            u.rescale(pr.s).free()
        };
        retract(w, x, params.c);
    }
    Ok(value)
}

/// Minimizer of `u ↦ max_s I(𝓗(u, s))` on the mass sphere for `2 + 8/N < p < 4*`.
pub fn mountain_pass_supercritical(
    params: &ProblemParams,
    grid: &Arc<RadialGrid>,
    consts: &BestConstants,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    mountain_pass_from(params, grid, consts, cfg, None)
}

/// As [`mountain_pass_supercritical`], optionally warm-started from `start`
/// (rescaled to mass `c` and projected onto the Pohozaev manifold first).
pub fn mountain_pass_from(
    params: &ProblemParams,
    grid: &Arc<RadialGrid>,
    consts: &BestConstants,
    cfg: &SolverConfig,
    start: Option<&RadialField>,
) -> Result<SolverReport> {
    params.validate()?;
    cfg.validate()?;
    let started = Instant::now();
    if params.regime() != MassRegime::Supercritical {
        return Err(Error::Regime(format!(
            "Pohozaev solver needs 2 + 8/N < p < 4*, got p = {} for N = {}",
            params.p, params.n
        )));
    }
    if params.mu <= 0.0 {
        return Err(Error::InvalidParams("Pohozaev solver needs mu > 0".into()));
    }
    let w = grid.free_weights().to_vec();
    let c = params.c;

    let mut x = match start {
        Some(u0) => {
            if !Arc::ptr_eq(u0.grid(), grid) {
                return Err(Error::InvalidParams("warm start lives on a different grid".into()));
            }
            let mut x = u0.free();
            retract(&w, &mut x, c);
            x
        }
        None => {
            // Gaussian whose width is moved to the fiber maximum analytically.
            let mut width = jittered_width(cfg);
            for _ in 0..40 {
                let u = RadialField::from_free(grid.clone(), &gaussian_seed(grid, width, c));
                let pr = project_pohozaev_from(&fiber_coefficients(&u, params), params)?;
                width *= (-pr.s).exp();
                if pr.s.abs() < 1e-10 {
                    break;
                }
            }
            gaussian_seed(grid, width, c)
        }
    };
    let mut val = recentre(grid, params, &w, &mut x)?;
    log::info!("Pohozaev seed level {val:.6}");

    let pre = Precond::new(grid, params.beta(), cfg.precond_shift)?;
    let level = |x: &[f64]| -> Result<(f64, f64)> {
        let u = RadialField::from_free(grid.clone(), x);
        let pr = project_pohozaev_from(&fiber_coefficients(&u, params), params)?;
        Ok((pr.value, pr.s))
    };
    let mut trace = Vec::new();
    let mut tau = cfg.step;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut status = SolverStatus::MaxIterations;
    let (mut res, mut res_l2) = (f64::NAN, f64::NAN);
    let mut it = 0;
    while it < cfg.max_iters {
        let u = RadialField::from_free(grid.clone(), &x);
        let (_, s) = level(&x)?;
        let g = free_gradient_at(&u, params, s);
        (res, res_l2) = residuals(&pre, &w, &x, &g);
        let prel = pohozaev(&u, params).abs() / seminorm_sum(&u);
        if res <= cfg.grad_tol && prel <= cfg.pohozaev_tol {
            status = SolverStatus::Converged;
            break;
        }
        if core_index(&u) < MIN_CORE_NODES {
            // Below this scale the discrete Sobolev quotient drops under the continuum one
            // and the level can fall below (2/N)S^{N/4} for purely numerical reasons.
            status = SolverStatus::Concentrated;
            break;
        }
        let gen = u.dilation_generator().free();
        let (d, hd) = direction(&pre, &w, &x, &g, Some(gen));
        if let Some((px, phd)) = &prev {
            let sv: Vec<f64> = x.iter().zip(px).map(|(a, b)| a - b).collect();
            let dy: Vec<f64> = hd.iter().zip(phd).map(|(a, b)| a - b).collect();
            tau = bb_step(&pre, &sv, &dy, tau);
        }
        let slope = dot(&g, &d);
        let mut accepted = None;
        for _ in 0..cfg.armijo.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - tau * b).collect();
            retract(&w, &mut trial, c);
            if let Ok((tv, _)) = level(&trial) {
                if tv <= val - cfg.armijo.c1 * tau * slope {
                    accepted = Some((trial, tv));
                    break;
                }
            }
            tau *= cfg.armijo.shrink;
        }
        match accepted {
            Some((mut trial, tv)) => {
                let rv = recentre(grid, params, &w, &mut trial)?;
                trace.push(TraceEntry { iter: it, before: val, after: tv, recentred: rv, residual: res, step: tau });
                prev = Some((x, hd));
                x = trial;
                val = rv;
            }
            None => {
                // The line search can fail at the round-off floor; one more recentring
                // settles the Pohozaev residual before giving up.
                recentre(grid, params, &w, &mut x)?;
                let u = RadialField::from_free(grid.clone(), &x);
                let (_, s) = level(&x)?;
                let g = free_gradient_at(&u, params, s);
                (res, res_l2) = residuals(&pre, &w, &x, &g);
                let prel = pohozaev(&u, params).abs() / seminorm_sum(&u);
                status = if res <= cfg.grad_tol && prel <= cfg.pohozaev_tol {
                    SolverStatus::Converged
                } else {
                    SolverStatus::Stagnated
                };
                break;
            }
        }
        it += 1;
    }
    log::info!("Pohozaev solve: {status:?} after {it} iterations, residual {res:e}");
    let out = Outcome { x, status, iters: it, residual: res, residual_l2: res_l2, trace };
    Ok(build_report(grid, params, consts, cfg, SolverRegime::PohozaevMountainPass, out, None, started))
}

/// Settings for the multiplicity family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySettings {
    /// Quasi-random points per coefficient sphere.
    pub samples: usize,
    /// Minimum nodes across each bump.
    pub min_bump_nodes: usize,
    /// Minimum empty nodes between neighbouring bumps.
    pub min_gap_nodes: usize,
    /// Decrement of the common dilation parameter while searching for feasibility.
    pub ds: f64,
}

impl Default for FamilySettings {
    fn default() -> Self {
        Self { samples: 10_000, min_bump_nodes: 16, min_gap_nodes: 5, ds: 0.01 }
    }
}

/// One level `k ≤ m` of the nested family (the first `k` bumps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyLevel {
    pub k: usize,
    pub samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub omega_range: (f64, f64),
    pub mu: f64,
    /// `max I` over the sampled combinations at `μ = 2μ_k`.
    pub sup_i_at_twice_mu: f64,
    /// Largest `|mass − c|` over the sampled combinations.
    pub max_mass_error: f64,
    /// Largest `‖Δv‖² + ‖∇v‖²` over the sampled combinations.
    pub max_seminorm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplicityFamily {
    pub m: usize,
    pub params: ProblemParams,
    /// Common dilation parameter (the bumps are the reference layout stretched by `e^{−s}`).
    pub s: f64,
    pub r_star_sq: f64,
    /// `(first, last)` node index of every bump support.
    pub supports: Vec<(usize, usize)>,
    /// `‖Δv_i‖² + ‖∇v_i‖²` per bump.
    pub omegas: Vec<f64>,
    pub alpha_m: f64,
    pub beta_m: f64,
    pub mu_m: f64,
    pub sup_i_on_tm: f64,
    pub levels: Vec<FamilyLevel>,
    #[serde(skip)]
    pub bumps: Vec<RadialField>,
}

fn bump_profile(r: f64, centre: f64, half: f64) -> f64 {
    let t = (r - centre) / half;
    if t.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - t * t).powi(4)
    }
}

/// Reference annulus `i` at unit scale: centre `2 + 3i`, half-width 1, so neighbours are separated by a gap of 1.
fn bumps_at_scale(grid: &Arc<RadialGrid>, m: usize, scale: f64, c: f64) -> Vec<RadialField> {
    (0..m)
        .map(|i| {
            let centre = scale * (2.0 + 3.0 * i as f64);
            let f = grid.sample(|r| bump_profile(r, centre, scale));
            let k = (c / f.mass()).sqrt();
            f.scaled(k)
        })
        .collect()
}

fn support_of(u: &RadialField) -> (usize, usize) {
    let v = u.values();
    let first = v.iter().position(|x| *x != 0.0).unwrap_or(0);
    let last = v.iter().rposition(|x| *x != 0.0).unwrap_or(0);
    (first, last)
}

/// Deterministic quasi-random points on the unit sphere of `ℝ^k` (Halton + Box–Muller).
pub fn sphere_points(k: usize, count: usize) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    let pairs = k.div_ceil(2);
    assert!(2 * pairs <= PRIMES.len(), "sphere_points supports k <= 12");
    let radical = |mut i: u64, b: u64| {
        let (mut f, mut r) = (1.0, 0.0);
        while i > 0 {
            f /= b as f64;
            r += f * (i % b) as f64;
            i /= b;
        }
        r
    };
    (1..=count as u64)
        .map(|i| {
            let mut z = Vec::with_capacity(2 * pairs);
            for j in 0..pairs {
                let u1: f64 = radical(i, PRIMES[2 * j]).max(f64::MIN_POSITIVE);
                let u2 = radical(i, PRIMES[2 * j + 1]);
                let rad = (-2.0 * u1.ln()).sqrt();
                let th = 2.0 * std::f64::consts::PI * u2;
                z.push(rad * th.cos());
                z.push(rad * th.sin());
            }
            z.truncate(k);
            let nrm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            z.iter().map(|x| x / nrm).collect()
        })
        .collect()
}

struct SampleEval {
    mass: f64,
    omega: f64,
    /// `‖v‖_p^p` and `‖v‖_{4*}^{4*}` for `v = ṽ/√ω`.
    alpha: f64,
    beta: f64,
    fc: crate::functional::FiberCoefficients,
}

fn eval_combination(bumps: &[RadialField], coef: &[f64], params: &ProblemParams) -> SampleEval {
    let grid = bumps[0].grid().clone();
    let mut v = vec![0.0; grid.nodes().len()];
    for (b, s) in bumps.iter().zip(coef) {
        if *s != 0.0 {
            v.iter_mut().zip(b.values()).for_each(|(a, x)| *a += s * x);
        }
    }
    let u = RadialField::new(grid, v);
    let fc = fiber_coefficients(&u, params);
    let omega = fc.a + fc.b;
    SampleEval {
        mass: u.mass(),
        omega,
        alpha: fc.d / omega.powf(params.p / 2.0),
        beta: fc.e / omega.powf(params.four_star() / 2.0),
        fc,
    }
}

/// `sup_{ω ∈ [lo, hi]} p(ω/2 − ω^{4*/2}β/4*) / (ω^{p/2} α)`, clamped at zero.
fn mu_bound(params: &ProblemParams, alpha: f64, beta: f64, lo: f64, hi: f64) -> f64 {
    let (p, q) = (params.p, params.four_star());
    let f = |w: f64| p * (0.5 * w - w.powf(q / 2.0) * beta / q) / (w.powf(p / 2.0) * alpha);
    let n = 2000;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        let w = lo + (hi - lo) * i as f64 / n as f64;
        best = best.max(f(w));
    }
    best.max(0.0)
}

/// Disjointly supported bumps spanning the subspace behind the genus argument,
/// together with the sampled constants `α_k`, `β_k` and thresholds `μ_k` for `k = 1..m`.
pub fn genus_family(
    params: &ProblemParams,
    grid: &Arc<RadialGrid>,
    consts: &BestConstants,
    m: usize,
    settings: &FamilySettings,
) -> Result<MultiplicityFamily> {
    use rayon::prelude::*;
    params.validate()?;
    if m == 0 || m > 12 {
        return Err(Error::InvalidParams(format!("m = {m}, need 1 <= m <= 12")));
    }
    if !(params.p < 2.0 + 4.0 / params.n as f64) {
        return Err(Error::Regime(format!("multiplicity family needs p < 2 + 4/N, got p = {}", params.p)));
    }
    if params.mu > 0.0 {
        let cs = c_star(params, consts)?;
        if params.c >= cs {
            return Err(Error::Regime(format!("multiplicity family needs c < c* = {cs}, got c = {}", params.c)));
        }
    }
    let r2 = r_star(params, consts)?.powi(2);
    let c = params.c;

    // Common dilation: stretch the reference layout until every bump lies in V_r(c).
    let mut s = 0.0;
    let bumps = loop {
        let scale = (-s as f64).exp();
        if scale * (3.0 * m as f64) >= grid.radius() {
            return Err(Error::Infeasible(format!(
                "{m} bumps with seminorm below r*^2 = {r2:.4} need radius > {:.3}, grid has R = {}; increase R",
                scale * 3.0 * m as f64,
                grid.radius()
            )));
        }
        let b = bumps_at_scale(grid, m, scale, c);
        if b.iter().all(|u| seminorm_sum(u) < r2) {
            break b;
        }
        s -= settings.ds;
    };
    let supports: Vec<_> = bumps.iter().map(support_of).collect();
    for (i, &(a, b)) in supports.iter().enumerate() {
        if b - a + 1 < settings.min_bump_nodes {
            return Err(Error::Infeasible(format!(
                "bump {i} spans {} nodes, need {}; increase M",
                b - a + 1,
                settings.min_bump_nodes
            )));
        }
        if i > 0 && a <= supports[i - 1].1 + settings.min_gap_nodes {
            return Err(Error::Infeasible(format!("bumps {} and {i} are closer than {} nodes; increase M", i - 1, settings.min_gap_nodes)));
        }
    }
    let omegas: Vec<f64> = bumps.iter().map(seminorm_sum).collect();

    let mut levels: Vec<FamilyLevel> = Vec::with_capacity(m);
    let mut pool: Vec<Vec<f64>> = Vec::new();
    for k in 1..=m {
        // nested: earlier coefficient vectors are kept, padded with zeros
        pool.iter_mut().for_each(|v| v.push(0.0));
        let fresh = if k == 1 { vec![vec![1.0], vec![-1.0]] } else { sphere_points(k, settings.samples) };
        pool.extend(fresh);
        let evals: Vec<SampleEval> = pool.par_iter().map(|co| eval_combination(&bumps[..k], co, params)).collect();
        let alpha = evals.iter().map(|e| e.alpha).fold(f64::INFINITY, f64::min);
        let beta = evals.iter().map(|e| e.beta).fold(f64::INFINITY, f64::min);
        let lo = evals.iter().map(|e| e.omega).fold(f64::INFINITY, f64::min);
        let hi = evals.iter().map(|e| e.omega).fold(f64::NEG_INFINITY, f64::max);
        let mu = mu_bound(params, alpha, beta, lo, hi);
        let test = ProblemParams { mu: 2.0 * mu, ..*params };
        let sup_i = evals
            .iter()
            .map(|e| crate::functional::energy_from(&e.fc, e.mass, &test).i)
            .fold(f64::NEG_INFINITY, f64::max);
        levels.push(FamilyLevel {
            k,
            samples: evals.len(),
            alpha,
            beta,
            omega_range: (lo, hi),
            mu,
            sup_i_at_twice_mu: sup_i,
            max_mass_error: evals.iter().map(|e| (e.mass - c).abs()).fold(0.0, f64::max),
            max_seminorm: hi,
        });
    }
    let last = levels.last().expect("m >= 1").clone();
    log::info!("genus family: m = {m}, s = {s:.3}, mu_m = {:.6e}", last.mu);
    Ok(MultiplicityFamily {
        m,
        params: *params,
        s,
        r_star_sq: r2,
        supports,
        omegas,
        alpha_m: last.alpha,
        beta_m: last.beta,
        mu_m: last.mu,
        sup_i_on_tm: last.sup_i_at_twice_mu,
        levels,
        bumps,
    })
}

/// Parameter lattice for [`sweep`]; every combination is solved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    #[serde(rename = "N")]
    pub n: Vec<usize>,
    pub p: Vec<f64>,
    pub mu: Vec<f64>,
    /// Absolute masses.
    pub c: Vec<f64>,
    /// Masses as fractions of `c*` (subcritical only), used in addition to `c`.
    pub c_over_c_star: Vec<f64>,
    pub include_gradient_term: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { n: vec![], p: vec![], mu: vec![], c: vec![], c_over_c_star: vec![], include_gradient_term: true }
    }
}

/// Grid geometry shared by every run of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    #[serde(rename = "R")]
    pub r_max: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub stretch: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { r_max: 40.0, m: 2000, stretch: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub p: f64,
    pub mu: f64,
    pub c: f64,
    pub regime: Option<SolverRegime>,
    pub status: Option<SolverStatus>,
    #[serde(rename = "I")]
    pub i: Option<f64>,
    #[serde(rename = "P")]
    pub p_value: Option<f64>,
    pub lambda: Option<f64>,
    pub residual: Option<f64>,
    pub converged: bool,
    pub below_level_threshold: Option<bool>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    #[serde(skip)]
    pub reports: Vec<Option<SolverReport>>,
}

impl SweepOutcome {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "N", "p", "mu", "c", "regime", "status", "I", "P", "lambda", "residual", "converged",
            "below_level_threshold", "wall_time_s", "error",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        for r in &self.rows {
            wr.write_record([
                r.n.to_string(),
                r.p.to_string(),
                r.mu.to_string(),
                format!("{:e}", r.c),
                r.regime.map(|x| kebab(&x)).unwrap_or_default(),
                r.status.map(|x| kebab(&x)).unwrap_or_default(),
                opt(r.i),
                opt(r.p_value),
                opt(r.lambda),
                opt(r.residual),
                r.converged.to_string(),
                r.below_level_threshold.map(|b| b.to_string()).unwrap_or_default(),
                format!("{:.6}", r.wall_time_s),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Serialized name of a unit enum variant.
pub fn kebab<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

fn solve_one(
    params: &ProblemParams,
    grid: &Arc<RadialGrid>,
    consts: &BestConstants,
    cfg: &SolverConfig,
) -> Result<SolverReport> {
    match params.regime() {
        MassRegime::Supercritical => mountain_pass_supercritical(params, grid, consts, cfg),
        _ => minimize_subcritical(params, grid, consts, cfg),
    }
}

/// Solves every lattice point in parallel. Failures are recorded per row and do not stop the sweep.
pub fn sweep(spec: &SweepSpec, grid_spec: &GridSpec, cfg: &SolverConfig, consts_opts: &(crate::quadrature::QuadSettings, crate::constants::GnSettings)) -> Result<SweepOutcome> {
    use rayon::prelude::*;
    use std::collections::BTreeMap;

    let all_finite = spec.p.iter().chain(&spec.mu).chain(&spec.c).chain(&spec.c_over_c_star).all(|x| x.is_finite());
    if !all_finite {
        return Err(Error::InvalidParams("sweep ranges must be finite".into()));
    }
    // one grid per dimension and one set of constants per (N, p)
    let mut grids = BTreeMap::new();
    for &n in &spec.n {
        grids.insert(n, Arc::new(crate::grid::make_grid(n, grid_spec.r_max, grid_spec.m, grid_spec.stretch)?));
    }
    let mut jobs = Vec::new();
    for &n in &spec.n {
        for &p in &spec.p {
            for &mu in &spec.mu {
                for &c in &spec.c {
                    jobs.push((n, p, mu, Some(c), None));
                }
                for &f in &spec.c_over_c_star {
                    jobs.push((n, p, mu, None, Some(f)));
                }
            }
        }
    }
    let pairs: Vec<(usize, u64)> = {
        let mut v: Vec<_> = jobs.iter().map(|j| (j.0, j.1.to_bits())).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let consts: BTreeMap<(usize, u64), std::result::Result<BestConstants, String>> = pairs
        .par_iter()
        .map(|&(n, pb)| {
            let c = BestConstants::compute_on(&grids[&n], f64::from_bits(pb), &consts_opts.0, &consts_opts.1).map_err(|e| e.to_string());
            ((n, pb), c)
        })
        .collect();

    let results: Vec<(SweepRow, Option<SolverReport>)> = jobs
        .par_iter()
        .map(|&(n, p, mu, c, frac)| {
            let started = Instant::now();
            let mut params = ProblemParams { n, p, mu, c: c.unwrap_or(f64::NAN), include_gradient_term: spec.include_gradient_term };
            let res = consts[&(n, p.to_bits())].clone().map_err(Error::Shared).and_then(|k| {
                if let Some(f) = frac {
                    params.c = f * c_star(&params, &k)?;
                }
                solve_one(&params, &grids[&n], &k, cfg)
            });
            let mut row = SweepRow {
                n,
                p,
                mu,
                c: params.c,
                regime: None,
                status: None,
                i: None,
                p_value: None,
                lambda: None,
                residual: None,
                converged: false,
                below_level_threshold: None,
                wall_time_s: 0.0,
                error: None,
            };
            let report = match res {
                Ok(r) => {
                    row.regime = Some(r.regime);
                    row.status = Some(r.status);
                    row.i = Some(r.i);
                    row.p_value = Some(r.p);
                    row.lambda = Some(r.lambda);
                    row.residual = Some(r.residual);
                    row.converged = r.converged;
                    row.below_level_threshold = Some(r.constraint_checks.below_level_threshold);
                    Some(r)
                }
                Err(e) => {
                    log::warn!("sweep point N={n} p={p} mu={mu}: {e}");
                    row.error = Some(e.to_string());
                    None
                }
            };
            row.wall_time_s = started.elapsed().as_secs_f64();
            (row, report)
        })
        .collect();
    let (rows, reports) = results.into_iter().unzip();
    Ok(SweepOutcome { rows, reports })
}
