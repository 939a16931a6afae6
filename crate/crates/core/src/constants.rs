//! Exponents, best constants and the threshold functions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{make_grid, RadialField, RadialGrid};
use crate::linalg::{dot, h_project, wdot};
use crate::quadrature::{integrate, sphere_area, QuadSettings};

/// The tuple `(N, p, μ, c)` and the choice between `I` and `I_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    #[serde(rename = "N")]
    pub n: usize,
    pub p: f64,
    pub mu: f64,
    pub c: f64,
    /// `false` drops `½‖∇u‖²` from the energy.
    #[serde(default = "yes")]
    pub include_gradient_term: bool,
}

fn yes() -> bool {
    true
}

impl ProblemParams {
    pub fn new(n: usize, p: f64, mu: f64, c: f64) -> Self {
        Self { n, p, mu, c, include_gradient_term: true }
    }

    /// `μ = 0` is accepted as a limiting case for diagnostics.
    pub fn validate(&self) -> Result<()> {
        if self.n < 5 {
            return Err(Error::InvalidParams(format!(
                "N = {} but the critical exponent 2N/(N-4) needs N >= 5",
                self.n
            )));
        }
        let fs = four_star(self.n);
        if !(self.p > 2.0 && self.p < fs) {
            return Err(Error::InvalidParams(format!(
                "p = {} must lie in (2, {fs}) for N = {}",
                self.p, self.n
            )));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::InvalidParams(format!("mu = {} must be nonnegative", self.mu)));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::InvalidParams(format!("c = {} must be positive", self.c)));
        }
        Ok(())
    }

    /// 1 with the gradient term, 0 without.
    pub fn beta(&self) -> f64 {
        if self.include_gradient_term {
            1.0
        } else {
            0.0
        }
    }

    pub fn four_star(&self) -> f64 {
        four_star(self.n)
    }

    pub fn gamma_p(&self) -> f64 {
        gamma(self.n, self.p)
    }

    pub fn regime(&self) -> MassRegime {
        classify(self.n, self.p)
    }
}

pub fn four_star(n: usize) -> f64 {
    2.0 * n as f64 / (n as f64 - 4.0)
}

pub fn p_bar(n: usize) -> f64 {
    2.0 + 8.0 / n as f64
}

/// `γ_t = (N/2)(1/2 − 1/t)`.
pub fn gamma(n: usize, t: f64) -> f64 {
    n as f64 / 2.0 * (0.5 - 1.0 / t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MassRegime {
    Subcritical,
    Critical,
    Supercritical,
}

fn classify(n: usize, p: f64) -> MassRegime {
    let pb = p_bar(n);
    if (p - pb).abs() <= 1e-12 * pb {
        MassRegime::Critical
    } else if p < pb {
        MassRegime::Subcritical
    } else {
        MassRegime::Supercritical
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalExponents {
    pub four_star: f64,
    pub p_bar: f64,
    pub gamma_p: f64,
    pub gamma_four_star: f64,
    pub regime: MassRegime,
}

pub fn critical_exponents(params: &ProblemParams) -> Result<CriticalExponents> {
    params.validate()?;
    let fs = four_star(params.n);
    Ok(CriticalExponents {
        four_star: fs,
        p_bar: p_bar(params.n),
        gamma_p: gamma(params.n, params.p),
        gamma_four_star: gamma(params.n, fs),
        regime: params.regime(),
    })
}

/// `[N(N+2)(N−2)(N−4)]^{(N−4)/8}`.
pub fn bubble_prefactor(n: usize) -> f64 {
    let nf = n as f64;
    (nf * (nf + 2.0) * (nf - 2.0) * (nf - 4.0)).powf((nf - 4.0) / 8.0)
}

/// `U_1(r)` and `ΔU_1(r)`.
pub fn unit_bubble(n: usize, r: f64) -> (f64, f64) {
    let nf = n as f64;
    let d = bubble_prefactor(n);
    let q = 1.0 + r * r;
    let u = d * q.powf(-(nf - 4.0) / 2.0);
    let lap = d * (4.0 - nf) * (nf * q.powf(-(nf - 2.0) / 2.0) - (nf - 2.0) * r * r * q.powf(-nf / 2.0));
    (u, lap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolevReport {
    #[serde(rename = "S")]
    pub s: f64,
    /// `∫|ΔU_1|² = S^{N/4}`.
    pub lap_integral: f64,
    /// `∫U_1^{4*}`, equal to `lap_integral` up to quadrature error.
    pub crit_integral: f64,
    pub panels: usize,
    pub quad: QuadSettings,
}

/// `S` from `S^{N/4} = ∫|ΔU_1|²`, integrated after the substitution `r = tan θ`.
pub fn sobolev_constant(n: usize, quad: &QuadSettings) -> Result<SobolevReport> {
    if n < 5 {
        return Err(Error::InvalidParams(format!("N = {n}, need N >= 5")));
    }
    let omega = sphere_area(n);
    let fs = four_star(n);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let jac = |th: f64| {
        let r = th.tan();
        (r, r.powi(n as i32 - 1) / th.cos().powi(2))
    };
    let lap = |th: f64| {
        if th >= half_pi {
            return 0.0;
        }
        let (r, j) = jac(th);
        let (_, l) = unit_bubble(n, r);
        l * l * j
    };
    let crit = |th: f64| {
        if th >= half_pi {
            return 0.0;
        }
        let (r, j) = jac(th);
        let (u, _) = unit_bubble(n, r);
        u.powf(fs) * j
    };
    let (li, p1) = integrate(lap, 0.0, half_pi, quad)?;
    let (ci, p2) = integrate(crit, 0.0, half_pi, quad)?;
    let lap_integral = omega * li;
    Ok(SobolevReport {
        s: lap_integral.powf(4.0 / n as f64),
        lap_integral,
        crit_integral: omega * ci,
        panels: p1.max(p2),
        quad: *quad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnSettings {
    #[serde(rename = "R")]
    pub r_max: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub stretch: f64,
    pub max_iters: usize,
    /// Tolerance on the preconditioned gradient norm of `ln Q`.
    pub grad_tol: f64,
}

impl Default for GnSettings {
    fn default() -> Self {
        Self { r_max: 40.0, m: 2000, stretch: 2.0, max_iters: 4000, grad_tol: 1e-7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnReport {
    pub c_np: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub settings: GnSettings,
}

/// Sharp constant of `‖u‖_p ≤ C ‖Δu‖^{γ_p} ‖u‖^{1−γ_p}` on the discrete radial space.
///
/// At `p = 4*` the quotient has no maximizer in L², so `S^{-1/2}` is returned instead.
pub fn gn_constant(n: usize, p: f64, opt: &GnSettings) -> Result<GnReport> {
    if n < 5 {
        return Err(Error::InvalidParams(format!("N = {n}, need N >= 5")));
    }
    let fs = four_star(n);
    if (p - fs).abs() <= 1e-12 * fs {
        let s = sobolev_constant(n, &QuadSettings::default())?;
        return Ok(GnReport { c_np: s.s.powf(-0.5), iterations: 0, grad_norm: 0.0, settings: *opt });
    }
    let grid = Arc::new(make_grid(n, opt.r_max, opt.m, opt.stretch)?);
    gn_constant_on(&grid, p, opt)
}

/// Weinstein quotient `‖u‖_p / (‖Δu‖^{γ}‖u‖^{1−γ})`.
pub fn weinstein_quotient(u: &RadialField, p: f64) -> f64 {
    let g = gamma(u.grid().dim(), p);
    u.norm_pow(p).powf(1.0 / p) / (u.lap_seminorm_sq().powf(g / 2.0) * u.mass().powf((1.0 - g) / 2.0))
}

/// Same as [`gn_constant`] on a given grid.
pub fn gn_constant_on(grid: &Arc<RadialGrid>, p: f64, opt: &GnSettings) -> Result<GnReport> {
    let n = grid.dim();
    let fs = four_star(n);
    if !(p > 2.0 && p < fs) {
        return Err(Error::InvalidParams(format!("p = {p} outside (2, {fs})")));
    }
    let g = gamma(n, p);
    let w = grid.free_weights().to_vec();
    let al = grid.gram_lap();
    // Unit-mass Gaussian e^{-r²/2} has ‖Δu‖² = N(N+2)/4; keep the maximizer at that scale.
    let a_target = (n * (n + 2)) as f64 / 4.0;
    let hm = {
        let mut h = al.clone();
        h.add_diag(&w, a_target);
        h
    };
    let h = hm.cholesky()?;

    let normalize = |x: &mut Vec<f64>| {
        let m = wdot(&w, x, x).sqrt();
        x.iter_mut().for_each(|v| *v /= m);
    };
    let terms = |x: &[f64]| {
        let a = grid.lap_sq_free(x);
        let d: f64 = x.iter().zip(&w).map(|(v, wi)| wi * v.abs().powf(p)).sum();
        (a, d)
    };
    let ln_q = |x: &[f64]| {
        let (a, d) = terms(x);
        d.ln() / p - g / 2.0 * a.ln()
    };
    let fix_scale = |x: &mut Vec<f64>| {
        for _ in 0..3 {
            let a = grid.lap_sq_free(x);
            let t = 0.25 * (a_target / a).ln();
            if t.abs() < 0.05 {
                break;
            }
            let u = RadialField::from_free(grid.clone(), x);
            let gen = u.dilation_generator().free();
            x.iter_mut().zip(&gen).for_each(|(v, d)| *v += t * d);
            normalize(x);
        }
    };

    let mut x: Vec<f64> = grid.nodes()[1..grid.intervals()].iter().map(|r| (-r * r / 2.0).exp()).collect();
    normalize(&mut x);
    let mut val = ln_q(&x);
    let mut tau = 1.0;
    let mut grad_norm = f64::INFINITY;
    for it in 0..opt.max_iters {
        let (a, d) = terms(&x);
        let ax = grid.lap_normal_apply(&x);
        // ∇ ln Q on the unit sphere (the mass term is constant there)
        let grad: Vec<f64> = (0..x.len())
            .map(|i| w[i] * x[i].abs().powf(p - 2.0) * x[i] / d - g * ax[i] / a)
            .collect();
        let z = h.solve(&grad);
        let wx: Vec<f64> = w.iter().zip(&x).map(|(a, b)| a * b).collect();
        let y = h.solve(&wx);
        // Stay tangent to the unit sphere and H-orthogonal to the dilation orbit,
        // along which the quotient is invariant up to discretization error.
        let gen = RadialField::from_free(grid.clone(), &x).dilation_generator().free();
        let hgen = hm.matvec(&gen);
        let dir = h_project(&z, &[y, gen], &[wx, hgen]);
        let slope = dot(&grad, &dir);
        grad_norm = slope.max(0.0).sqrt();
        if grad_norm <= opt.grad_tol {
            return Ok(GnReport { c_np: val.exp(), iterations: it, grad_norm, settings: *opt });
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + tau * b).collect();
            normalize(&mut trial);
            let tv = ln_q(&trial);
            if tv >= val + 1e-4 * tau * slope {
                x = trial;
                accepted = true;
                break;
            }
            tau *= 0.5;
        }
        if !accepted {
            break;
        }
        fix_scale(&mut x);
        val = ln_q(&x);
        tau = (tau * 2.0).min(1e3);
    }
    Err(Error::Stagnation(format!(
        "GN quotient ascent stopped with gradient norm {grad_norm:e} > {:e}",
        opt.grad_tol
    )))
}

/// Constants needed by the threshold formulas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestConstants {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "C_Np")]
    pub c_np: f64,
    #[serde(rename = "D_N")]
    pub d_n: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub sobolev: SobolevReport,
    pub gn: GnReport,
}

impl BestConstants {
    pub fn compute(n: usize, p: f64, quad: &QuadSettings, gn: &GnSettings) -> Result<Self> {
        let sobolev = sobolev_constant(n, quad)?;
        let gn = gn_constant(n, p, gn)?;
        Ok(Self::from_parts(n, sobolev, gn))
    }

    /// Uses `grid` for the GN constant so that thresholds match the solver's discretization.
    pub fn compute_on(grid: &Arc<RadialGrid>, p: f64, quad: &QuadSettings, gn: &GnSettings) -> Result<Self> {
        let n = grid.dim();
        let sobolev = sobolev_constant(n, quad)?;
        let settings = GnSettings {
            r_max: grid.radius(),
            m: grid.intervals(),
            stretch: grid.stretch(),
            ..*gn
        };
        let gn = gn_constant_on(grid, p, &settings)?;
        Ok(Self::from_parts(n, sobolev, gn))
    }

    fn from_parts(n: usize, sobolev: SobolevReport, gn: GnReport) -> Self {
        Self {
            s: sobolev.s,
            c_np: gn.c_np,
            d_n: bubble_prefactor(n),
            provenance: Provenance { sobolev, gn },
        }
    }

    /// `(2/N) S^{N/4}`.
    pub fn level_threshold(&self, n: usize) -> f64 {
        2.0 / n as f64 * self.s.powf(n as f64 / 4.0)
    }
}

/// `g_c(r) = ½ − (μ/p) C^p c^{p(1−γ)/2} r^{pγ−2} − r^{4*−2}/(4* S^{4*/2})`.
pub fn g_c(r: f64, params: &ProblemParams, consts: &BestConstants) -> f64 {
    let (p, g, fs) = (params.p, params.gamma_p(), params.four_star());
    0.5 - params.mu / p * consts.c_np.powf(p) * params.c.powf(p * (1.0 - g) / 2.0) * r.powf(p * g - 2.0)
        - r.powf(fs - 2.0) / (fs * consts.s.powf(fs / 2.0))
}

/// `h_c(r) = r² g_c(r)`, with `h_c(0) = 0`.
pub fn h_c(r: f64, params: &ProblemParams, consts: &BestConstants) -> f64 {
    let (p, g, fs) = (params.p, params.gamma_p(), params.four_star());
    0.5 * r * r
        - params.mu / p * consts.c_np.powf(p) * params.c.powf(p * (1.0 - g) / 2.0) * r.powf(p * g)
        - r.powf(fs) / (fs * consts.s.powf(fs / 2.0))
}

fn require_subcritical(params: &ProblemParams, what: &str) -> Result<()> {
    if params.p * params.gamma_p() >= 2.0 {
        return Err(Error::Regime(format!(
            "{what} needs p < 2 + 8/N, got p = {} for N = {}",
            params.p, params.n
        )));
    }
    Ok(())
}

/// `𝓔`, the constant entering `c*`.
pub fn cal_e(params: &ProblemParams, consts: &BestConstants) -> Result<f64> {
    require_subcritical(params, "c*")?;
    let (p, g, fs) = (params.p, params.gamma_p(), params.four_star());
    let pg = p * g;
    Ok((fs - pg) / (2.0 - pg)
        * ((2.0 - pg) * params.mu * consts.c_np.powf(p) / ((fs - 2.0) * p)).powf((fs - 2.0) / (fs - pg))
        * (fs * consts.s.powf(fs / 2.0)).powf((pg - 2.0) / (fs - pg)))
}

pub fn c_star(params: &ProblemParams, consts: &BestConstants) -> Result<f64> {
    let e = cal_e(params, consts)?;
    let (p, g, fs) = (params.p, params.gamma_p(), params.four_star());
    let pg = p * g;
    Ok((1.0 / (2.0 * e)).powf(2.0 * (fs - pg) / (p * (1.0 - g) * (fs - 2.0))))
}

/// Unique critical point of `g_c`.
pub fn r_c(params: &ProblemParams, consts: &BestConstants) -> Result<f64> {
    require_subcritical(params, "r_c")?;
    let (p, g, fs) = (params.p, params.gamma_p(), params.four_star());
    let pg = p * g;
    Ok(((2.0 - pg) * params.mu * fs * consts.s.powf(fs / 2.0) * consts.c_np.powf(p)
        * params.c.powf(p * (1.0 - g) / 2.0)
        / ((fs - 2.0) * p))
        .powf(1.0 / (fs - pg)))
}

/// `r* = r_{c*}`, which simplifies to a μ- and C-free multiple of `S^{N/8}`.
pub fn r_star(params: &ProblemParams, consts: &BestConstants) -> Result<f64> {
    require_subcritical(params, "r*")?;
    let (pg, fs) = (params.p * params.gamma_p(), params.four_star());
    Ok(((2.0 - pg) * fs / (2.0 * (fs - pg))).powf(1.0 / (fs - 2.0)) * consts.s.powf(params.n as f64 / 8.0))
}

/// The four candidates whose minimum is `K(c, μ)`.
pub fn k_terms(params: &ProblemParams, consts: &BestConstants) -> Result<[f64; 4]> {
    let (p, g, fs, s) = (params.p, params.gamma_p(), params.four_star(), consts.s);
    let pg = p * g;
    if pg <= 2.0 {
        return Err(Error::Regime(format!("K(c, mu) needs p > 2 + 8/N, got p = {p}")));
    }
    let nq = params.n as f64 / 4.0;
    let cp = consts.c_np.powf(p) * params.mu * params.c.powf((p - pg) / 2.0);
    let e = 2.0 / (pg - 2.0);
    Ok([
        8.0 / fs * (fs * s / 16.0).powf(nq),
        4.0 * (s / 4.0).powf(nq),
        (p / (8.0 * 2f64.powf(pg / 2.0) * cp)).powf(e),
        (p / ((p - 2.0) * params.n as f64 * cp)).powf(e),
    ])
}

pub fn k_threshold(params: &ProblemParams, consts: &BestConstants) -> Result<f64> {
    Ok(k_terms(params, consts)?.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub exponents: CriticalExponents,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "C_Np")]
    pub c_np: f64,
    pub c_star: Option<f64>,
    #[serde(rename = "calE")]
    pub cal_e: Option<f64>,
    pub r_c: Option<f64>,
    pub g_c_at_r_c: Option<f64>,
    pub r_star: Option<f64>,
    pub r_tilde: f64,
    pub h_zeros: Option<(f64, f64)>,
    #[serde(rename = "K")]
    pub k: Option<f64>,
    pub k_terms: Option<[f64; 4]>,
    /// `(2/N) S^{N/4}`.
    pub level_threshold: f64,
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || flo.is_nan() || fhi.is_nan() {
        return Err(Error::Bracket(format!("no sign change on [{lo}, {hi}]")));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol * mid.abs().max(1e-300) {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn thresholds(params: &ProblemParams, consts: &BestConstants) -> Result<ThresholdReport> {
    let exponents = critical_exponents(params)?;
    let n = params.n;
    let mut rep = ThresholdReport {
        exponents,
        s: consts.s,
        c_np: consts.c_np,
        c_star: None,
        cal_e: None,
        r_c: None,
        g_c_at_r_c: None,
        r_star: None,
        r_tilde: consts.s.powf(n as f64 / 8.0),
        h_zeros: None,
        k: None,
        k_terms: None,
        level_threshold: consts.level_threshold(n),
    };
    match exponents.regime {
        MassRegime::Subcritical => {
            rep.r_star = Some(r_star(params, consts)?);
            if params.mu > 0.0 {
                rep.cal_e = Some(cal_e(params, consts)?);
                let cs = c_star(params, consts)?;
                rep.c_star = Some(cs);
                let rc = r_c(params, consts)?;
                rep.r_c = Some(rc);
                let gmax = g_c(rc, params, consts);
                rep.g_c_at_r_c = Some(gmax);
                if gmax > 0.0 {
                    let g = |r: f64| g_c(r, params, consts);
                    let mut lo = rc;
                    while g(lo) > 0.0 {
                        lo *= 0.5;
                        if lo < 1e-300 {
                            return Err(Error::Bracket("lower zero of h_c not bracketed".into()));
                        }
                    }
                    let mut hi = rc;
                    while g(hi) > 0.0 {
                        hi *= 2.0;
                        if !hi.is_finite() {
                            return Err(Error::Bracket("upper zero of h_c not bracketed".into()));
                        }
                    }
                    rep.h_zeros = Some((bisect(g, lo, rc, 1e-12)?, bisect(g, rc, hi, 1e-12)?));
                }
            }
        }
        MassRegime::Supercritical => {
            if params.mu > 0.0 {
                let t = k_terms(params, consts)?;
                rep.k_terms = Some(t);
                rep.k = Some(t.into_iter().fold(f64::INFINITY, f64::min));
            }
        }
        MassRegime::Critical => {}
    }
    Ok(rep)
}
