//! Reference computations that share no code with the library: closed forms,
//! their own quadrature, and generic optimizers from `argmin`.

use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use argmin::solver::simulatedannealing::{Anneal, SATempFunc, SimulatedAnnealing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::rand_core::SeedableRng as _;
use statrs::function::gamma::ln_gamma;

pub fn four_star(n: usize) -> f64 {
    2.0 * n as f64 / (n as f64 - 4.0)
}

pub fn gamma_p(n: usize, p: f64) -> f64 {
    n as f64 * (p - 2.0) / (4.0 * p)
}

/// Surface area of the unit sphere in ℝ^N.
pub fn sphere_area(n: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / ln_gamma(n as f64 / 2.0).exp()
}

/// Sharp constant of `‖Δu‖² ≥ S ‖u‖²_{4*}` in closed form.
pub fn sobolev_closed_form(n: usize) -> f64 {
    let nf = n as f64;
    std::f64::consts::PI.powi(2)
        * (nf + 2.0)
        * nf
        * (nf - 2.0)
        * (nf - 4.0)
        * ((ln_gamma(nf / 2.0) - ln_gamma(nf)) * 4.0 / nf).exp()
}

/// Maximizer of a unimodal function on `[lo, hi]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol * (1.0 + lo.abs() + hi.abs()) {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Mass threshold data written out from the definition of `g_c`.
pub struct Thresholds {
    pub n: usize,
    pub p: f64,
    pub mu: f64,
    pub s: f64,
    pub c_np: f64,
}

impl Thresholds {
    pub fn g(&self, c: f64, r: f64) -> f64 {
        let (p, g, q) = (self.p, gamma_p(self.n, self.p), four_star(self.n));
        0.5 - self.mu / p * self.c_np.powf(p) * c.powf(p * (1.0 - g) / 2.0) * r.powf(p * g - 2.0)
            - r.powf(q - 2.0) / (q * self.s.powf(q / 2.0))
    }

    /// `(argmax, max)` of `g_c` by golden section in `ln r`.
    pub fn g_max(&self, c: f64) -> (f64, f64) {
        let (x, v) = golden_max(|t| self.g(c, t.exp()), -20.0, 20.0, 1e-15);
        (x.exp(), v)
    }

    /// Mass at which the maximum of `g_c` is zero.
    pub fn c_star(&self) -> f64 {
        let f = |lc: f64| self.g_max(lc.exp()).1;
        bisect(f, -30.0, 30.0).exp()
    }
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + h * i as f64);
    }
    s * h / 3.0
}

/// `∫ u², ∫ |Δu|², ∫ |∇u|², ∫ |u|^{4*}, ∫ |u|^p` of the cut-off bubble, by closed-form derivatives.
pub fn bubble_norms(n: usize, p: f64, eps: f64) -> [f64; 5] {
    let nf = n as f64;
    let d = (nf * (nf + 2.0) * (nf - 2.0) * (nf - 4.0)).powf((nf - 4.0) / 8.0);
    let k = (nf - 4.0) / 2.0;
    // U = d ε^k (ε² + r²)^{-k}
    let bubble = |r: f64| {
        let q = eps * eps + r * r;
        let u = d * eps.powf(k) * q.powf(-k);
        let du = -2.0 * k * r * u / q;
        let d2u = -2.0 * k * u / q + 4.0 * k * (k + 1.0) * r * r * u / (q * q);
        (u, du, d2u)
    };
    // ψ = 1 − S(r − 1) on [1, 2], S the quintic smoothstep
    let cutoff = |r: f64| {
        if r <= 1.0 {
            (1.0, 0.0, 0.0)
        } else if r >= 2.0 {
            (0.0, 0.0, 0.0)
        } else {
            let t = r - 1.0;
            let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
            let ds = 30.0 * t * t * (1.0 - t) * (1.0 - t);
            let d2s = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
            (1.0 - s, -ds, -d2s)
        }
    };
    let q = four_star(n);
    let om = sphere_area(n);
    let terms = |r: f64| {
        let (u, du, d2u) = bubble(r);
        let (c, dc, d2c) = cutoff(r);
        let v = c * u;
        let dv = dc * u + c * du;
        let d2v = d2c * u + 2.0 * dc * du + c * d2u;
        let lap = if r > 0.0 { d2v + (nf - 1.0) / r * dv } else { nf * d2v };
        let w = om * r.powf(nf - 1.0);
        [w * v * v, w * lap * lap, w * dv * dv, w * v.abs().powf(q), w * v.abs().powf(p)]
    };
    let mut out = [0.0; 5];
    let mut cuts = vec![0.0, eps, 10.0 * eps, 1.0, 2.0];
    cuts.retain(|&x| x <= 1.0 || x == 2.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    for w in cuts.windows(2) {
        for (j, o) in out.iter_mut().enumerate() {
            *o += simpson(|r| terms(r)[j], w[0], w[1], 40_000);
        }
    }
    out
}

/// Even-tempered Gaussian basis `exp(−r²/2σ_k²)` tabulated on a graded Simpson grid.
pub struct GaussianModel {
    pub n: usize,
    pub p: f64,
    pub mu: f64,
    pub c: f64,
    pub beta: f64,
    weights: Vec<f64>,
    g: Vec<Vec<f64>>,
    dg: Vec<Vec<f64>>,
    lg: Vec<Vec<f64>>,
}

/// `(‖Δu‖², ‖∇u‖², ‖u‖_p^p, ‖u‖_{4*}^{4*})` of a mass-normalized combination.
#[derive(Clone, Copy, Debug)]
pub struct Coefficients {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub e: f64,
}

impl GaussianModel {
    pub fn new(n: usize, p: f64, mu: f64, c: f64, widths: &[f64], r_max: f64, panels: usize) -> Self {
        // r = r_max t², Simpson in t
        let panels = panels + panels % 2;
        let h = 1.0 / panels as f64;
        let om = sphere_area(n);
        let mut weights = Vec::with_capacity(panels + 1);
        let mut rs = Vec::with_capacity(panels + 1);
        for i in 0..=panels {
            let t = i as f64 * h;
            let r = r_max * t * t;
            let simp = if i == 0 || i == panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            weights.push(simp * h / 3.0 * 2.0 * r_max * t * om * r.powi(n as i32 - 1));
            rs.push(r);
        }
        let nf = n as f64;
        let tab = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Vec<f64>> { widths.iter().map(|&s| rs.iter().map(|&r| f(s, r)).collect()).collect() };
        let g = tab(&|s, r| (-r * r / (2.0 * s * s)).exp());
        let dg = tab(&|s, r| -r / (s * s) * (-r * r / (2.0 * s * s)).exp());
        let lg = tab(&|s, r| (r * r / s.powi(4) - nf / (s * s)) * (-r * r / (2.0 * s * s)).exp());
        Self { n, p, mu, c, beta: 1.0, weights, g, dg, lg }
    }

    pub fn coefficients(&self, a: &[f64]) -> Coefficients {
        let len = self.weights.len();
        let (mut m, mut aa, mut bb, mut d, mut e) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let q = four_star(self.n);
        let mut u = vec![0.0; len];
        let mut du = vec![0.0; len];
        let mut lu = vec![0.0; len];
        for (k, &ak) in a.iter().enumerate() {
            for i in 0..len {
                u[i] += ak * self.g[k][i];
                du[i] += ak * self.dg[k][i];
                lu[i] += ak * self.lg[k][i];
            }
        }
        for i in 0..len {
            let w = self.weights[i];
            m += w * u[i] * u[i];
            aa += w * lu[i] * lu[i];
            bb += w * du[i] * du[i];
        }
        let k = (self.c / m).sqrt();
        for i in 0..len {
            let v = (k * u[i]).abs();
            d += self.weights[i] * v.powf(self.p);
            e += self.weights[i] * v.powf(q);
        }
        Coefficients { a: k * k * aa, b: k * k * bb, d, e }
    }

    pub fn energy(&self, a: &[f64]) -> f64 {
        let f = self.coefficients(a);
        0.5 * f.a + 0.5 * self.beta * f.b - self.mu / self.p * f.d - f.e / four_star(self.n)
    }

    pub fn fiber(&self, f: &Coefficients, s: f64) -> f64 {
        let (p, q) = (self.p, four_star(self.n));
        let pg = p * gamma_p(self.n, p);
        0.5 * (4.0 * s).exp() * f.a + 0.5 * self.beta * (2.0 * s).exp() * f.b
            - self.mu / p * (2.0 * pg * s).exp() * f.d
            - (2.0 * q * s).exp() * f.e / q
    }

    /// `max_s Ĩ(s)` by a dense scan followed by golden section.
    pub fn fiber_max(&self, a: &[f64]) -> f64 {
        let f = self.coefficients(a);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=800 {
            let s = -10.0 + 20.0 * i as f64 / 800.0;
            let v = self.fiber(&f, s);
            if v > best.0 {
                best = (v, s);
            }
        }
        golden_max(|s| self.fiber(&f, s), best.1 - 0.025, best.1 + 0.025, 1e-14).1
    }
}

/// Scalar objective over coefficient vectors, with central-difference gradients.
struct Objective<'a> {
    f: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    rng: Mutex<ChaCha8Rng>,
    t0: f64,
    step: f64,
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, x: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        Ok((self.f)(x))
    }
}

impl Gradient for Objective<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, x: &Vec<f64>) -> Result<Vec<f64>, argmin::core::Error> {
        let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        let h = 1e-6 * scale;
        Ok((0..x.len())
            .map(|k| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                ((self.f)(&xp) - (self.f)(&xm)) / (2.0 * h)
            })
            .collect())
    }
}

impl Anneal for Objective<'_> {
    type Param = Vec<f64>;
    type Output = Vec<f64>;
    type Float = f64;
    /// Moves one coordinate by a amount that shrinks with the temperature.
    fn anneal(&self, x: &Vec<f64>, temp: f64) -> Result<Vec<f64>, argmin::core::Error> {
        let mut rng = self.rng.lock().unwrap();
        let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut y = x.clone();
        let k = rng.gen_range(0..x.len());
        let frac = (temp / self.t0).sqrt().max(1e-3);
        y[k] += self.step * frac * scale * rng.gen_range(-1.0..1.0);
        Ok(y)
    }
}

pub struct AnnealResult {
    pub annealed: f64,
    pub polished: f64,
    pub x: Vec<f64>,
}

/// Simulated annealing from `x0`, then L-BFGS polishing.
pub fn anneal_and_polish(f: &(dyn Fn(&[f64]) -> f64 + Sync), x0: Vec<f64>, seed: u64, sa_iters: u64, t0: f64) -> AnnealResult {
    let obj = Objective { f, rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)), t0, step: 0.5 };
    let sa = SimulatedAnnealing::new_with_rng(t0, rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed))
        .unwrap()
        .with_temp_func(SATempFunc::Exponential(0.998))
        .with_stall_best(2000);
    let res = Executor::new(obj, sa).configure(|s| s.param(x0).max_iters(sa_iters)).run().unwrap();
    let annealed = res.state().get_best_cost();
    let mut x = res.state().get_best_param().unwrap().clone();
    let mut polished = annealed;
    // restarting L-BFGS clears its curvature memory, which helps on this ill-conditioned basis
    for _ in 0..6 {
        let obj = Objective { f, rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)), t0, step: 0.5 };
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10).with_tolerance_cost(1e-15).unwrap();
        let run = Executor::new(obj, solver).configure(|s| s.param(x.clone()).max_iters(400)).run();
        let Ok(run) = run else { break };
        let c = run.state().get_best_cost();
        if !(c < polished - 1e-13 * polished.abs()) {
            if c < polished {
                polished = c;
                x = run.state().get_best_param().unwrap().clone();
            }
            break;
        }
        polished = c;
        x = run.state().get_best_param().unwrap().clone();
    }
    AnnealResult { annealed, polished, x }
}
