//! Command-line front end: configuration, artifact writing and exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bubbles::{fit_orders, geometric_epsilons, norms_over, ratio_vanishing_check, write_fits_csv, AsymptoticFit, BubbleNorms, NormMethod, RatioTrend};
use crate::constants::{c_star, thresholds, BestConstants, GnSettings, MassRegime, ProblemParams, ThresholdReport};
use crate::error::{Error, Result};
use crate::functional::{energy, fiber_coefficients, fiber_derivative, fiber_energy, EnergyBreakdown};
use crate::grid::{make_grid, RadialField, RadialFieldData, RadialGrid};
use crate::quadrature::QuadSettings;
use crate::solvers::{
    genus_family, minimize_subcritical, mountain_pass_from, seminorm_sum, sweep, FamilySettings, GridSpec, MultiplicityFamily,
    SolverConfig, SolverReport, SweepSpec, REPORT_SCHEMA_VERSION,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

const EXIT_HELP: &str = "\
Exit codes:
  0  success; every invariant declared for the produced report holds
  1  file system error
  2  configuration error (bad parameters, wrong regime for the command, infeasible construction)
  3  non-convergence (solver status other than converged, or a numerical routine failed)
  4  invariant violation (the run finished but the report fails one of its declared checks)

Precedence: built-in defaults < --config FILE < command-line flags.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeChoice {
    /// Pick the solver from p.
    #[default]
    Auto,
    Subcritical,
    Supercritical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BubbleMethod {
    #[default]
    Quadrature,
    Grid,
}

/// `auto` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuSetting {
    Value(f64),
    #[default]
    #[serde(with = "auto_word")]
    Auto,
}

mod auto_word {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let w = String::deserialize(d)?;
        if w == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"auto\" or a number, got {w:?}")))
        }
    }
}

impl std::str::FromStr for MuSetting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse::<f64>().map(Self::Value).map_err(|_| format!("expected \"auto\" or a number, got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(rename = "N")]
    pub n: usize,
    pub p: f64,
    pub mu: f64,
    /// Absolute mass. When neither this nor `c_over_c_star` is set, subcritical runs use `c*/2` and the rest use 1.
    pub c: Option<f64>,
    pub c_over_c_star: Option<f64>,
    pub include_gradient_term: bool,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self { n: 5, p: 2.5, mu: 1.0, c: None, c_over_c_star: None, include_gradient_term: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsSection {
    pub quad: QuadSettings,
    pub gn: GnSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: Format,
    /// Off: wall times are written as 0 so that repeated runs give byte-identical files.
    pub timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("bnls-out"), format: Format::Json, timing: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub regime: RegimeChoice,
    /// Warm start for the Pohozaev solver (a solution file on the same grid).
    pub start: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BubblesSection {
    /// `first:last:geometric[:count]` or a comma-separated list.
    pub eps: String,
    pub method: BubbleMethod,
}

impl Default for BubblesSection {
    fn default() -> Self {
        Self { eps: "0.2:0.025:geometric".into(), method: BubbleMethod::Quadrature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiplicitySection {
    pub m: usize,
    /// `auto` uses μ = 1 to place c below c*; the family computes its own thresholds μ_k.
    pub mu: MuSetting,
    pub samples: usize,
}

impl Default for MultiplicitySection {
    fn default() -> Self {
        Self { m: 3, mu: MuSetting::Auto, samples: FamilySettings::default().samples }
    }
}

/// Everything a run depends on. Serialized as TOML by `--print-config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub constants: ConstantsSection,
    pub output: OutputSection,
    pub solve: SolveSection,
    pub bubbles: BubblesSection,
    pub multiplicity: MultiplicitySection,
    pub sweep: SweepSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParams(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Checks that do not need the best constants.
    pub fn validate(&self, cmd: &Command) -> Result<()> {
        self.solver.validate()?;
        if self.problem.c.is_some() && self.problem.c_over_c_star.is_some() {
            return Err(Error::InvalidParams("give either c or c_over_c_star, not both".into()));
        }
        if !matches!(cmd, Command::Energy { .. } | Command::Sweep(_)) {
            self.base_params().validate_skip_mass()?;
        }
        if let Command::Solve(_) = cmd {
            let n = self.problem.n as f64;
            let p = self.problem.p;
            match self.solve.regime {
                RegimeChoice::Subcritical if p >= 2.0 + 4.0 / n => {
                    return Err(Error::Regime(format!("subcritical solve needs p < 2 + 4/N = {}, got p = {p}", 2.0 + 4.0 / n)))
                }
                RegimeChoice::Supercritical if p <= 2.0 + 8.0 / n => {
                    return Err(Error::Regime(format!("supercritical solve needs p > 2 + 8/N = {}, got p = {p}", 2.0 + 8.0 / n)))
                }
                RegimeChoice::Auto if p >= 2.0 + 4.0 / n && p <= 2.0 + 8.0 / n => {
                    return Err(Error::Regime(format!(
                        "no solver for 2 + 4/N <= p <= 2 + 8/N (got p = {p}, N = {})",
                        self.problem.n
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn base_params(&self) -> ProblemParams {
        ProblemParams {
            n: self.problem.n,
            p: self.problem.p,
            mu: self.problem.mu,
            c: 1.0,
            include_gradient_term: self.problem.include_gradient_term,
        }
    }

    fn grid(&self, n: usize) -> Result<Arc<RadialGrid>> {
        Ok(Arc::new(make_grid(n, self.grid.r_max, self.grid.m, self.grid.stretch)?))
    }

    fn constants_on(&self, grid: &Arc<RadialGrid>, p: f64) -> Result<BestConstants> {
        BestConstants::compute_on(grid, p, &self.constants.quad, &self.constants.gn)
    }

    /// Resolves the mass; without `c` or `c_over_c_star`, subcritical runs take `c*/2` and the rest 1.
    fn params_with_mass(&self, consts: &BestConstants) -> Result<ProblemParams> {
        let mut params = self.base_params();
        params.c = match (self.problem.c, self.problem.c_over_c_star) {
            (Some(c), _) => c,
            (None, Some(f)) => f * c_star_of(&params, consts)?,
            (None, None) if params.regime() == MassRegime::Subcritical && params.mu > 0.0 => 0.5 * c_star_of(&params, consts)?,
            (None, None) => 1.0,
        };
        params.validate()?;
        Ok(params)
    }
}

fn c_star_of(params: &ProblemParams, consts: &BestConstants) -> Result<f64> {
    if params.regime() != MassRegime::Subcritical || params.mu <= 0.0 {
        return Err(Error::Regime("c* exists only for p < 2 + 8/N and mu > 0".into()));
    }
    c_star(params, consts)
}

impl ProblemParams {
    /// [`ProblemParams::validate`] with a placeholder mass.
    fn validate_skip_mass(&self) -> Result<()> {
        ProblemParams { c: 1.0, ..*self }.validate()
    }
}

#[derive(Debug, Parser)]
#[command(name = "bnls", version, about = "Normalized solutions of the mass-constrained biharmonic Schrödinger equation", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Space dimension (N >= 5).
    #[arg(long = "N", global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub p: Option<f64>,
    /// Coefficient of the subcritical term; `multiplicity` also accepts `auto`.
    #[arg(long, global = true)]
    pub mu: Option<MuSetting>,
    /// Prescribed mass.
    #[arg(long, global = true, conflicts_with = "c_frac")]
    pub c: Option<f64>,
    /// Prescribed mass as a fraction of c*.
    #[arg(long, global = true)]
    pub c_frac: Option<f64>,
    /// Drop the gradient term from the energy.
    #[arg(long, global = true)]
    pub no_grad_term: bool,
    /// Outer radius of the grid.
    #[arg(long = "R", global = true)]
    pub r_max: Option<f64>,
    /// Number of grid intervals.
    #[arg(long = "M", id = "grid_m", global = true)]
    pub m: Option<usize>,
    #[arg(long, global = true)]
    pub stretch: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "BNLS_OUT_DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Write wall times as 0 for byte-identical reruns.
    #[arg(long, global = true)]
    pub no_timing: bool,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mass thresholds, truncation radius and best constants.
    Thresholds,
    /// Solve for a normalized solution.
    Solve(SolveArgs),
    /// Evaluate the energy of a stored field.
    Energy {
        /// Solution file (JSON) or binary field.
        #[arg(long)]
        load: PathBuf,
    },
    /// Norms of cut-off bubbles and their decay orders.
    Bubbles {
        /// `first:last:geometric[:count]` or a comma-separated list.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long, value_enum)]
        method: Option<BubbleMethod>,
    },
    /// Disjoint-bump family and the thresholds behind the multiplicity result.
    Multiplicity {
        /// Number of bumps.
        #[arg(long = "m", id = "family_m")]
        m: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Solve over a parameter lattice.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub regime: Option<RegimeChoice>,
    /// Warm start from a solution file on the same grid (supercritical only).
    #[arg(long)]
    pub start: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long = "Ns", value_delimiter = ',')]
    pub ns: Vec<usize>,
    #[arg(long = "ps", value_delimiter = ',')]
    pub ps: Vec<f64>,
    #[arg(long = "mus", value_delimiter = ',')]
    pub mus: Vec<f64>,
    #[arg(long = "cs", value_delimiter = ',')]
    pub cs: Vec<f64>,
    #[arg(long = "c-fracs", value_delimiter = ',')]
    pub c_fracs: Vec<f64>,
}

/// Merges defaults, the config file and the flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    let pr = &mut cfg.problem;
    if let Some(n) = g.n {
        pr.n = n;
    }
    if let Some(p) = g.p {
        pr.p = p;
    }
    match (g.mu, &cli.command) {
        (Some(MuSetting::Value(v)), Command::Multiplicity { .. }) => {
            pr.mu = v;
            cfg.multiplicity.mu = MuSetting::Value(v);
        }
        (Some(MuSetting::Value(v)), _) => pr.mu = v,
        (Some(MuSetting::Auto), Command::Multiplicity { .. }) => cfg.multiplicity.mu = MuSetting::Auto,
        (Some(MuSetting::Auto), _) => return Err(Error::InvalidParams("--mu auto is only meaningful for multiplicity".into())),
        (None, _) => {}
    }
    if let Some(c) = g.c {
        pr.c = Some(c);
        pr.c_over_c_star = None;
    }
    if let Some(f) = g.c_frac {
        pr.c_over_c_star = Some(f);
        pr.c = None;
    }
    if g.no_grad_term {
        pr.include_gradient_term = false;
        cfg.sweep.include_gradient_term = false;
    }
    if let Some(r) = g.r_max {
        cfg.grid.r_max = r;
    }
    if let Some(m) = g.m {
        cfg.grid.m = m;
    }
    if let Some(s) = g.stretch {
        cfg.grid.stretch = s;
    }
    if let Some(s) = g.seed {
        cfg.solver.seed = s;
    }
    if let Some(k) = g.max_iters {
        cfg.solver.max_iters = k;
    }
    if let Some(o) = &g.out {
        cfg.output.dir = o.clone();
    }
    if let Some(f) = g.format {
        cfg.output.format = f;
    }
    if g.no_timing {
        cfg.output.timing = false;
    }
    match &cli.command {
        Command::Solve(a) => {
            if let Some(r) = a.regime {
                cfg.solve.regime = r;
            }
            if let Some(s) = &a.start {
                cfg.solve.start = Some(s.clone());
            }
        }
        Command::Bubbles { eps, method } => {
            if let Some(e) = eps {
                cfg.bubbles.eps = e.clone();
            }
            if let Some(m) = method {
                cfg.bubbles.method = *m;
            }
        }
        Command::Multiplicity { m, samples } => {
            if let Some(m) = m {
                cfg.multiplicity.m = *m;
            }
            if let Some(s) = samples {
                cfg.multiplicity.samples = *s;
            }
        }
        Command::Sweep(a) => {
            let sw = &mut cfg.sweep;
            let set = |dst: &mut Vec<f64>, src: &Vec<f64>| {
                if !src.is_empty() {
                    *dst = src.clone();
                }
            };
            if !a.ns.is_empty() {
                sw.n = a.ns.clone();
            }
            set(&mut sw.p, &a.ps);
            set(&mut sw.mu, &a.mus);
            set(&mut sw.c, &a.cs);
            set(&mut sw.c_over_c_star, &a.c_fracs);
        }
        Command::Thresholds | Command::Energy { .. } => {}
    }
    Ok(cfg)
}

/// Maps an error to its documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::InvalidParams(_) | Error::Regime(_) | Error::Infeasible(_) | Error::Constraint(_) | Error::Format(_) | Error::Json(_) | Error::Csv(_) => {
            EXIT_CONFIG
        }
        Error::Quadrature(_)
        | Error::Bracket(_)
        | Error::FiberNotUnique { .. }
        | Error::Degenerate(_)
        | Error::Stagnation(_)
        | Error::LinAlg(_)
        | Error::Shared(_) => EXIT_NO_CONVERGENCE,
    }
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn key_value_csv(rows: &[(&str, String)]) -> Result<Vec<u8>> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["key", "value"])?;
        for (k, v) in rows {
            w.write_record([*k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// Stored field plus the parameters it was computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub schema_version: u32,
    pub params: ProblemParams,
    /// Also accepts a full solver report, whose field is named `u`.
    #[serde(alias = "u")]
    pub field: RadialFieldData,
}

/// Reads a solution file, or a bare binary field (which carries no parameters).
pub fn load_solution(path: &Path) -> Result<(Option<ProblemParams>, RadialFieldData)> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"BNLS") {
        return Ok((None, RadialFieldData::from_bytes(&bytes)?));
    }
    let s: SolutionFile = serde_json::from_slice(&bytes)?;
    Ok((Some(s.params), s.field))
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdsOutput {
    pub schema_version: u32,
    pub params: ProblemParams,
    pub grid: GridSpec,
    pub constants: BestConstants,
    pub thresholds: ThresholdReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyOutput {
    pub schema_version: u32,
    pub params: ProblemParams,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub lambda: f64,
    pub mass: f64,
    pub seminorm_sum: f64,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct BubblesOutput {
    pub schema_version: u32,
    pub params: ProblemParams,
    pub epsilons: Vec<f64>,
    pub norms: Vec<BubbleNorms>,
    pub fits: Vec<AsymptoticFit>,
    /// Present when `p` lies above `2 + 8/N`.
    pub ratio: Option<RatioTrend>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplicityOutput {
    pub schema_version: u32,
    pub grid: GridSpec,
    pub family: MultiplicityFamily,
    pub checks: FamilyChecks,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FamilyChecks {
    pub mu_finite: bool,
    pub mu_nondecreasing: bool,
    pub sup_negative: bool,
    pub mass_within_tolerance: bool,
    pub inside_vr: bool,
    pub invariants_hold: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutput<'a> {
    pub schema_version: u32,
    pub grid: GridSpec,
    pub spec: SweepSpec,
    pub rows: &'a [crate::solvers::SweepRow],
}

/// Absolute bound on `|mass − c|` over sampled family members.
pub const FAMILY_MASS_TOL: f64 = 1e-12;

pub fn family_checks(f: &MultiplicityFamily) -> FamilyChecks {
    let mu_finite = f.levels.iter().all(|l| l.mu.is_finite() && l.mu > 0.0);
    let mu_nondecreasing = f.levels.windows(2).all(|w| w[0].mu <= w[1].mu);
    let sup_negative = f.levels.iter().all(|l| l.sup_i_at_twice_mu < 0.0);
    let mass_within_tolerance = f.levels.iter().all(|l| l.max_mass_error <= FAMILY_MASS_TOL);
    let inside_vr = f.levels.iter().all(|l| l.max_seminorm < f.r_star_sq);
    FamilyChecks {
        mu_finite,
        mu_nondecreasing,
        sup_negative,
        mass_within_tolerance,
        inside_vr,
        invariants_hold: mu_finite && mu_nondecreasing && sup_negative && mass_within_tolerance && inside_vr,
    }
}

/// Parses `first:last:geometric[:count]` (halving when no count is given) or `a,b,c,...`.
pub fn parse_epsilons(spec: &str) -> Result<Vec<f64>> {
    let bad = |what: &str| Error::InvalidParams(format!("epsilon range {spec:?}: {what}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [list] => list.split(',').map(num).collect(),
        [a, b, "geometric"] => {
            let (a, b) = (num(a)?, num(b)?);
            if !(a > b && b > 0.0) {
                return Err(bad("need first > last > 0"));
            }
            let count = (a / b).log2().round() as usize + 1;
            geometric_epsilons(a, b, count)
        }
        [a, b, "geometric", k] => {
            let k = k.trim().parse::<usize>().map_err(|_| bad("count is not an integer"))?;
            geometric_epsilons(num(a)?, num(b)?, k)
        }
        _ => Err(bad("expected first:last:geometric[:count] or a comma-separated list")),
    }
}

/// Energy along the fiber of `u`, for plotting.
fn fiber_curve_csv(u: &RadialField, params: &ProblemParams) -> Result<Vec<u8>> {
    let fc = fiber_coefficients(u, params);
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["s", "energy", "derivative"])?;
        for k in -300..=300 {
            let s = k as f64 * 0.01;
            w.write_record([format!("{s:.2}"), format!("{:e}", fiber_energy(&fc, s, params)), format!("{:e}", fiber_derivative(&fc, s, params))])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn trace_csv(r: &SolverReport) -> Result<Vec<u8>> {
    csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["iter", "energy_before", "energy_after", "recentred", "residual", "step"])?;
        for t in &r.trace {
            w.write_record([
                t.iter.to_string(),
                format!("{:e}", t.before),
                format!("{:e}", t.after),
                t.recentred.to_string(),
                format!("{:e}", t.residual),
                format!("{:e}", t.step),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

struct Ctx {
    cfg: RunConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output.dir.join(name)
    }

    fn csv(&self) -> bool {
        self.cfg.output.format == Format::Csv
    }
}

fn cmd_thresholds(ctx: &Ctx) -> Result<i32> {
    let cfg = &ctx.cfg;
    let grid = cfg.grid(cfg.problem.n)?;
    let consts = cfg.constants_on(&grid, cfg.problem.p)?;
    let params = cfg.params_with_mass(&consts)?;
    let rep = thresholds(&params, &consts)?;
    let rows: Vec<(&str, String)> = vec![
        ("N", params.n.to_string()),
        ("p", params.p.to_string()),
        ("mu", params.mu.to_string()),
        ("c", format!("{:e}", params.c)),
        ("regime", crate::solvers::kebab(&rep.exponents.regime)),
        ("S", format!("{:e}", rep.s)),
        ("C_Np", format!("{:e}", rep.c_np)),
        ("c_star", opt(rep.c_star)),
        ("calE", opt(rep.cal_e)),
        ("r_c", opt(rep.r_c)),
        ("g_c_at_r_c", opt(rep.g_c_at_r_c)),
        ("r_star", opt(rep.r_star)),
        ("r_tilde", format!("{:e}", rep.r_tilde)),
        ("r_star_margin", opt(rep.r_star.map(|r| rep.r_tilde - r))),
        ("K", opt(rep.k)),
        ("level_threshold", format!("{:e}", rep.level_threshold)),
    ];
    for (k, v) in &rows {
        if !v.is_empty() {
            println!("{k:<16} {v}");
        }
    }
    if ctx.csv() {
        write_atomic(&ctx.path("thresholds.csv"), &key_value_csv(&rows)?)?;
    } else {
        let out = ThresholdsOutput { schema_version: REPORT_SCHEMA_VERSION, params, grid: cfg.grid, constants: consts, thresholds: rep };
        write_json(&ctx.path("thresholds.json"), &out)?;
    }
    Ok(EXIT_OK)
}

fn cmd_solve(ctx: &Ctx) -> Result<i32> {
    let cfg = &ctx.cfg;
    let grid = cfg.grid(cfg.problem.n)?;
    let consts = cfg.constants_on(&grid, cfg.problem.p)?;
    let params = cfg.params_with_mass(&consts)?;
    let supercritical = match cfg.solve.regime {
        RegimeChoice::Auto => params.regime() == MassRegime::Supercritical,
        RegimeChoice::Subcritical => false,
        RegimeChoice::Supercritical => true,
    };
    let mut report = if supercritical {
        let start = match &cfg.solve.start {
            Some(path) => {
                let (_, data) = load_solution(path)?;
                let field = data.into_field()?;
                if field.grid().dim() != grid.dim() || field.grid().nodes() != grid.nodes() {
                    return Err(Error::InvalidParams("warm start was computed on a different grid".into()));
                }
                Some(RadialField::new(grid.clone(), field.into_values()))
            }
            None => None,
        };
        mountain_pass_from(&params, &grid, &consts, &cfg.solver, start.as_ref())?
    } else {
        if cfg.solve.start.is_some() {
            return Err(Error::InvalidParams("warm starts are only supported by the supercritical solver".into()));
        }
        minimize_subcritical(&params, &grid, &consts, &cfg.solver)?
    };
    if !cfg.output.timing {
        report.wall_time_s = 0.0;
    }
    let solution = SolutionFile { schema_version: REPORT_SCHEMA_VERSION, params, field: report.u.to_data() };
    write_json(&ctx.path("report.json"), &report)?;
    write_json(&ctx.path("solution.json"), &solution)?;
    write_atomic(&ctx.path("trace.csv"), &trace_csv(&report)?)?;
    write_atomic(&ctx.path("fiber.csv"), &fiber_curve_csv(&report.u, &params)?)?;
    println!("status           {}", crate::solvers::kebab(&report.status));
    println!("iterations       {}", report.iters);
    println!("I                {:.12e}", report.i);
    println!("P                {:.3e}", report.p);
    println!("lambda           {:.12e}", report.lambda);
    println!("residual         {:.3e}", report.residual);
    println!("invariants_hold  {}", report.constraint_checks.invariants_hold);
    Ok(if !report.converged {
        EXIT_NO_CONVERGENCE
    } else if !report.constraint_checks.invariants_hold {
        EXIT_INVARIANT
    } else {
        EXIT_OK
    })
}

/// Stored parameters, overridden by whichever problem flags were given explicitly.
fn energy_params(stored: Option<ProblemParams>, g: &GlobalArgs, n_field: usize, mass: f64) -> Result<ProblemParams> {
    let mut params = stored.unwrap_or(ProblemParams { n: n_field, p: f64::NAN, mu: f64::NAN, c: mass, include_gradient_term: true });
    if let Some(n) = g.n {
        params.n = n;
    }
    if let Some(p) = g.p {
        params.p = p;
    }
    match g.mu {
        Some(MuSetting::Value(mu)) => params.mu = mu,
        Some(MuSetting::Auto) => return Err(Error::InvalidParams("energy needs a numeric --mu".into())),
        None => {}
    }
    if let Some(c) = g.c {
        params.c = c;
    }
    if g.no_grad_term {
        params.include_gradient_term = false;
    }
    if params.n != n_field {
        return Err(Error::InvalidParams(format!("field lives in N = {n_field}, parameters say N = {}", params.n)));
    }
    if params.p.is_nan() || params.mu.is_nan() {
        return Err(Error::InvalidParams("binary fields carry no parameters; pass --p and --mu".into()));
    }
    params.validate()?;
    Ok(params)
}

fn cmd_energy(ctx: &Ctx, g: &GlobalArgs, load: &Path) -> Result<i32> {
    let (stored, data) = load_solution(load)?;
    let u = data.into_field()?;
    let params = energy_params(stored, g, u.grid().dim(), u.mass())?;
    let e = energy(&u, &params);
    let out = EnergyOutput {
        schema_version: REPORT_SCHEMA_VERSION,
        params,
        i: e.i,
        p: e.p,
        lambda: e.lambda_est,
        mass: e.mass,
        seminorm_sum: seminorm_sum(&u),
        energy: e,
    };
    println!("I                {:.15e}", out.i);
    println!("P                {:.6e}", out.p);
    println!("lambda           {:.15e}", out.lambda);
    println!("mass             {:.15e}", out.mass);
    if ctx.csv() {
        let rows = [
            ("I", format!("{:e}", out.i)),
            ("P", format!("{:e}", out.p)),
            ("lambda", format!("{:e}", out.lambda)),
            ("mass", format!("{:e}", out.mass)),
            ("seminorm_sum", format!("{:e}", out.seminorm_sum)),
        ];
        write_atomic(&ctx.path("energy.csv"), &key_value_csv(&rows)?)?;
    } else {
        write_json(&ctx.path("energy.json"), &out)?;
    }
    Ok(EXIT_OK)
}

fn cmd_bubbles(ctx: &Ctx) -> Result<i32> {
    let cfg = &ctx.cfg;
    let epsilons = parse_epsilons(&cfg.bubbles.eps)?;
    let mut params = cfg.base_params();
    params.c = cfg.problem.c.unwrap_or(1.0);
    params.validate()?;
    if cfg.problem.c_over_c_star.is_some() {
        return Err(Error::InvalidParams("bubbles takes an absolute mass (--c)".into()));
    }
    let method = match cfg.bubbles.method {
        BubbleMethod::Quadrature => NormMethod::Quadrature(cfg.constants.quad),
        BubbleMethod::Grid => NormMethod::Grid(cfg.grid(params.n)?),
    };
    let fits = fit_orders(&params, &epsilons, &method, &cfg.constants.quad)?;
    let norms = norms_over(&params, &epsilons, &method)?;
    let ratio = (params.regime() == MassRegime::Supercritical && params.mu > 0.0)
        .then(|| ratio_vanishing_check(&params, &epsilons, &method, &cfg.constants.quad))
        .transpose()?;
    let ratio_ok = ratio.as_ref().is_none_or(|r| r.ratio_strictly_decreasing && r.combined_negative_at_smallest);
    let pass = fits.iter().all(|f| f.pass) && ratio_ok;
    for f in &fits {
        println!(
            "{:<12} fitted {:>8.4}  expected {:>6.3}  {}",
            crate::solvers::kebab(&f.quantity),
            f.fitted_order,
            f.expected_order,
            if f.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(r) = &ratio {
        println!("ratio decreasing {}  combined<0 at smallest eps {}", r.ratio_strictly_decreasing, r.combined_negative_at_smallest);
    }
    write_atomic(&ctx.path("bubble_fits.csv"), &csv_bytes(|b| write_fits_csv(&fits, b))?)?;
    let out = BubblesOutput { schema_version: REPORT_SCHEMA_VERSION, params, epsilons, norms, fits, ratio, pass };
    write_json(&ctx.path("bubbles.json"), &out)?;
    Ok(if pass { EXIT_OK } else { EXIT_INVARIANT })
}

fn cmd_multiplicity(ctx: &Ctx) -> Result<i32> {
    let cfg = &ctx.cfg;
    let grid = cfg.grid(cfg.problem.n)?;
    let consts = cfg.constants_on(&grid, cfg.problem.p)?;
    let mut sub = cfg.clone();
    sub.problem.mu = match cfg.multiplicity.mu {
        MuSetting::Auto => 1.0,
        MuSetting::Value(v) => v,
    };
    let params = sub.params_with_mass(&consts)?;
    let settings = FamilySettings { samples: cfg.multiplicity.samples, ..FamilySettings::default() };
    let family = genus_family(&params, &grid, &consts, cfg.multiplicity.m, &settings)?;
    let checks = family_checks(&family);
    for l in &family.levels {
        println!("k = {}  mu_k = {:.6e}  sup I at 2 mu_k = {:.6e}", l.k, l.mu, l.sup_i_at_twice_mu);
    }
    let levels_csv = csv_bytes(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["k", "samples", "alpha", "beta", "mu", "sup_I_at_twice_mu", "max_mass_error", "max_seminorm"])?;
        for l in &family.levels {
            w.write_record([
                l.k.to_string(),
                l.samples.to_string(),
                format!("{:e}", l.alpha),
                format!("{:e}", l.beta),
                format!("{:e}", l.mu),
                format!("{:e}", l.sup_i_at_twice_mu),
                format!("{:e}", l.max_mass_error),
                format!("{:e}", l.max_seminorm),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    write_atomic(&ctx.path("multiplicity_levels.csv"), &levels_csv)?;
    let out = MultiplicityOutput { schema_version: REPORT_SCHEMA_VERSION, grid: cfg.grid, family, checks };
    write_json(&ctx.path("multiplicity.json"), &out)?;
    Ok(if checks.invariants_hold { EXIT_OK } else { EXIT_INVARIANT })
}

fn cmd_sweep(ctx: &Ctx) -> Result<i32> {
    let cfg = &ctx.cfg;
    let spec = &cfg.sweep;
    if spec.n.is_empty() || spec.p.is_empty() || spec.mu.is_empty() || (spec.c.is_empty() && spec.c_over_c_star.is_empty()) {
        return Err(Error::InvalidParams("sweep needs N, p, mu and at least one of c, c_over_c_star".into()));
    }
    let mut outcome = sweep(spec, &cfg.grid, &cfg.solver, &(cfg.constants.quad, cfg.constants.gn))?;
    if !cfg.output.timing {
        outcome.rows.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        outcome.reports.iter_mut().flatten().for_each(|r| r.wall_time_s = 0.0);
    }
    write_atomic(&ctx.path("sweep.csv"), &csv_bytes(|b| outcome.write_csv(b))?)?;
    if !ctx.csv() {
        for (k, r) in outcome.reports.iter().enumerate() {
            if let Some(r) = r {
                write_json(&ctx.path(&format!("runs/run-{k:04}.json")), r)?;
            }
        }
        let summary = SweepOutput { schema_version: REPORT_SCHEMA_VERSION, grid: cfg.grid, spec: spec.clone(), rows: &outcome.rows };
        write_json(&ctx.path("sweep.json"), &summary)?;
    }
    let total = outcome.rows.len();
    let converged = outcome.rows.iter().filter(|r| r.converged).count();
    let hold = outcome.reports.iter().flatten().filter(|r| r.constraint_checks.invariants_hold).count();
    println!("runs {total}  converged {converged}  invariants hold {hold}");
    Ok(if converged < total {
        EXIT_NO_CONVERGENCE
    } else if hold < total {
        EXIT_INVARIANT
    } else {
        EXIT_OK
    })
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(cli)?;
    if cli.global.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(EXIT_OK);
    }
    cfg.validate(&cli.command)?;
    let ctx = Ctx { cfg };
    match &cli.command {
        Command::Thresholds => cmd_thresholds(&ctx),
        Command::Solve(_) => cmd_solve(&ctx),
        Command::Energy { load } => cmd_energy(&ctx, &cli.global, load),
        Command::Bubbles { .. } => cmd_bubbles(&ctx),
        Command::Multiplicity { .. } => cmd_multiplicity(&ctx),
        Command::Sweep(_) => cmd_sweep(&ctx),
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
