//! Scenario configuration, orchestration of a full run, the closed-form `verify`
//! suite and the gain-quadrature benchmark behind the `kb` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    gradient_gronwall_check, lgamma_decay_check, potential_split, q_estimate_sweep, stability_compare, validate_exponents,
    velocity_gradient_check, weak_norm_closed_form, weak_norm_over_balls, weighted_gradient_check, Verdict,
};
use crate::barriers::{
    beginning_condition_check, inequality_sample_points, k_alpha_beta, sandwich_check, sandwich_parameter_problems, vacuum_fixed_point,
    BarrierDiagnostics, BarrierOde, MaxwellianBarrier, VacuumBarrier,
};
use crate::collision::{post_collision_unchecked, trajectory_identity_residual, CollisionQuadrature};
use crate::error::{KbError, Result};
use crate::kernel::{angular_norm, sphere_area, AngularKernel, CollisionKernel, KernelMode};
use crate::phase::{norm2, write_fields_csv, Frame, MaxwellianSpec, PhaseField, PhaseGrid, Point, MAX_DIM};
use crate::quad::{integrate_with_breaks, QuadTolerance};
use crate::solver::{solve_with_refinement, vacuum_beginning_condition_check, BarrierPair, MildResidual, Solution, SolverOptions};

/// Checks that may be listed under `[checks] list`.
pub const KNOWN_CHECKS: [&str; 6] = [
    "lgamma_decay",
    "gradient_gronwall",
    "velocity_gradient",
    "weighted_gradient",
    "stability",
    "q_estimate",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub kernel: KernelConfig,
    pub grid: GridConfig,
    pub regime: RegimeConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub lambda: f64,
    pub dim: usize,
    #[serde(default)]
    pub angular: AngularConfig,
}

/// `form` is one of `constant` (uses `value`), `power` (`exponent`) or
/// `tabulated` (`samples`); `symmetrize` folds the kernel onto `s <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngularConfig {
    pub form: String,
    pub value: Option<f64>,
    pub exponent: Option<f64>,
    pub samples: Option<Vec<f64>>,
    #[serde(default)]
    pub symmetrize: bool,
}

impl Default for AngularConfig {
    fn default() -> Self {
        Self {
            form: "constant".into(),
            value: Some(1.0),
            exponent: None,
            samples: None,
            symmetrize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "Lx")]
    pub lx: Option<f64>,
    #[serde(rename = "Lv")]
    pub lv: Option<f64>,
    #[serde(rename = "Nx")]
    pub nx: usize,
    #[serde(rename = "Nv")]
    pub nv: usize,
    #[serde(rename = "Nsigma")]
    pub n_sigma: usize,
    #[serde(rename = "Nt")]
    pub nt: usize,
    #[serde(rename = "T")]
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub near_vacuum: Option<VacuumConfig>,
    pub near_maxwellian: Option<MaxwellianConfig>,
}

/// Datum `f₀ = A·exp(-α_d|x|² - β|v|²)` with `A` given directly or as a fraction of
/// the smallness threshold `1/(4k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VacuumConfig {
    pub alpha: f64,
    pub beta: f64,
    pub amplitude: Option<f64>,
    pub fraction: Option<f64>,
    /// Spatial rate of the datum, defaults to `alpha`.
    pub datum_alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl EnvelopeConfig {
    /// Lab-frame Maxwellian `c·exp(-α|x-v|² - β|v|²)`, the barrier convention at `t = 0`.
    fn spec(&self) -> MaxwellianSpec {
        MaxwellianSpec {
            c: self.c,
            alpha: self.alpha,
            beta: self.beta,
            shift: 1.0,
        }
    }
}

/// The datum is the target Maxwellian `M` itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxwellianConfig {
    #[serde(rename = "M")]
    pub target: EnvelopeConfig,
    #[serde(rename = "M1")]
    pub m1: EnvelopeConfig,
    #[serde(rename = "M2")]
    pub m2: EnvelopeConfig,
    pub eps: f64,
    #[serde(default = "default_inequality_points")]
    pub inequality_points: usize,
    #[serde(default = "default_inequality_t_max")]
    pub inequality_t_max: f64,
}

fn default_inequality_points() -> usize {
    12
}

fn default_inequality_t_max() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    #[serde(default)]
    pub list: Vec<String>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_delta")]
    pub stability_delta: f64,
    /// `(p, q, r)` for the gain/loss estimate; defaults to `(2, n/(n-λ), 2)`.
    pub q_exponents: Option<[f64; 3]>,
    #[serde(default = "default_q_pairs")]
    pub q_pairs: usize,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self {
            list: Vec::new(),
            p: default_p(),
            stability_delta: default_delta(),
            q_exponents: None,
            q_pairs: default_q_pairs(),
        }
    }
}

fn default_p() -> f64 {
    2.0
}

fn default_delta() -> f64 {
    1e-3
}

fn default_q_pairs() -> usize {
    6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "default_true")]
    pub auto_refine: bool,
    /// Number of solution slices written to `fields.csv` besides the first.
    #[serde(default = "default_field_slices")]
    pub field_slices: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            tol: d.tol,
            max_iter: d.max_iter,
            residual_tol: d.residual_tol,
            auto_refine: d.auto_refine,
            field_slices: default_field_slices(),
        }
    }
}

fn default_tol() -> f64 {
    SolverOptions::default().tol
}

fn default_max_iter() -> usize {
    SolverOptions::default().max_iter
}

fn default_residual_tol() -> f64 {
    SolverOptions::default().residual_tol
}

fn default_true() -> bool {
    true
}

fn default_field_slices() -> usize {
    8
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| KbError::Config(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KbError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            residual_tol: self.solver.residual_tol,
            auto_refine: self.solver.auto_refine,
        }
    }
}

/// Validated regime with its barrier and trajectory-frame datum.
#[derive(Debug, Clone)]
pub enum Regime {
    Vacuum { barrier: VacuumBarrier, datum: MaxwellianSpec },
    Maxwellian { barrier: Box<MaxwellianBarrier> },
}

/// A configuration that passed validation, with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub kernel: CollisionKernel,
    pub grid: PhaseGrid,
    pub regime: Regime,
}

impl Scenario {
    pub fn pair(&self) -> BarrierPair {
        match &self.regime {
            Regime::Vacuum { barrier, .. } => BarrierPair::Vacuum(*barrier),
            Regime::Maxwellian { barrier } => BarrierPair::Maxwellian(barrier.clone()),
        }
    }

    /// Trajectory-frame datum at the start time, scaled by `scale`.
    pub fn datum(&self, scale: f64) -> PhaseField {
        match &self.regime {
            Regime::Vacuum { datum, .. } => PhaseField::maxwellian(self.grid, 0.0, Frame::Trajectory, &datum.with_amplitude(scale * datum.c)),
            Regime::Maxwellian { barrier } => {
                let t = &barrier.target;
                let m = MaxwellianSpec::unit(t.alpha, t.beta).with_amplitude(scale * t.c);
                PhaseField::maxwellian(self.grid, 1.0, Frame::Trajectory, &m)
            }
        }
    }

    /// Reference Maxwellian for frame changes, fixed in the trajectory frame.
    pub fn reference(&self) -> MaxwellianSpec {
        match &self.regime {
            Regime::Vacuum { barrier, .. } => MaxwellianSpec::unit(barrier.alpha, barrier.beta),
            Regime::Maxwellian { barrier } => MaxwellianSpec::unit(barrier.target.alpha, barrier.target.beta),
        }
    }

    pub fn quadrature(&self) -> Result<CollisionQuadrature> {
        CollisionQuadrature::new(self.kernel.clone(), self.grid, self.config.grid.n_sigma, self.pair().interpolation_weight())
    }
}

fn angular_kernel(a: &AngularConfig, problems: &mut Vec<String>) -> Option<AngularKernel> {
    let base = match a.form.as_str() {
        "constant" => Some(AngularKernel::Constant(a.value.unwrap_or(1.0))),
        "power" => match a.exponent {
            Some(e) => Some(AngularKernel::Power { exponent: e }),
            None => {
                problems.push("kernel.angular.exponent is required for the power form".into());
                None
            }
        },
        "tabulated" => match &a.samples {
            Some(s) => Some(AngularKernel::Tabulated(s.clone())),
            None => {
                problems.push("kernel.angular.samples is required for the tabulated form".into());
                None
            }
        },
        other => {
            problems.push(format!("kernel.angular.form must be constant, power or tabulated, got {other:?}"));
            None
        }
    }?;
    let b = if a.symmetrize { crate::kernel::symmetrize(&base) } else { base };
    match b.validate() {
        Ok(()) => Some(b),
        Err(e) => {
            problems.push(format!("kernel.angular: {e}"));
            None
        }
    }
}

fn positive(name: &str, v: f64, problems: &mut Vec<String>) {
    if !(v > 0.0 && v.is_finite()) {
        problems.push(format!("{name} must be finite and > 0, got {v}"));
    }
}

/// Checks the whole configuration and collects every violation. The near-vacuum
/// smallness condition is reported as its own error when it is the only problem.
pub fn validate(config: &ScenarioConfig) -> Result<Scenario> {
    let mut problems = Vec::new();
    if config.scenario.is_empty() || config.scenario.contains(['/', '\\']) || config.scenario == "." || config.scenario == ".." {
        problems.push(format!("scenario must be a plain directory name, got {:?}", config.scenario));
    }

    let k = &config.kernel;
    let n = k.dim as f64;
    if !(2..=3).contains(&k.dim) {
        problems.push(format!("kernel.dim must be 2 or 3, got {}", k.dim));
    } else if !(k.lambda.is_finite() && k.lambda >= 0.0 && k.lambda < n - 1.0) {
        problems.push(format!(
            "kernel.lambda = {} must satisfy 0 <= lambda < n - 1 = {}: the kernel must be a soft potential whose relative-speed singularity stays integrable",
            k.lambda,
            n - 1.0
        ));
    }
    let angular = angular_kernel(&k.angular, &mut problems);

    let g = &config.grid;
    if g.nx < 4 || g.nv < 4 {
        problems.push(format!("grid.Nx and grid.Nv must be >= 4, got {} and {}", g.nx, g.nv));
    }
    if g.n_sigma < 8 || (k.dim == 2 && g.n_sigma % 2 != 0) {
        problems.push(format!("grid.Nsigma must be >= 8 (and even in two dimensions), got {}", g.n_sigma));
    }
    if g.nt < 2 {
        problems.push(format!("grid.Nt must be >= 2, got {}", g.nt));
    }
    positive("grid.T", g.t_end, &mut problems);
    if let Some(lx) = g.lx {
        positive("grid.Lx", lx, &mut problems);
    }
    if let Some(lv) = g.lv {
        positive("grid.Lv", lv, &mut problems);
    }

    let r = &config.regime;
    let mode = match (&r.near_vacuum, &r.near_maxwellian) {
        (Some(v), None) => {
            positive("regime.near_vacuum.alpha", v.alpha, &mut problems);
            positive("regime.near_vacuum.beta", v.beta, &mut problems);
            match (v.amplitude, v.fraction) {
                (Some(a), None) => positive("regime.near_vacuum.amplitude", a, &mut problems),
                (None, Some(f)) => {
                    if !(f > 0.0 && f <= 1.0) {
                        problems.push(format!("regime.near_vacuum.fraction must lie in (0, 1], got {f}"));
                    }
                }
                _ => problems.push("regime.near_vacuum needs exactly one of amplitude or fraction".into()),
            }
            if let Some(da) = v.datum_alpha {
                if !(da >= v.alpha && da.is_finite()) {
                    problems.push(format!(
                        "regime.near_vacuum.datum_alpha = {da} must be >= alpha = {} or the datum has infinite weighted norm",
                        v.alpha
                    ));
                }
            }
            Some(KernelMode::NearVacuum)
        }
        (None, Some(m)) => {
            for (name, e) in [("M", &m.target), ("M1", &m.m1), ("M2", &m.m2)] {
                positive(&format!("regime.near_maxwellian.{name}.c"), e.c, &mut problems);
                positive(&format!("regime.near_maxwellian.{name}.alpha"), e.alpha, &mut problems);
                if !(e.beta >= 0.0 && e.beta.is_finite()) {
                    problems.push(format!("regime.near_maxwellian.{name}.beta must be finite and >= 0, got {}", e.beta));
                }
            }
            positive("regime.near_maxwellian.eps", m.eps, &mut problems);
            for p in sandwich_parameter_problems(&m.target.spec(), &m.m1.spec(), &m.m2.spec(), m.eps) {
                problems.push(format!("regime.near_maxwellian: {p}"));
            }
            if m.inequality_points == 0 {
                problems.push("regime.near_maxwellian.inequality_points must be >= 1".into());
            }
            if !(m.inequality_t_max >= 1.0 && m.inequality_t_max.is_finite()) {
                problems.push(format!("regime.near_maxwellian.inequality_t_max must be >= 1, got {}", m.inequality_t_max));
            }
            if m.m2.beta == 0.0 && g.lv.is_none() {
                problems.push("grid.Lv is required when M2 has beta = 0".into());
            }
            Some(KernelMode::NearMaxwellian)
        }
        _ => {
            problems.push("exactly one of regime.near_vacuum or regime.near_maxwellian must be given".into());
            None
        }
    };

    let c = &config.checks;
    for name in &c.list {
        if !KNOWN_CHECKS.contains(&name.as_str()) {
            problems.push(format!("checks.list: unknown check {name:?}, expected one of {}", KNOWN_CHECKS.join(", ")));
        }
    }
    if !(c.p >= 1.0) {
        problems.push(format!("checks.p must be >= 1, got {}", c.p));
    }
    positive("checks.stability_delta", c.stability_delta, &mut problems);
    if let (Some([p, q, rr]), true) = (c.q_exponents, (2..=3).contains(&k.dim)) {
        if let Err(e) = validate_exponents(k.dim, k.lambda, p, q, rr) {
            problems.push(format!("checks.q_exponents: {e}"));
        }
    }
    if c.q_pairs == 0 {
        problems.push("checks.q_pairs must be >= 1".into());
    }
    let s = &config.solver;
    positive("solver.tol", s.tol, &mut problems);
    positive("solver.residual_tol", s.residual_tol, &mut problems);
    if s.max_iter == 0 {
        problems.push("solver.max_iter must be >= 1".into());
    }

    if !problems.is_empty() {
        return Err(KbError::Config(problems));
    }
    let (Some(angular), Some(mode)) = (angular, mode) else {
        return Err(KbError::Contract("validation left no kernel or regime".into()));
    };
    let kernel = CollisionKernel::new(k.lambda, angular, k.dim, mode).map_err(|e| KbError::Config(vec![e.to_string()]))?;

    let (rates, regime) = match (&r.near_vacuum, &r.near_maxwellian) {
        (Some(v), _) => {
            let k_ab = k_alpha_beta(v.alpha, v.beta, &kernel).map_err(|e| KbError::Config(vec![e.to_string()]))?;
            let amplitude = v.amplitude.unwrap_or_else(|| v.fraction.unwrap_or(0.0) / (4.0 * k_ab));
            // the datum peaks at the origin and decays at least as fast as the weight,
            // so its weighted norm is the amplitude
            let barrier = VacuumBarrier::new(v.alpha, v.beta, amplitude, &kernel)?;
            let datum = MaxwellianSpec::new(amplitude, v.datum_alpha.unwrap_or(v.alpha), v.beta, 0.0)?;
            ((v.alpha, v.beta), Regime::Vacuum { barrier, datum })
        }
        (_, Some(m)) => {
            let barrier = MaxwellianBarrier::new(m.target.spec(), m.m1.spec(), m.m2.spec(), m.eps, &kernel)?;
            let margin = barrier.boundedness_condition();
            if margin <= 1.0 {
                return Err(KbError::BlowUp {
                    critical_t: barrier.ode.critical_time().unwrap_or(f64::INFINITY),
                    margin,
                });
            }
            ((m.m2.alpha, m.m2.beta), Regime::Maxwellian { barrier: Box::new(barrier) })
        }
        _ => unreachable!("regime checked above"),
    };
    let grid = match (g.lx, g.lv) {
        (Some(lx), Some(lv)) => PhaseGrid::new(k.dim, lx, lv, g.nx, g.nv)?,
        _ => {
            let d = PhaseGrid::with_default_widths(k.dim, rates.0, rates.1.max(f64::MIN_POSITIVE), g.nx, g.nv)?;
            PhaseGrid::new(k.dim, g.lx.unwrap_or(d.lx()), g.lv.unwrap_or(d.lv()), g.nx, g.nv)?
        }
    };
    Ok(Scenario {
        config: config.clone(),
        kernel,
        grid,
        regime,
    })
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(KbError::Config(vec!["--workers must be >= 1".into()])),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| KbError::Contract(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub pass: bool,
    pub skipped: bool,
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub artifacts: Vec<String>,
    pub verdicts: Vec<ManifestEntry>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub pass: bool,
    pub verdicts: Vec<Verdict>,
    pub manifest: Manifest,
}

fn verdict(name: &str, pass: bool, worst_ratio: f64, detail: String) -> Verdict {
    Verdict::new(name, pass, worst_ratio, String::new(), detail)
}

fn solver_verdicts(sol: &Solution, res: &MildResidual, residual_tol: f64) -> Vec<Verdict> {
    let r = &sol.report;
    let monotone = r.iterations.iter().all(|i| i.ordered && i.lower_nondecreasing && i.upper_nonincreasing);
    let worst_order = r.iterations.iter().map(|i| i.worst_violation).fold(f64::NEG_INFINITY, f64::max);
    let tail = r.contraction_ratios.iter().skip(1).copied().fold(0.0f64, f64::max);
    vec![
        verdict(
            "monotone_iteration",
            monotone,
            worst_order,
            format!("{} iterations, every iterate ordered between the previous pair", r.iterations.len()),
        ),
        verdict(
            "convergence",
            r.converged && tail < 1.0,
            tail,
            format!("final gap {:e}, largest contraction ratio after the first sweep {tail}", r.gaps.last().copied().unwrap_or(0.0)),
        ),
        verdict("envelope", r.final_sandwich, 0.0, "solution stays between the initial barriers".into()),
        verdict(
            "mild_residual",
            res.relative <= residual_tol,
            res.relative / residual_tol,
            format!("relative residual {:e} at dt = {}, allowed {residual_tol}", res.relative, res.dt),
        ),
    ]
}

/// Indices of the slices written to `fields.csv`.
fn slice_indices(len: usize, slices: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..=slices).map(|i| i * (len - 1) / slices.max(1)).collect();
    idx.dedup();
    idx
}

/// Validates, solves and checks one scenario and writes its artifacts under
/// `<output>/<scenario>/`. Nothing is written when validation fails.
pub fn run(config: &ScenarioConfig, output: Option<&Path>, workers: Option<usize>) -> Result<RunOutcome> {
    let started = Instant::now();
    let scenario = validate(config)?;
    let dir = output.unwrap_or(&config.output).join(&config.scenario);
    with_workers(workers, || run_validated(&scenario, &dir, workers, started))?
}

fn run_validated(sc: &Scenario, dir: &Path, workers: Option<usize>, started: Instant) -> Result<RunOutcome> {
    let cfg = &sc.config;
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut verdicts = Vec::new();
    let mut report = serde_json::Map::new();
    let mut traces: Vec<(String, Box<dyn Fn(&Path) -> Result<()>>)> = Vec::new();
    let pair = sc.pair();
    let q = sc.quadrature()?;
    let f0 = sc.datum(1.0);
    let (alpha, beta) = pair.rates();
    let (g, t_end, nt) = (&cfg.grid, cfg.grid.t_end, cfg.grid.nt);

    let clock = Instant::now();
    let begin_ok = match &sc.regime {
        Regime::Vacuum { barrier, .. } => {
            report.insert("barrier".into(), serde_json::to_value(BarrierDiagnostics::vacuum(barrier))?);
            let b = vacuum_beginning_condition_check(&f0, barrier, t_end, nt, &q)?;
            verdicts.push(verdict(
                "beginning_condition",
                b.pass,
                b.worst_violation,
                format!("first iterate ordered inside the envelope, threshold 1/(4k) = {:e}", barrier.threshold()),
            ));
            report.insert("beginning_condition".into(), serde_json::to_value(&b)?);
            b.pass
        }
        Regime::Maxwellian { barrier } => {
            report.insert("barrier".into(), serde_json::to_value(BarrierDiagnostics::maxwellian(barrier)?)?);
            let lab0 = PhaseField::maxwellian(sc.grid, 0.0, Frame::Lab, &barrier.target);
            let s = sandwich_check(&lab0, &barrier.m1, &barrier.m2, &barrier.target, barrier.eps)?;
            verdicts.push(verdict(
                "initial_sandwich",
                s.pass,
                s.worst.map_or(0.0, |w| w.2),
                format!("{} cell violations, distances {:e} and {:e} against eps = {}", s.violations, s.d1, s.d2, barrier.eps),
            ));
            report.insert("initial_sandwich".into(), serde_json::to_value(&s)?);
            let m = cfg.regime.near_maxwellian.as_ref().expect("validated regime");
            let pts = inequality_sample_points(barrier, m.inequality_t_max, m.inequality_points, cfg.seed);
            let b = beginning_condition_check(barrier, &sc.kernel, g.n_sigma, &pts)?;
            verdicts.push(verdict(
                "beginning_condition",
                b.pass,
                b.worst_lower_relative.max(b.worst_upper_relative),
                format!("{} sampled points, boundedness margin {}", b.points.len(), b.margin),
            ));
            report.insert("beginning_condition".into(), serde_json::to_value(&b)?);
            s.pass && b.pass
        }
    };
    timings.insert("barrier_and_beginning".into(), clock.elapsed().as_secs_f64());

    if begin_ok {
        let clock = Instant::now();
        let (sol, res) = solve_with_refinement(&f0, &pair, t_end, nt, &cfg.solver_options(), &q)?;
        timings.insert("solve".into(), clock.elapsed().as_secs_f64());
        verdicts.extend(solver_verdicts(&sol, &res, cfg.solver.residual_tol));
        report.insert("iterations".into(), serde_json::to_value(&sol.report)?);
        report.insert("mild_residual".into(), serde_json::to_value(res)?);
        {
            let s = sol.clone();
            traces.push((
                "gaps.csv".into(),
                Box::new(move |p: &Path| {
                    let it: Vec<f64> = (1..=s.report.gaps.len()).map(|i| i as f64).collect();
                    crate::analysis::write_columns_csv(p, &["iteration".into(), "gap".into()], &[it, s.report.gaps.clone()])
                }),
            ));
        }

        let clock = Instant::now();
        let reference = sc.reference();
        let mut checks = serde_json::Map::new();
        let want = |name: &str| cfg.checks.list.iter().any(|c| c == name);
        if want("lgamma_decay") {
            let (trace, v) = lgamma_decay_check(&sol, &sc.kernel, &reference)?;
            checks.insert("lgamma_decay".into(), serde_json::to_value(&trace)?);
            traces.push(("lgamma_decay.csv".into(), Box::new(move |p: &Path| trace.write_csv(p))));
            verdicts.push(v);
        }
        if want("gradient_gronwall") || want("velocity_gradient") {
            let (pos, v) = gradient_gronwall_check(&sol, &q, cfg.checks.p, &reference)?;
            if want("velocity_gradient") {
                let (vel, vv) = velocity_gradient_check(&sol, &sc.kernel, cfg.checks.p, &reference, &pos)?;
                checks.insert("velocity_gradient".into(), serde_json::to_value(&vel)?);
                traces.push(("velocity_gradient.csv".into(), Box::new(move |p: &Path| vel.write_csv(p))));
                verdicts.push(vv);
            }
            if want("gradient_gronwall") {
                checks.insert("gradient_gronwall".into(), serde_json::to_value(&pos)?);
                traces.push(("gradient_gronwall.csv".into(), Box::new(move |p: &Path| pos.write_csv(p))));
                verdicts.push(v);
            }
        }
        if want("weighted_gradient") {
            let (rep, v) = weighted_gradient_check(&sol, &sc.kernel, alpha, beta)?;
            checks.insert("weighted_gradient".into(), serde_json::to_value(&rep)?);
            verdicts.push(v);
        }
        if want("stability") {
            let delta = cfg.checks.stability_delta;
            let perturbed_pair = match &sc.regime {
                Regime::Vacuum { barrier, .. } => BarrierPair::Vacuum(VacuumBarrier::new(barrier.alpha, barrier.beta, (1.0 + delta) * barrier.f0_norm, &sc.kernel)?),
                Regime::Maxwellian { .. } => pair.clone(),
            };
            let g0 = sc.datum(1.0 + delta);
            let nt_used = sol.report.nt;
            let other = crate::solver::ks_solve(&g0, &perturbed_pair, t_end, nt_used, &cfg.solver_options(), &q)?;
            let (trace, v) = stability_compare(&sol, &other, &sc.kernel, alpha, beta)?;
            checks.insert("stability".into(), serde_json::to_value(&trace)?);
            traces.push(("stability.csv".into(), Box::new(move |p: &Path| trace.write_csv(p))));
            verdicts.push(v);
        }
        if want("q_estimate") {
            let n = sc.kernel.dim() as f64;
            let exps = cfg.checks.q_exponents.unwrap_or([2.0, n / (n - sc.kernel.lambda()), 2.0]);
            let small = PhaseGrid::new(sc.grid.dim(), sc.grid.lx(), sc.grid.lv(), 4, sc.grid.nv())?;
            let sweep = q_estimate_sweep(&sc.kernel, small, g.n_sigma, (exps[0], exps[1], exps[2]), cfg.checks.q_pairs, cfg.seed)?;
            verdicts.push(verdict(
                "q_estimate",
                sweep.pass,
                sweep.max_gain.max(sweep.max_loss),
                format!(
                    "largest gain and loss ratios {:e} and {:e}, after velocity refinement {:e} and {:e}",
                    sweep.max_gain, sweep.max_loss, sweep.refined_max_gain, sweep.refined_max_loss
                ),
            ));
            checks.insert("q_estimate".into(), serde_json::to_value(sweep)?);
        }
        timings.insert("checks".into(), clock.elapsed().as_secs_f64());
        report.insert("checks".into(), Value::Object(checks));

        let idx = slice_indices(sol.f.len(), cfg.solver.field_slices);
        let fields: Vec<PhaseField> = idx.iter().map(|&m| sol.f.fields[m].clone()).collect();
        traces.push((
            "__fields".into(),
            Box::new(move |p: &Path| write_fields_csv(p, &fields.iter().collect::<Vec<_>>())),
        ));
    }

    let pass = verdicts.iter().all(|v| v.pass);
    report.insert("verdicts".into(), serde_json::to_value(&verdicts)?);

    fs::create_dir_all(dir.join("traces"))?;
    let mut artifacts = Vec::new();
    for (name, write) in &traces {
        if name == "__fields" {
            write(&dir.join("fields.csv"))?;
            artifacts.push("fields.csv".to_string());
            artifacts.push("fields.json".to_string());
        } else {
            write(&dir.join("traces").join(name))?;
            artifacts.push(format!("traces/{name}"));
        }
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&Value::Object(report))?)?;
    artifacts.push("report.json".into());
    artifacts.push("timings.json".into());
    let manifest = Manifest {
        tool: "kb".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: cfg.scenario.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts,
        verdicts: verdicts
            .iter()
            .map(|v| ManifestEntry {
                name: v.name.clone(),
                pass: v.pass,
                skipped: v.skipped,
                worst_ratio: v.worst_ratio,
            })
            .collect(),
        pass,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    timings.insert("total".into(), started.elapsed().as_secs_f64());
    let timing_doc = json!({
        "workers": workers.unwrap_or_else(rayon::current_num_threads),
        "seconds": timings,
    });
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timing_doc)?)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        pass,
        verdicts,
        manifest,
    })
}

/// Faults that `verify` can inject to exercise its own failure paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of the exchanged momentum in the post-collision map.
    PostCollisionSign,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyItem {
    pub name: String,
    pub pass: bool,
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub seconds: f64,
    pub items: Vec<VerifyItem>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&VerifyItem> {
        self.items.iter().filter(|i| !i.pass).collect()
    }
}

fn item(name: &str, worst: f64, tolerance: f64, detail: impl Into<String>) -> VerifyItem {
    VerifyItem {
        name: name.into(),
        pass: worst <= tolerance,
        worst,
        tolerance,
        detail: detail.into(),
    }
}

fn failed_item(name: &str, e: KbError) -> VerifyItem {
    VerifyItem {
        name: name.into(),
        pass: false,
        worst: f64::INFINITY,
        tolerance: 0.0,
        detail: e.to_string(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> Point {
    let mut p = [0.0; MAX_DIM];
    for c in p.iter_mut().take(dim) {
        *c = rng.gen_range(-r..r);
    }
    p
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Point {
    loop {
        let p = random_point(rng, dim, 1.0);
        let n2 = norm2(&p, dim);
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            let mut u = p;
            for c in u.iter_mut().take(dim) {
                *c /= n;
            }
            return u;
        }
    }
}

/// Samples drawn per dimension by the conservation and identity suites.
pub const VERIFY_SAMPLES: usize = 10_000;

fn sphere_suite() -> VerifyItem {
    let mut worst: f64 = 0.0;
    for n in 2..=6 {
        let closed = 2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / statrs::function::gamma::gamma(n as f64 / 2.0);
        match sphere_area(n) {
            Ok(a) => worst = worst.max(rel(a, closed)),
            Err(e) => return failed_item("sphere_area", e),
        }
    }
    item("sphere_area", worst, 1e-10, "|S^{n-1}| against 2π^{n/2}/Γ(n/2) for n = 2..6")
}

fn angular_suite() -> VerifyItem {
    let run = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for n in 2..=3 {
            worst = worst.max(rel(angular_norm(&AngularKernel::Constant(1.0), n)?, sphere_area(n)?));
        }
        for k in [0.5, 2.0, 3.0] {
            let b = AngularKernel::Power { exponent: k };
            worst = worst.max(rel(angular_norm(&b, 3)?, 4.0 * std::f64::consts::PI / (k + 1.0)));
            let beta = statrs::function::beta::beta((k + 1.0) / 2.0, 0.5);
            worst = worst.max(rel(angular_norm(&b, 2)?, 2.0 * beta));
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => item("angular_norm", w, 1e-10, "constant and |s|^k kernels against closed forms, n = 2, 3"),
        Err(e) => failed_item("angular_norm", e),
    }
}

fn conservation_suite(fault: Option<Fault>) -> VerifyItem {
    let sign = if fault == Some(Fault::PostCollisionSign) { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for dim in 2..=3 {
        for _ in 0..VERIFY_SAMPLES {
            let v = random_point(&mut rng, dim, 5.0);
            let vs = random_point(&mut rng, dim, 5.0);
            let sigma = random_unit(&mut rng, dim);
            let (vp, vsp) = post_collision_unchecked(&v, &vs, &sigma, dim, sign);
            let energy = norm2(&v, dim) + norm2(&vs, dim);
            let scale = energy.max(f64::MIN_POSITIVE);
            let de = (norm2(&vp, dim) + norm2(&vsp, dim) - energy).abs() / scale;
            let mut dm: f64 = 0.0;
            for d in 0..dim {
                dm = dm.max((vp[d] + vsp[d] - v[d] - vs[d]).abs());
            }
            worst = worst.max(de).max(dm / scale.sqrt());
        }
    }
    item(
        "post_collision_conservation",
        worst,
        1e-12,
        format!("momentum and energy conservation of the post-collision map over {VERIFY_SAMPLES} samples per dimension"),
    )
}

fn trajectory_suite(fault: Option<Fault>) -> VerifyItem {
    let sign = if fault == Some(Fault::PostCollisionSign) { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for dim in 2..=3 {
        for _ in 0..VERIFY_SAMPLES {
            let x = random_point(&mut rng, dim, 5.0);
            let v = random_point(&mut rng, dim, 5.0);
            let vs = random_point(&mut rng, dim, 5.0);
            let sigma = random_unit(&mut rng, dim);
            let tau = rng.gen_range(0.0..10.0);
            let (vp, vsp) = post_collision_unchecked(&v, &vs, &sigma, dim, sign);
            let mut c = [0.0; MAX_DIM];
            for d in 0..dim {
                c[d] = x[d] + tau * (v[d] - vs[d]);
            }
            let scale = (norm2(&x, dim) + norm2(&c, dim)).max(f64::MIN_POSITIVE);
            worst = worst.max(trajectory_identity_residual(&x, &v, &vs, &vp, &vsp, tau, dim) / scale);
        }
    }
    item(
        "trajectory_identity",
        worst,
        1e-12,
        format!("|x+τ(v-'v)|² + |x+τ(v-'v*)|² = |x|² + |x+τu|² over {VERIFY_SAMPLES} samples per dimension"),
    )
}

fn k_scaling_suite() -> VerifyItem {
    let run = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (dim, lambda) in [(2, 0.0), (2, 0.5), (3, 1.0)] {
            let kernel = CollisionKernel::new(lambda, AngularKernel::Constant(1.0), dim, KernelMode::NearVacuum)?;
            let n = dim as f64;
            let base = k_alpha_beta(1.0, 1.0, &kernel)?;
            for alpha in [0.25, 2.0, 9.0] {
                worst = worst.max(rel(k_alpha_beta(alpha, 1.0, &kernel)? * alpha.sqrt(), base));
            }
            // the β-dependent part scales like β^{-n/2}
            let front = std::f64::consts::PI.sqrt() * kernel.angular_norm();
            let fixed = front * sphere_area(dim)? / (n - lambda - 1.0);
            let tail1 = base - fixed;
            for beta in [0.5, 4.0] {
                worst = worst.max(rel(k_alpha_beta(1.0, beta, &kernel)? - fixed, tail1 * beta.powf(-n / 2.0)));
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => item("k_alpha_beta_scaling", w, 1e-12, "α^{-1/2} and β^{-n/2} scaling of the near-vacuum constant"),
        Err(e) => failed_item("k_alpha_beta_scaling", e),
    }
}

fn fixed_point_suite() -> VerifyItem {
    let run = || -> Result<f64> {
        let mut worst = (vacuum_fixed_point(3.0 / 16.0, 1.0)? - 0.25).abs();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k: f64 = 10f64.powf(rng.gen_range(-3.0..3.0));
            let f = rng.gen_range(0.0..1.0) / (4.0 * k);
            let c = vacuum_fixed_point(f, k)?;
            worst = worst.max((k * c * c - c + f).abs() / c.max(f64::MIN_POSITIVE));
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => item("fixed_point", w, 1e-14, "C = 1/4 at (k, norm) = (1, 3/16) and kC² - C + norm = 0 on 100 random pairs"),
        Err(e) => failed_item("fixed_point", e),
    }
}

/// Amplitude system used by the barrier suites: margin above 1 on `t ≥ 1`.
pub fn reference_ode() -> Result<BarrierOde> {
    BarrierOde::new(0.0095, 0.0105, 50.0, 2.0, 0.5)
}

/// Classical RK4 for the amplitude system in `ln t`, returning `(C₁, C₂)` at each of `ts`.
pub fn integrate_amplitudes(ode: &BarrierOde, ts: &[f64], steps_per_unit: usize) -> Vec<(f64, f64)> {
    let f = |s: f64, y: (f64, f64)| {
        let t = s.exp();
        let (a, b) = ode.rhs(t, y.0, y.1);
        (t * a, t * b)
    };
    let mut out = Vec::with_capacity(ts.len());
    let mut s = 0.0;
    let mut y = (ode.c1_init, ode.c2_init);
    for &t in ts {
        let target = t.ln();
        let n = (((target - s) * steps_per_unit as f64).ceil() as usize).max(1);
        let h = (target - s) / n as f64;
        for _ in 0..n {
            let k1 = f(s, y);
            let k2 = f(s + h / 2.0, (y.0 + h / 2.0 * k1.0, y.1 + h / 2.0 * k1.1));
            let k3 = f(s + h / 2.0, (y.0 + h / 2.0 * k2.0, y.1 + h / 2.0 * k2.1));
            let k4 = f(s + h, (y.0 + h * k3.0, y.1 + h * k3.1));
            y.0 += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            y.1 += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            s += h;
        }
        s = target;
        out.push(y);
    }
    out
}

fn barrier_suites() -> Vec<VerifyItem> {
    let ts: Vec<f64> = (0..=40).map(|i| 100f64.powf(i as f64 / 40.0)).collect();
    let ode = match reference_ode() {
        Ok(o) => o,
        Err(e) => return vec![failed_item("barrier_product", e)],
    };
    let mut items = Vec::new();
    let product = || -> Result<f64> {
        let p0 = ode.c1_init * ode.c2_init;
        let mut worst: f64 = 0.0;
        for &t in &ts {
            worst = worst.max(rel(ode.c1(t)? * ode.c2(t)?, p0));
        }
        Ok(worst)
    };
    items.push(match product() {
        Ok(w) => item("barrier_product", w, 1e-10, "C₁(t)C₂(t) constant on [1, 100]"),
        Err(e) => failed_item("barrier_product", e),
    });
    let profile = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (&t, (c1, c2)) in ts.iter().zip(integrate_amplitudes(&ode, &ts, 2000)) {
            worst = worst.max(rel(ode.c2(t)?, c2)).max(rel(ode.c1(t)?, c1));
        }
        Ok(worst)
    };
    items.push(match profile() {
        Ok(w) => item("c2_profile_ode", w, 1e-6, "closed-form amplitudes against RK4 on [1, 100]"),
        Err(e) => failed_item("c2_profile_ode", e),
    });
    let equal = || -> Result<f64> {
        let o = BarrierOde::new(0.01, 0.01, 50.0, 0.0, 0.5)?;
        let mut worst: f64 = 0.0;
        for &t in &ts {
            worst = worst.max((o.c2(t)? - 0.01).abs()).max((o.c1(t)? - 0.01).abs());
        }
        Ok(worst)
    };
    items.push(match equal() {
        Ok(w) => item("equal_barrier", w, 0.0, "C₁ = C₂ with no difference term stays constant"),
        Err(e) => failed_item("equal_barrier", e),
    });
    let blow = match BarrierOde::new(0.5, 1.0, 50.0, 2.0, 0.5).and_then(|o| o.c2(100.0)) {
        Err(KbError::BlowUp { .. }) => item("blow_up_detected", 0.0, 0.0, "amplitudes above the boundedness condition are rejected"),
        Ok(v) => item("blow_up_detected", 1.0, 0.0, format!("expected a blow-up error, got C₂(100) = {v}")),
        Err(e) => failed_item("blow_up_detected", e),
    };
    items.push(blow);
    items
}

fn potential_suite() -> VerifyItem {
    let run = || -> Result<f64> {
        let kernel = CollisionKernel::new(0.5, AngularKernel::Constant(1.0), 2, KernelMode::NearMaxwellian)?;
        let split = potential_split(&kernel, 2.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let u = random_point(&mut rng, 2, 3.0);
            let r = norm2(&u, 2).sqrt();
            worst = worst.max(rel(split.phi1(&u) + split.phi2(&u), r.powf(-0.5)));
        }
        let sq = integrate_with_breaks(
            |r: f64| 2.0 * std::f64::consts::PI * r * (r.powf(-0.5) - 1.0).powi(2),
            &[0.0, 1.0],
            QuadTolerance::relative(1e-12),
        )?;
        worst = worst.max(rel(split.phi1_norm, sq.sqrt()));
        worst = worst.max(rel(split.phi1_norm, (std::f64::consts::PI / 3.0).sqrt()));
        Ok(worst)
    };
    match run() {
        Ok(w) => item("potential_split", w, 1e-6, "Φ₁ + Φ₂ = |u|^{-λ} and the L² norm of Φ₁ against quadrature, n = 2, λ = 1/2"),
        Err(e) => failed_item("potential_split", e),
    }
}

fn weak_norm_suite() -> VerifyItem {
    let run = || -> Result<f64> {
        let closed = weak_norm_closed_form(2, 1.0)?;
        let radii: Vec<f64> = (0..=40).map(|i| 10f64.powf(-2.0 + i as f64 / 10.0)).collect();
        let numeric = weak_norm_over_balls(2, 1.0, &radii)?;
        Ok(rel(numeric, closed).max(rel(closed, 2.0 * std::f64::consts::PI.sqrt())))
    };
    match run() {
        Ok(w) => item("weak_norm", w, 1e-3, "weak L² norm of |u|^{-1} in the plane over centred balls"),
        Err(e) => failed_item("weak_norm", e),
    }
}

/// Closed-form and geometry suites; no transport solve.
pub fn verify(fault: Option<Fault>) -> VerifyReport {
    let started = Instant::now();
    let mut items = vec![
        sphere_suite(),
        angular_suite(),
        conservation_suite(fault),
        trajectory_suite(fault),
        k_scaling_suite(),
        fixed_point_suite(),
    ];
    items.extend(barrier_suites());
    items.push(potential_suite());
    items.push(weak_norm_suite());
    VerifyReport {
        pass: items.iter().all(|i| i.pass),
        seconds: started.elapsed().as_secs_f64(),
        items,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchEntry {
    pub workers: usize,
    pub seconds: f64,
    pub cells_per_second: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub cells: usize,
    pub n_sigma: usize,
    pub entries: Vec<BenchEntry>,
    /// Throughput never drops as workers are added.
    pub monotone: bool,
    /// Two single-worker evaluations agree bit for bit.
    pub deterministic: bool,
    /// All worker counts produce the single-worker result bit for bit.
    pub worker_invariant: bool,
    /// Per-cell cost with `2·Nsigma` over the cost with `Nsigma`, single worker.
    pub sigma_cost_ratio: f64,
}

/// Worker counts `1, 2, 4, ...` up to and including `max`.
pub fn worker_counts(max: usize) -> Vec<usize> {
    let mut w = vec![1];
    while w.last().copied().unwrap_or(1) * 2 <= max {
        let next = w.last().copied().unwrap_or(1) * 2;
        w.push(next);
    }
    if *w.last().unwrap_or(&1) != max && max > 1 {
        w.push(max);
    }
    w
}

fn time_gain(q: &CollisionQuadrature, f: &PhaseField, repeats: usize, workers: usize) -> Result<(f64, Vec<f64>)> {
    with_workers(Some(workers), || -> Result<(f64, Vec<f64>)> {
        let mut best = f64::INFINITY;
        let mut values = Vec::new();
        for _ in 0..repeats.max(1) {
            let clock = Instant::now();
            let g = q.gain(f, f)?;
            best = best.min(clock.elapsed().as_secs_f64());
            values = g.values;
        }
        Ok((best, values))
    })?
}

/// Times the gain quadrature on the scenario grid across worker counts.
pub fn bench(config: &ScenarioConfig, max_workers: usize, repeats: usize) -> Result<BenchReport> {
    let sc = validate(config)?;
    let q = sc.quadrature()?;
    let f0 = sc.datum(1.0);
    let f = PhaseField {
        t: f0.t + 0.5 * config.grid.t_end,
        ..f0
    };
    let cells = sc.grid.cells();
    let mut entries = Vec::new();
    let (_, reference) = time_gain(&q, &f, 1, 1)?;
    let mut worker_invariant = true;
    for w in worker_counts(max_workers.max(1)) {
        let (secs, values) = time_gain(&q, &f, repeats, w)?;
        worker_invariant &= values.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
        entries.push(BenchEntry {
            workers: w,
            seconds: secs,
            cells_per_second: cells as f64 / secs,
        });
    }
    let (t1, again) = time_gain(&q, &f, repeats, 1)?;
    let deterministic = again.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
    let q2 = CollisionQuadrature::new(sc.kernel.clone(), sc.grid, 2 * config.grid.n_sigma, sc.pair().interpolation_weight())?;
    let (t2, _) = time_gain(&q2, &f, repeats, 1)?;
    let monotone = entries.windows(2).all(|w| w[1].cells_per_second >= w[0].cells_per_second);
    Ok(BenchReport {
        cells,
        n_sigma: config.grid.n_sigma,
        entries,
        monotone,
        deterministic,
        worker_invariant,
        sigma_cost_ratio: t2 / t1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const VACUUM: &str = r#"
scenario = "tiny"
seed = 1

[kernel]
lambda = 0.5
dim = 2

[grid]
Nx = 4
Nv = 4
Nsigma = 8
Nt = 2
T = 0.5

[regime.near_vacuum]
alpha = 1.0
beta = 1.0
fraction = 0.5

[checks]
list = ["lgamma_decay", "gradient_gronwall", "velocity_gradient", "weighted_gradient", "stability"]
"#;

    fn parse(s: &str) -> ScenarioConfig {
        ScenarioConfig::from_toml(s).unwrap()
    }

    #[test]
    fn parses_and_validates_a_vacuum_config() {
        let sc = validate(&parse(VACUUM)).unwrap();
        assert_eq!(sc.grid.nx(), 4);
        match sc.regime {
            Regime::Vacuum { barrier, .. } => assert!((barrier.f0_norm - 0.5 * barrier.threshold()).abs() < 1e-15 * barrier.threshold()),
            _ => panic!("wrong regime"),
        }
    }

    #[test]
    fn validation_collects_every_violation() {
        let text = VACUUM.replace("lambda = 0.5", "lambda = 1.0").replace("Nx = 4", "Nx = 2").replace("T = 0.5", "T = -1");
        let err = validate(&parse(&text)).unwrap_err();
        match err {
            KbError::Config(v) => {
                assert_eq!(v.len(), 3, "{v:?}");
                assert!(v[0].contains("soft potential") && v[0].contains("integrable"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn smallness_alone_is_its_own_error() {
        let text = VACUUM.replace("fraction = 0.5", "amplitude = 10.0");
        assert!(matches!(validate(&parse(&text)), Err(KbError::SmallnessViolated { .. })));
    }

    #[test]
    fn unknown_keys_and_checks_are_rejected() {
        assert!(matches!(ScenarioConfig::from_toml(&VACUUM.replace("seed = 1", "seed = 1\ncolour = 2")), Err(KbError::Config(_))));
        let text = VACUUM.replace("\"stability\"]", "\"stability\", \"bogus\"]");
        assert!(matches!(validate(&parse(&text)), Err(KbError::Config(v)) if v.iter().any(|m| m.contains("bogus"))));
    }

    #[test]
    fn tiny_run_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse(VACUUM);
        let a = run(&cfg, Some(&dir.path().join("a")), Some(1)).unwrap();
        let b = run(&cfg, Some(&dir.path().join("b")), Some(1)).unwrap();
        // a 4⁴ grid is too coarse for every estimate to hold; only the artifacts matter here
        assert_eq!(a.verdicts.len(), 10);
        assert_eq!(a.manifest.pass, a.pass);
        for name in ["report.json", "manifest.json", "fields.csv", "traces/stability.csv", "traces/gaps.csv"] {
            assert_eq!(fs::read(a.dir.join(name)).unwrap(), fs::read(b.dir.join(name)).unwrap(), "{name}");
        }
        assert!(a.dir.join("timings.json").exists());
    }

    #[test]
    fn rejected_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse(&VACUUM.replace("Nt = 2", "Nt = 1"));
        assert!(run(&cfg, Some(dir.path()), None).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn rk4_matches_the_closed_form() {
        let ode = reference_ode().unwrap();
        assert!(ode.margin() > 1.0);
        let ts = [1.0, 2.0, 10.0, 100.0];
        for (&t, (c1, c2)) in ts.iter().zip(integrate_amplitudes(&ode, &ts, 2000)) {
            assert!(rel(c2, ode.c2(t).unwrap()) < 1e-8);
            assert!(rel(c1, ode.c1(t).unwrap()) < 1e-8);
        }
    }

    #[test]
    fn worker_count_ladder() {
        assert_eq!(worker_counts(1), vec![1]);
        assert_eq!(worker_counts(4), vec![1, 2, 4]);
        assert_eq!(worker_counts(6), vec![1, 2, 4, 6]);
    }

    #[test]
    fn slices_cover_both_ends() {
        assert_eq!(slice_indices(65, 8), vec![0, 8, 16, 24, 32, 40, 48, 56, 64]);
        assert_eq!(slice_indices(3, 8), vec![0, 1, 2]);
    }
}
