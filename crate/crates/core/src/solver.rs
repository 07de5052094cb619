//! Monotone upper/lower iteration for the mild equation along characteristics.
//!
//! All fields are trajectory-frame slices on a uniform time grid. Each sweep solves
//! the two linear problems
//! `dl/dt + l·R(u_prev) = Q₊(l_prev, l_prev)` and `du/dt + u·R(l_prev) = Q₊(u_prev, u_prev)`
//! with the exact integrating factor and trapezoid quadrature in time.

use rayon::prelude::*;
use serde::Serialize;

use crate::barriers::{MaxwellianBarrier, VacuumBarrier};
use crate::collision::{CollisionQuadrature, InterpolationWeight};
use crate::error::{KbError, Result};
use crate::phase::{Frame, MaxwellianSpec, PhaseField, PhaseGrid};

/// Relative tolerance (against the upper barrier's peak) for order checks.
pub const ORDER_TOL: f64 = 1e-10;

/// Trajectory-frame slices on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub fields: Vec<PhaseField>,
}

impl TimeSeries {
    pub fn times(&self) -> Vec<f64> {
        self.fields.iter().map(|f| f.t).collect()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn grid(&self) -> PhaseGrid {
        self.fields[0].grid
    }

    fn dt(&self) -> f64 {
        if self.fields.len() < 2 {
            0.0
        } else {
            self.fields[1].t - self.fields[0].t
        }
    }

    pub fn zeros(grid: PhaseGrid, times: &[f64]) -> Self {
        Self {
            fields: times.iter().map(|&t| PhaseField::zeros(grid, t, Frame::Trajectory)).collect(),
        }
    }

    /// Slices `envelope(t)` sampled at cell centres.
    pub fn from_envelopes(grid: PhaseGrid, times: &[f64], envelope: impl Fn(f64) -> Result<MaxwellianSpec>) -> Result<Self> {
        let fields = times
            .iter()
            .map(|&t| Ok(PhaseField::maxwellian(grid, t, Frame::Trajectory, &envelope(t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fields })
    }

    pub fn midpoint(&self, other: &TimeSeries) -> Result<TimeSeries> {
        let fields = self
            .fields
            .iter()
            .zip(&other.fields)
            .map(|(a, b)| Ok(a.add(b)?.scale(0.5)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeSeries { fields })
    }

    /// `max_t ‖a(t) - b(t)‖_{α,β}`.
    pub fn weighted_gap(&self, other: &TimeSeries, alpha: f64, beta: f64) -> Result<f64> {
        let mut gap: f64 = 0.0;
        for (a, b) in self.fields.iter().zip(&other.fields) {
            gap = gap.max(b.sub(a)?.weighted_sup_norm(alpha, beta));
        }
        Ok(gap)
    }
}

/// Uniform grid `t0, t0 + T/Nt, ..., t0 + T`.
pub fn time_grid(t0: f64, t_end: f64, nt: usize) -> Vec<f64> {
    (0..=nt).map(|k| t0 + t_end * k as f64 / nt as f64).collect()
}

/// The initial lower/upper pair.
#[derive(Debug, Clone)]
pub enum BarrierPair {
    /// `l₀ = 0`, `u₀ = C·M_{α,β}` from the smallness construction.
    Vacuum(VacuumBarrier),
    /// `l₀ = C₁(t)M₁`, `u₀ = C₂(t)M₂` on internal times `t ≥ 1`.
    Maxwellian(Box<MaxwellianBarrier>),
}

impl BarrierPair {
    /// Internal time at which the datum is prescribed.
    pub fn start_time(&self) -> f64 {
        match self {
            BarrierPair::Vacuum(_) => 0.0,
            BarrierPair::Maxwellian(_) => 1.0,
        }
    }

    /// Rates of the weighted norm used for gaps and interpolation.
    pub fn rates(&self) -> (f64, f64) {
        match self {
            BarrierPair::Vacuum(b) => (b.alpha, b.beta),
            BarrierPair::Maxwellian(b) => (b.m2.alpha, b.m2.beta),
        }
    }

    pub fn interpolation_weight(&self) -> InterpolationWeight {
        let (a, b) = self.rates();
        InterpolationWeight::maxwellian(a, b)
    }

    pub fn lower_series(&self, grid: PhaseGrid, times: &[f64]) -> Result<TimeSeries> {
        match self {
            BarrierPair::Vacuum(_) => Ok(TimeSeries::zeros(grid, times)),
            BarrierPair::Maxwellian(b) => TimeSeries::from_envelopes(grid, times, |t| b.lower(t)),
        }
    }

    pub fn upper_series(&self, grid: PhaseGrid, times: &[f64]) -> Result<TimeSeries> {
        match self {
            BarrierPair::Vacuum(b) => TimeSeries::from_envelopes(grid, times, |_| Ok(b.envelope())),
            BarrierPair::Maxwellian(b) => TimeSeries::from_envelopes(grid, times, |t| b.upper(t)),
        }
    }
}

/// Per-slice loss rates and gain sources of a time series.
struct Terms {
    loss: Vec<Vec<f64>>,
    gain: Vec<Vec<f64>>,
}

fn collision_terms(series: &TimeSeries, q: &CollisionQuadrature) -> Result<Terms> {
    let mut loss = Vec::with_capacity(series.len());
    let mut gain = Vec::with_capacity(series.len());
    for f in &series.fields {
        let plan = q.plan(f.t);
        let p = q.prepare(f)?;
        loss.push(q.loss_prepared(&plan, &p)?);
        gain.push(q.gain_prepared(&plan, &p, &p)?);
    }
    Ok(Terms { loss, gain })
}

/// Mild solution of `dy/dt + y·R = S`, `y(t₀) = y₀`, per cell:
/// `y_m = y₀e^{-Λ_m} + ∫ e^{-(Λ_m-Λ(s))} S(s) ds` with trapezoid rules for `Λ` and the integral.
fn integrate_linear(y0: &[f64], rates: &[Vec<f64>], sources: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let steps = rates.len();
    let cells = y0.len();
    let mut out = vec![vec![0.0; cells]; steps];
    // work on contiguous per-cell chunks so the reduction order is fixed
    const CHUNK: usize = 256;
    let chunks: Vec<Vec<Vec<f64>>> = (0..cells.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(cells);
            let mut block = vec![vec![0.0; hi - lo]; steps];
            for (k, cell) in (lo..hi).enumerate() {
                let mut lambda = 0.0;
                let mut j = 0.0;
                block[0][k] = y0[cell].max(0.0);
                for m in 0..steps - 1 {
                    let dl = 0.5 * dt * (rates[m][cell] + rates[m + 1][cell]);
                    let weight = if m == 0 { 0.5 } else { 1.0 };
                    j = (-dl).exp() * (j + weight * dt * sources[m][cell]);
                    lambda += dl;
                    let value = y0[cell] * (-lambda).exp() + j + 0.5 * dt * sources[m + 1][cell];
                    block[m + 1][k] = value.max(0.0);
                }
            }
            block
        })
        .collect();
    for (c, block) in chunks.into_iter().enumerate() {
        let lo = c * CHUNK;
        for (m, row) in block.into_iter().enumerate() {
            out[m][lo..lo + row.len()].copy_from_slice(&row);
        }
    }
    out
}

fn assemble(template: &TimeSeries, values: Vec<Vec<f64>>) -> Result<TimeSeries> {
    let fields = template
        .fields
        .iter()
        .zip(values)
        .map(|(f, v)| PhaseField::from_values(f.grid, f.t, Frame::Trajectory, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(TimeSeries { fields })
}

/// One sweep of the monotone iteration; `f0` is the trajectory-frame datum at the
/// first time node.
pub fn linear_step(l_prev: &TimeSeries, u_prev: &TimeSeries, f0: &PhaseField, q: &CollisionQuadrature) -> Result<(TimeSeries, TimeSeries)> {
    if l_prev.len() != u_prev.len() || l_prev.is_empty() {
        return Err(KbError::Contract("lower and upper series must share a non-empty time grid".into()));
    }
    if f0.frame != Frame::Trajectory || f0.t != l_prev.fields[0].t {
        return Err(KbError::Contract("initial datum must be a trajectory-frame field at the first time node".into()));
    }
    let lt = collision_terms(l_prev, q)?;
    let ut = collision_terms(u_prev, q)?;
    let dt = l_prev.dt();
    let l_next = integrate_linear(&f0.values, &ut.loss, &lt.gain, dt);
    let u_next = integrate_linear(&f0.values, &lt.loss, &ut.gain, dt);
    Ok((assemble(l_prev, l_next)?, assemble(u_prev, u_next)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative mild-equation residual that triggers one doubling of `Nt`.
    pub residual_tol: f64,
    pub auto_refine: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 40,
            residual_tol: 0.1,
            auto_refine: true,
        }
    }
}

/// Largest violation of `a ≤ b` on any slice, in absolute units.
fn order_violation(a: &TimeSeries, b: &TimeSeries) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for (m, (fa, fb)) in a.fields.iter().zip(&b.fields).enumerate() {
        for (k, (x, y)) in fa.values.iter().zip(&fb.values).enumerate() {
            let d = x - y;
            if d > worst.0 {
                worst = (d, m, k);
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub gap: f64,
    pub lower_nondecreasing: bool,
    pub upper_nonincreasing: bool,
    pub ordered: bool,
    /// Largest order violation relative to the barrier scale (≤ 0 means none).
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub iterations: Vec<IterationRecord>,
    pub gaps: Vec<f64>,
    pub contraction_ratios: Vec<f64>,
    pub converged: bool,
    pub beginning_condition: bool,
    pub final_sandwich: bool,
    pub nt: usize,
    pub time_offset: f64,
    pub scale: f64,
}

/// Converged (or last) iterate with its certificate.
#[derive(Debug, Clone)]
pub struct Solution {
    pub lower: TimeSeries,
    pub upper: TimeSeries,
    pub f: TimeSeries,
    pub l0: TimeSeries,
    pub u0: TimeSeries,
    pub report: IterationReport,
}

impl Solution {
    /// Lab-frame time of slice `m` (internal time minus the start offset).
    pub fn lab_time(&self, m: usize) -> f64 {
        self.f.fields[m].t - self.report.time_offset
    }
}

/// Runs the monotone iteration from the barrier pair until the weighted gap drops
/// below `opts.tol` or `opts.max_iter` sweeps are done.
pub fn ks_solve(f0: &PhaseField, barrier: &BarrierPair, t_end: f64, nt: usize, opts: &SolverOptions, q: &CollisionQuadrature) -> Result<Solution> {
    let t0 = barrier.start_time();
    if f0.frame != Frame::Trajectory || f0.t != t0 {
        return Err(KbError::Contract(format!("initial datum must be a trajectory-frame field at internal time {t0}")));
    }
    if nt == 0 || !(t_end > 0.0) {
        return Err(KbError::Domain("need Nt >= 1 and T > 0".into()));
    }
    let grid = f0.grid;
    let times = time_grid(t0, t_end, nt);
    let l0 = barrier.lower_series(grid, &times)?;
    let u0 = barrier.upper_series(grid, &times)?;
    let (alpha, beta) = barrier.rates();
    let scale = u0.fields.iter().map(|f| f.max_abs()).fold(0.0, f64::max).max(f0.max_abs());
    let tol_abs = ORDER_TOL * scale.max(f64::MIN_POSITIVE);

    let mut l = l0.clone();
    let mut u = u0.clone();
    let mut records = Vec::new();
    let mut gaps = Vec::new();
    let mut converged = false;
    let mut beginning = true;
    for n in 1..=opts.max_iter {
        let (ln, un) = linear_step(&l, &u, f0, q)?;
        let lo = order_violation(&l, &ln);
        let mid = order_violation(&ln, &un);
        let hi = order_violation(&un, &u);
        let worst = lo.0.max(mid.0).max(hi.0);
        let record = IterationRecord {
            iteration: n,
            gap: un.weighted_gap(&ln, alpha, beta)?,
            lower_nondecreasing: lo.0 <= tol_abs,
            upper_nonincreasing: hi.0 <= tol_abs,
            ordered: mid.0 <= tol_abs,
            worst_violation: worst / scale.max(f64::MIN_POSITIVE),
        };
        if n == 1 {
            beginning = worst <= tol_abs;
        }
        if worst > tol_abs {
            let (what, w) = if lo.0 == worst {
                ("lower iterate decreased", lo)
            } else if hi.0 == worst {
                ("upper iterate increased", hi)
            } else {
                ("lower iterate exceeds upper", mid)
            };
            let g = grid;
            return Err(KbError::IterationOrder {
                iteration: n,
                detail: format!(
                    "{what} by {:e} (relative {:e}) at t = {}, x cell {}, v cell {}",
                    w.0,
                    w.0 / scale,
                    times[w.1],
                    w.2 % g.x_cells(),
                    w.2 / g.x_cells()
                ),
            });
        }
        gaps.push(record.gap);
        records.push(record);
        l = ln;
        u = un;
        if *gaps.last().unwrap() < opts.tol {
            converged = true;
            break;
        }
    }
    let f = l.midpoint(&u)?;
    let final_sandwich = order_violation(&l0, &f).0 <= tol_abs && order_violation(&f, &u0).0 <= tol_abs;
    let contraction_ratios = gaps.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    Ok(Solution {
        lower: l,
        upper: u,
        f,
        l0,
        u0,
        report: IterationReport {
            iterations: records,
            gaps,
            contraction_ratios,
            converged,
            beginning_condition: beginning,
            final_sandwich,
            nt,
            time_offset: t0,
            scale,
        },
    })
}

/// Central-difference residual `df^#/dt - Q^#(f,f)` on interior nodes, in the
/// weighted norm of the barrier, relative to `max_t ‖Q^#(f,f)‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MildResidual {
    pub absolute: f64,
    pub relative: f64,
    pub dt: f64,
}

pub fn mild_residual(f: &TimeSeries, q: &CollisionQuadrature, alpha: f64, beta: f64) -> Result<MildResidual> {
    let dt = f.dt();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for m in 1..f.len().saturating_sub(1) {
        let qf = q.apply_q(&f.fields[m], &f.fields[m])?;
        scale = scale.max(qf.weighted_sup_norm(alpha, beta));
        let d = f.fields[m + 1].sub(&f.fields[m - 1])?.scale(0.5 / dt);
        worst = worst.max(d.sub(&qf)?.weighted_sup_norm(alpha, beta));
    }
    Ok(MildResidual {
        absolute: worst,
        relative: if scale > 0.0 { worst / scale } else { 0.0 },
        dt,
    })
}

/// [`ks_solve`] followed by the residual check; `Nt` is doubled once when the
/// relative residual exceeds `opts.residual_tol`.
pub fn solve_with_refinement(f0: &PhaseField, barrier: &BarrierPair, t_end: f64, nt: usize, opts: &SolverOptions, q: &CollisionQuadrature) -> Result<(Solution, MildResidual)> {
    let (alpha, beta) = barrier.rates();
    let sol = ks_solve(f0, barrier, t_end, nt, opts, q)?;
    let res = mild_residual(&sol.f, q, alpha, beta)?;
    if opts.auto_refine && res.relative > opts.residual_tol {
        let sol2 = ks_solve(f0, barrier, t_end, 2 * nt, opts, q)?;
        let res2 = mild_residual(&sol2.f, q, alpha, beta)?;
        return Ok((sol2, res2));
    }
    Ok((sol, res))
}

/// Beginning condition `0 ≤ l₀ ≤ l₁ ≤ u₁ ≤ u₀` for the near-vacuum pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VacuumBeginning {
    pub pass: bool,
    pub worst_violation: f64,
}

pub fn vacuum_beginning_condition_check(f0: &PhaseField, barrier: &VacuumBarrier, t_end: f64, nt: usize, q: &CollisionQuadrature) -> Result<VacuumBeginning> {
    let pair = BarrierPair::Vacuum(*barrier);
    let times = time_grid(0.0, t_end, nt);
    let l0 = pair.lower_series(f0.grid, &times)?;
    let u0 = pair.upper_series(f0.grid, &times)?;
    let (l1, u1) = linear_step(&l0, &u0, f0, q)?;
    let scale = u0.fields[0].max_abs().max(f64::MIN_POSITIVE);
    let worst = order_violation(&l0, &l1).0.max(order_violation(&l1, &u1).0).max(order_violation(&u1, &u0).0);
    let neg = l0.fields.iter().flat_map(|f| f.values.iter()).fold(0.0f64, |a, &v| a.max(-v));
    let worst = worst.max(neg) / scale;
    Ok(VacuumBeginning {
        pass: worst <= ORDER_TOL,
        worst_violation: worst,
    })
}
