//! Post-processing checks on solver runs: finite differences and gradient growth,
//! `L^γ_v` decay, Lebesgue bounds for `Q±`, weak norms of the potential and
//! stability between paired runs.
//!
//! Every check returns a trace (for CSV output) and a [`Verdict`]. Constants the
//! estimates leave unspecified are measured from the run and reported.

use std::f64::consts::SQRT_2;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::beta::checked_beta;

use crate::barriers::k_alpha_beta;
use crate::collision::CollisionQuadrature;
use crate::error::{domain, KbError, Result};
use crate::kernel::{sphere_area, CollisionKernel};
use crate::phase::{flatten, from_trajectory_with, norm2, shift_x, unflatten, Frame, MaxwellianSpec, PhaseField, PhaseGrid, Point, MAX_DIM};
use crate::quad::{integrate_with_breaks, QuadTolerance};
use crate::solver::{Solution, TimeSeries};

/// Relative slack for the translation step to count as a whole number of cells.
const STEP_RTOL: f64 = 1e-9;

/// Noise floor added to gradient envelopes, relative to `‖f₀‖_{L^p}/h`.
pub const NOISE_FLOOR_REL: f64 = 1e-9;

/// Allowed growth of the second-half maximum over the first-half maximum.
pub const NO_GROWTH_FACTOR: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    /// Precondition unmet; reported, not failed.
    pub skipped: bool,
    pub worst_ratio: f64,
    pub location: String,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: &str, pass: bool, worst_ratio: f64, location: String, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            skipped: false,
            worst_ratio,
            location,
            detail,
        }
    }

    pub fn skipped(name: &str, detail: String) -> Self {
        Self {
            name: name.into(),
            pass: true,
            skipped: true,
            worst_ratio: 0.0,
            location: String::new(),
            detail,
        }
    }
}

/// Writes named columns of equal length as CSV.
pub fn write_columns_csv(path: &Path, header: &[String], columns: &[Vec<f64>]) -> Result<()> {
    if header.len() != columns.len() {
        return Err(KbError::Contract("header and column counts differ".into()));
    }
    let rows = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != rows) {
        return Err(KbError::Contract("trace columns have different lengths".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in 0..rows {
        w.write_record(columns.iter().map(|c| format!("{:e}", c[r])))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Position,
    Velocity,
}

/// `D_{h,ê} f = (f(· + hê) - f)/h` in position or velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifferenceOperator {
    pub variable: Variable,
    pub direction: Point,
    pub h: f64,
}

impl DifferenceOperator {
    pub fn new(variable: Variable, direction: Point, h: f64) -> Result<Self> {
        let len = direction.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (len - 1.0).abs() > 1e-12 {
            return domain(format!("difference direction must be a unit vector, got length {len}"));
        }
        if !(h.is_finite() && h > 0.0) {
            return domain(format!("difference step must be positive, got {h}"));
        }
        Ok(Self { variable, direction, h })
    }

    /// Step of `cells` grid cells along coordinate `axis`.
    pub fn axis(variable: Variable, axis: usize, grid: &PhaseGrid, cells: usize) -> Result<Self> {
        if axis >= grid.dim() || cells == 0 {
            return domain(format!("need axis < {} and a positive cell count", grid.dim()));
        }
        let mut dir = [0.0; MAX_DIM];
        dir[axis] = 1.0;
        let cell = match variable {
            Variable::Position => grid.hx(),
            Variable::Velocity => grid.hv(),
        };
        Self::new(variable, dir, cells as f64 * cell)
    }

    /// Index offsets of the translation `h·direction` on `grid`.
    pub fn steps(&self, grid: &PhaseGrid) -> Result<[isize; MAX_DIM]> {
        let cell = match self.variable {
            Variable::Position => grid.hx(),
            Variable::Velocity => grid.hv(),
        };
        let mut out = [0isize; MAX_DIM];
        for d in 0..MAX_DIM {
            let k = self.h * self.direction[d] / cell;
            if d >= grid.dim() {
                if k != 0.0 {
                    return domain("direction has components beyond the grid dimension");
                }
                continue;
            }
            let r = k.round();
            if (k - r).abs() > STEP_RTOL * k.abs().max(1.0) {
                return domain(format!(
                    "step h·dir[{d}] = {} is not a multiple of the cell size {cell}",
                    self.h * self.direction[d]
                ));
            }
            out[d] = r as isize;
        }
        Ok(out)
    }
}

/// Storage index of each cell's translate, `None` outside the box.
fn neighbours(grid: &PhaseGrid, d: &DifferenceOperator) -> Result<Vec<Option<usize>>> {
    let steps = d.steps(grid)?;
    let dim = grid.dim();
    let (len, count) = match d.variable {
        Variable::Position => (grid.nx(), grid.x_cells()),
        Variable::Velocity => (grid.nv(), grid.v_cells()),
    };
    let map: Vec<Option<usize>> = (0..count)
        .map(|flat| {
            let mut idx = unflatten(flat, len, dim);
            for a in 0..dim {
                let k = idx[a] as isize + steps[a];
                if k < 0 || k >= len as isize {
                    return None;
                }
                idx[a] = k as usize;
            }
            Some(flatten(&idx, len, dim))
        })
        .collect();
    let nxc = grid.x_cells();
    Ok((0..grid.cells())
        .map(|c| {
            let (ix, iv) = (c % nxc, c / nxc);
            match d.variable {
                Variable::Position => map[ix].map(|j| grid.index(j, iv)),
                Variable::Velocity => map[iv].map(|j| grid.index(ix, j)),
            }
        })
        .collect())
}

/// `τf = f(· + h·dir)`, zero outside the box.
pub fn translate(f: &PhaseField, d: &DifferenceOperator) -> Result<PhaseField> {
    let nb = neighbours(&f.grid, d)?;
    let values = nb.iter().map(|j| j.map_or(0.0, |j| f.values[j])).collect();
    Ok(PhaseField { values, ..f.clone() })
}

/// `(f(· + h·dir) - f)/h` with zero extension outside the box.
pub fn finite_difference(f: &PhaseField, d: &DifferenceOperator) -> Result<PhaseField> {
    let nb = neighbours(&f.grid, d)?;
    let inv = 1.0 / d.h;
    let values = nb
        .iter()
        .zip(&f.values)
        .map(|(j, &v)| (j.map_or(0.0, |j| f.values[j]) - v) * inv)
        .collect();
    Ok(PhaseField { values, ..f.clone() })
}

/// Cells whose translate stays inside the box.
pub fn interior_mask(grid: &PhaseGrid, d: &DifferenceOperator) -> Result<Vec<bool>> {
    Ok(neighbours(grid, d)?.iter().map(Option::is_some).collect())
}

/// Velocity difference of the lab-frame solution read off a trajectory-frame slice:
/// `[f^#(t, y - t·h·v̂, v + h·v̂) - f^#(t, y, v)]/h` is `D_v f` at lab point `y + tv`.
pub fn trajectory_velocity_difference(f: &PhaseField, d: &DifferenceOperator, reference: &MaxwellianSpec) -> Result<PhaseField> {
    if d.variable != Variable::Velocity {
        return domain("expected a velocity difference operator");
    }
    if f.frame != Frame::Trajectory {
        return Err(KbError::Contract("expected a trajectory-frame field".into()));
    }
    let shifted = translate(f, d)?;
    let moved = if f.t == 0.0 {
        shifted
    } else {
        let mut s = [0.0; MAX_DIM];
        for k in 0..f.grid.dim() {
            s[k] = -f.t * d.h * d.direction[k];
        }
        shift_x(&shifted, |_| s, Some(reference))
    };
    Ok(moved.sub(f)?.scale(1.0 / d.h))
}

fn masked_lp(f: &PhaseField, mask: &[bool], p: f64) -> f64 {
    let vals = f.values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v.abs());
    if p.is_infinite() {
        return vals.fold(0.0, f64::max);
    }
    (vals.map(|v| v.powf(p)).sum::<f64>() * f.grid.cell_volume()).powf(1.0 / p)
}

fn masked_weighted_sup(f: &PhaseField, mask: &[bool], alpha: f64, beta: f64) -> f64 {
    let masked: Vec<f64> = f.values.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    PhaseField {
        values: masked,
        ..f.clone()
    }
    .weighted_sup_norm(alpha, beta)
}

/// Lab-frame copy of a trajectory slice, stamped with lab time `lab_t`.
pub fn lab_slice(f: &PhaseField, reference: &MaxwellianSpec, lab_t: f64) -> Result<PhaseField> {
    let mut lab = if f.t == 0.0 {
        PhaseField {
            frame: Frame::Lab,
            ..f.clone()
        }
    } else {
        from_trajectory_with(f, Some(reference))?
    };
    lab.t = lab_t;
    Ok(lab)
}

/// `sup_x ‖f(x, ·)‖_{L^γ_v}` with the maximising spatial cell.
pub fn lgamma_v_sup(lab: &PhaseField, gamma: f64) -> (f64, usize) {
    (0..lab.grid.x_cells())
        .map(|ix| (lab.lp_v_norm(ix, gamma), ix))
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

fn gamma_of(kernel: &CollisionKernel) -> f64 {
    let n = kernel.dim() as f64;
    n / (n - kernel.lambda())
}

fn lab_times(sol: &Solution) -> Vec<f64> {
    (0..sol.f.len()).map(|m| sol.lab_time(m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LgammaTrace {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub barrier_norms: Vec<f64>,
    pub gamma: f64,
    /// Decay exponent `n - λ`.
    pub decay: f64,
    /// `max_t (1+t)^{n-λ} sup_x ‖f‖_{L^γ_v}`.
    pub fitted_c: f64,
    /// Same constant for the upper barrier.
    pub barrier_c: f64,
}

impl LgammaTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = ["t", "lgamma_sup", "barrier_lgamma_sup"].map(String::from);
        write_columns_csv(path, &header, &[self.times.clone(), self.norms.clone(), self.barrier_norms.clone()])
    }
}

fn lgamma_series(series: &TimeSeries, times: &[f64], reference: &MaxwellianSpec, gamma: f64) -> Result<Vec<f64>> {
    series
        .fields
        .par_iter()
        .zip(times)
        .map(|(f, &t)| Ok(lgamma_v_sup(&lab_slice(f, reference, t)?, gamma).0))
        .collect()
}

/// Lab-frame `L^γ_v` decay of the solution against the `(1+t)^{-(n-λ)}` envelope
/// carried by its upper barrier.
pub fn lgamma_decay_check(sol: &Solution, kernel: &CollisionKernel, reference: &MaxwellianSpec) -> Result<(LgammaTrace, Verdict)> {
    let gamma = gamma_of(kernel);
    let decay = kernel.dim() as f64 - kernel.lambda();
    let times = lab_times(sol);
    let norms = lgamma_series(&sol.f, &times, reference, gamma)?;
    let barrier_norms = lgamma_series(&sol.u0, &times, reference, gamma)?;
    let fit = |v: &[f64]| {
        v.iter()
            .zip(&times)
            .map(|(n, t)| n * (1.0 + t).powf(decay))
            .enumerate()
            .fold((0.0, 0), |a, (m, c)| if c > a.0 { (c, m) } else { a })
    };
    let (fitted_c, at) = fit(&norms);
    let (barrier_c, _) = fit(&barrier_norms);
    let ratio = if barrier_c > 0.0 { fitted_c / barrier_c } else { 0.0 };
    let pass = fitted_c.is_finite() && barrier_c.is_finite() && ratio <= 1.0 + 1e-9;
    let verdict = Verdict::new(
        "lgamma_decay",
        pass,
        ratio,
        format!("t = {}", times[at]),
        format!("gamma = {gamma}, fitted C = {fitted_c:e}, barrier C = {barrier_c:e}"),
    );
    Ok((
        LgammaTrace {
            times,
            norms,
            barrier_norms,
            gamma,
            decay,
            fitted_c,
            barrier_c,
        },
        verdict,
    ))
}

/// Norm history of one difference direction against its envelope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionTrace {
    pub axis: usize,
    pub norms: Vec<f64>,
    pub envelope: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityTrace {
    pub times: Vec<f64>,
    pub p: f64,
    pub gamma: f64,
    /// Measured ratio `(‖Q₊(Df,f)‖ + ‖Q₊(τf,Df)‖ + ‖Q₋(τf,Df)‖)/(‖Df‖(‖f‖_γ + ‖τf‖_γ))` at `t = 0`.
    pub hls_constant: f64,
    /// `Λ` with `sup_x (‖f‖_γ + ‖τf‖_γ) ≤ Λ (1+t)^{-(n-λ)}`.
    pub decay_constant: f64,
    /// `K = hls_constant · decay_constant`.
    pub k: f64,
    /// Multiplier of the initial norm in the envelope.
    pub growth: f64,
    pub noise_floor: f64,
    pub directions: Vec<DirectionTrace>,
}

impl RegularityTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["t".to_string()];
        let mut cols = vec![self.times.clone()];
        for d in &self.directions {
            header.push(format!("norm_axis{}", d.axis));
            header.push(format!("envelope_axis{}", d.axis));
            cols.push(d.norms.clone());
            cols.push(d.envelope.clone());
        }
        write_columns_csv(path, &header, &cols)
    }

    fn verdict(&self, name: &str) -> Verdict {
        let mut worst = (0.0, 0, 0);
        for d in &self.directions {
            for (m, (n, e)) in d.norms.iter().zip(&d.envelope).enumerate() {
                let r = n / (e + self.noise_floor);
                if r > worst.0 || r.is_nan() {
                    worst = (r, d.axis, m);
                }
            }
        }
        Verdict::new(
            name,
            worst.0 <= 1.0,
            worst.0,
            format!("axis {}, t = {}", worst.1, self.times[worst.2]),
            format!("p = {}, K = {:e}, growth factor = {:e}", self.p, self.k, self.growth),
        )
    }
}

/// Per-cell ratio of the three collision terms of `D Q(f,f)` to the Hölder/HLS product;
/// the maximum over interior cells carrying a non-negligible difference.
fn hls_ratio(lab0: &PhaseField, d: &DifferenceOperator, q: &CollisionQuadrature, p: f64, gamma: f64) -> Result<f64> {
    let df = finite_difference(lab0, d)?;
    let tf = translate(lab0, d)?;
    let g1 = q.gain(&df, lab0)?;
    let g2 = q.gain(&tf, &df)?;
    let r = q.loss_rate(&df)?;
    let loss = PhaseField {
        values: tf.values.iter().zip(&r.values).map(|(a, b)| a * b).collect(),
        ..tf.clone()
    };
    let mask = interior_mask(&lab0.grid, d)?;
    let nxc = lab0.grid.x_cells();
    let rows: Vec<(f64, f64)> = (0..nxc)
        .filter(|&ix| mask[ix])
        .map(|ix| {
            let num = g1.lp_v_norm(ix, p) + g2.lp_v_norm(ix, p) + loss.lp_v_norm(ix, p);
            let den = df.lp_v_norm(ix, p) * (lab0.lp_v_norm(ix, gamma) + tf.lp_v_norm(ix, gamma));
            (num, den)
        })
        .collect();
    let top = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(rows
        .iter()
        .filter(|r| r.1 > 1e-6 * top && r.1 > 0.0)
        .map(|r| r.0 / r.1)
        .fold(0.0, f64::max))
}

fn check_exponent(p: f64, kernel: &CollisionKernel) -> Result<f64> {
    if !(p > 1.0 && p.is_finite()) {
        return domain(format!("gradient checks need 1 < p < ∞, got {p}"));
    }
    let m = kernel.dim() as f64 - kernel.lambda() - 1.0;
    if !(m > 0.0) {
        return domain("gradient envelopes need n - λ > 1");
    }
    Ok(m)
}

/// Position-difference norms `‖D_{h,e_a} f(t)‖_{L^p}` over interior cells, per axis.
fn position_norms(series: &TimeSeries, p: f64) -> Result<Vec<Vec<f64>>> {
    let grid = series.grid();
    (0..grid.dim())
        .map(|a| {
            let d = DifferenceOperator::axis(Variable::Position, a, &grid, 1)?;
            let mask = interior_mask(&grid, &d)?;
            series
                .fields
                .par_iter()
                .map(|f| Ok(masked_lp(&finite_difference(f, &d)?, &mask, p)))
                .collect()
        })
        .collect()
}

/// Position-gradient growth against `‖Df₀‖_{L^p}·exp(K/(n-λ-1))`, with `K` measured
/// at `t = 0` from the collision terms and the run's `L^γ_v` decay constant.
pub fn gradient_gronwall_check(sol: &Solution, q: &CollisionQuadrature, p: f64, reference: &MaxwellianSpec) -> Result<(RegularityTrace, Verdict)> {
    let kernel = q.kernel();
    let m = check_exponent(p, kernel)?;
    let gamma = gamma_of(kernel);
    let grid = sol.f.grid();
    let (lg, _) = lgamma_decay_check(sol, kernel, reference)?;
    let decay_constant = 2.0 * lg.fitted_c;
    let lab0 = lab_slice(&sol.f.fields[0], reference, 0.0)?;
    let mut hls_constant: f64 = 0.0;
    for a in 0..grid.dim() {
        let d = DifferenceOperator::axis(Variable::Position, a, &grid, 1)?;
        hls_constant = hls_constant.max(hls_ratio(&lab0, &d, q, p, gamma)?);
    }
    let k = hls_constant * decay_constant;
    let growth = (k / m).exp();
    let norms = position_norms(&sol.f, p)?;
    let directions = norms
        .into_iter()
        .enumerate()
        .map(|(axis, norms)| DirectionTrace {
            axis,
            envelope: vec![norms[0] * growth; norms.len()],
            norms,
        })
        .collect();
    let trace = RegularityTrace {
        times: lab_times(sol),
        p,
        gamma,
        hls_constant,
        decay_constant,
        k,
        growth,
        noise_floor: NOISE_FLOOR_REL * sol.f.fields[0].lp_norm(p) / grid.hx(),
        directions,
    };
    let verdict = trace.verdict("gradient_gronwall");
    Ok((trace, verdict))
}

/// `‖∇_x f‖_{L^p}` from forward differences on cells interior for every axis.
fn gradient_norm(f: &PhaseField, p: f64) -> Result<f64> {
    let grid = f.grid;
    let mut sq = vec![0.0; grid.cells()];
    let mut mask = vec![true; grid.cells()];
    for a in 0..grid.dim() {
        let d = DifferenceOperator::axis(Variable::Position, a, &grid, 1)?;
        let df = finite_difference(f, &d)?;
        for ((s, m), (v, inside)) in sq.iter_mut().zip(mask.iter_mut()).zip(df.values.iter().zip(interior_mask(&grid, &d)?)) {
            *s += v * v;
            *m &= inside;
        }
    }
    let field = PhaseField {
        values: sq.into_iter().map(f64::sqrt).collect(),
        ..f.clone()
    };
    Ok(masked_lp(&field, &mask, p))
}

/// Velocity-gradient growth against `C(‖D_v f₀‖ + t‖∇_x f₀‖)` with
/// `C = exp(2K/(n-λ-1))` and `K` taken from the position check.
pub fn velocity_gradient_check(sol: &Solution, kernel: &CollisionKernel, p: f64, reference: &MaxwellianSpec, position: &RegularityTrace) -> Result<(RegularityTrace, Verdict)> {
    let m = check_exponent(p, kernel)?;
    let grid = sol.f.grid();
    let growth = (2.0 * position.k / m).exp();
    let times = lab_times(sol);
    let grad_x0 = gradient_norm(&sol.f.fields[0], p)?;
    let mut directions = Vec::new();
    for a in 0..grid.dim() {
        let d = DifferenceOperator::axis(Variable::Velocity, a, &grid, 1)?;
        let mask = interior_mask(&grid, &d)?;
        let norms: Vec<f64> = sol
            .f
            .fields
            .par_iter()
            .map(|f| Ok(masked_lp(&trajectory_velocity_difference(f, &d, reference)?, &mask, p)))
            .collect::<Result<_>>()?;
        let envelope = times.iter().map(|t| growth * (norms[0] + t * grad_x0)).collect();
        directions.push(DirectionTrace { axis: a, norms, envelope });
    }
    let trace = RegularityTrace {
        times,
        p,
        gamma: position.gamma,
        hls_constant: position.hls_constant,
        decay_constant: position.decay_constant,
        k: position.k,
        growth,
        noise_floor: NOISE_FLOOR_REL * sol.f.fields[0].lp_norm(p) / grid.hv(),
        directions,
    };
    let verdict = trace.verdict("velocity_gradient");
    Ok((trace, verdict))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedGradientReport {
    pub datum_norm: f64,
    pub threshold: f64,
    /// `2‖Df₀‖_{α,β}/(2-√2)` per axis.
    pub bounds: Vec<f64>,
    /// `max_t ‖(Df)^#(t)‖_{α,β}` per axis.
    pub maxima: Vec<f64>,
}

/// Weighted sup norm of position differences against `2‖Df₀‖_{α,β}/(2-√2)`, for
/// near-vacuum runs whose datum satisfies `‖f₀‖_{2α,β} ≤ 3/(16 k_{2α,β})`.
pub fn weighted_gradient_check(sol: &Solution, kernel: &CollisionKernel, alpha: f64, beta: f64) -> Result<(Option<WeightedGradientReport>, Verdict)> {
    const NAME: &str = "weighted_gradient";
    if sol.report.time_offset != 0.0 {
        return Ok((None, Verdict::skipped(NAME, "applies to near-vacuum runs only".into())));
    }
    let f0 = &sol.f.fields[0];
    let datum_norm = f0.weighted_sup_norm(2.0 * alpha, beta);
    let threshold = 3.0 / (16.0 * k_alpha_beta(2.0 * alpha, beta, kernel)?);
    if datum_norm > threshold {
        return Ok((
            None,
            Verdict::skipped(NAME, format!("datum norm {datum_norm:e} in the (2α, β) weight exceeds {threshold:e}")),
        ));
    }
    let grid = sol.f.grid();
    let floor = NOISE_FLOOR_REL * f0.weighted_sup_norm(alpha, beta) / grid.hx();
    let mut bounds = Vec::new();
    let mut maxima = Vec::new();
    let mut worst = (0.0, 0, 0.0);
    for a in 0..grid.dim() {
        let d = DifferenceOperator::axis(Variable::Position, a, &grid, 1)?;
        let mask = interior_mask(&grid, &d)?;
        let norms: Vec<f64> = sol
            .f
            .fields
            .par_iter()
            .map(|f| Ok(masked_weighted_sup(&finite_difference(f, &d)?, &mask, alpha, beta)))
            .collect::<Result<_>>()?;
        let bound = 2.0 * norms[0] / (2.0 - SQRT_2);
        for (m, n) in norms.iter().enumerate() {
            let r = n / (bound + floor);
            if r > worst.0 {
                worst = (r, a, sol.lab_time(m));
            }
        }
        bounds.push(bound);
        maxima.push(norms.iter().copied().fold(0.0, f64::max));
    }
    let verdict = Verdict::new(
        NAME,
        worst.0 <= 1.0,
        worst.0,
        format!("axis {}, t = {}", worst.1, worst.2),
        format!("datum norm {datum_norm:e} <= {threshold:e}"),
    );
    Ok((
        Some(WeightedGradientReport {
            datum_norm,
            threshold,
            bounds,
            maxima,
        }),
        verdict,
    ))
}

/// Weak `L^{n/λ}` norm of `|u|^{-λ}`: `|S^{n-1}|/(n-λ)·(|S^{n-1}|/n)^{λ/n-1}`.
pub fn weak_norm_closed_form(dim: usize, lambda: f64) -> Result<f64> {
    let n = dim as f64;
    if !(lambda > 0.0 && lambda < n) {
        return domain(format!("weak norm needs 0 < λ < n, got λ = {lambda}"));
    }
    let s = sphere_area(dim)?;
    Ok(s / (n - lambda) * (s / n).powf(lambda / n - 1.0))
}

/// `sup_ρ |B_ρ|^{-1/s'} ∫_{B_ρ} |u|^{-λ} du` over the given radii, by quadrature.
pub fn weak_norm_over_balls(dim: usize, lambda: f64, radii: &[f64]) -> Result<f64> {
    let n = dim as f64;
    if !(lambda > 0.0 && lambda < n) {
        return domain(format!("weak norm needs 0 < λ < n, got λ = {lambda}"));
    }
    let s = sphere_area(dim)?;
    let inv_sp = 1.0 - lambda / n;
    let mut best: f64 = 0.0;
    for &rho in radii {
        if !(rho > 0.0) {
            return domain("ball radii must be positive");
        }
        let mass = integrate_with_breaks(|r| s * r.powf(n - 1.0 - lambda), &[0.0, rho], QuadTolerance::relative(1e-12))?;
        let vol = s * rho.powf(n) / n;
        best = best.max(vol.powf(-inv_sp) * mass);
    }
    Ok(best)
}

/// `|u|^{-λ} = Φ₁ + Φ₂` with `Φ₁ = (|u|^{-λ} - 1)·1{|u| ≤ 1}` and `Φ₂ = min(1, |u|^{-λ})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PotentialSplit {
    pub dim: usize,
    pub lambda: f64,
    pub s: f64,
    /// `‖Φ₁‖_{L^s}`.
    pub phi1_norm: f64,
    /// `‖Φ₂‖_{L^∞}`.
    pub phi2_sup: f64,
}

impl PotentialSplit {
    pub fn phi1(&self, u: &Point) -> f64 {
        let r = norm2(u, self.dim).sqrt();
        if self.lambda == 0.0 || r > 1.0 {
            0.0
        } else {
            r.powf(-self.lambda) - 1.0
        }
    }

    pub fn phi2(&self, u: &Point) -> f64 {
        let r = norm2(u, self.dim).sqrt();
        if r <= 1.0 {
            1.0
        } else {
            r.powf(-self.lambda)
        }
    }
}

/// Splits the potential; `‖Φ₁‖_s^s = |S^{n-1}|/λ · B(n/λ - s, s + 1)` after `u = r^λ`.
pub fn potential_split(kernel: &CollisionKernel, s: f64) -> Result<PotentialSplit> {
    let dim = kernel.dim();
    let n = dim as f64;
    let lambda = kernel.lambda();
    if !(s >= 1.0 && s.is_finite()) {
        return domain(format!("split exponent must satisfy 1 <= s < ∞, got {s}"));
    }
    if lambda > 0.0 && s >= n / lambda {
        return domain(format!("Φ₁ is in L^s only for s < n/λ = {}, got s = {s}", n / lambda));
    }
    let phi1_norm = if lambda == 0.0 {
        0.0
    } else {
        let b = checked_beta(n / lambda - s, s + 1.0).map_err(|e| KbError::Domain(e.to_string()))?;
        (sphere_area(dim)? / lambda * b).powf(1.0 / s)
    };
    Ok(PotentialSplit {
        dim,
        lambda,
        s,
        phi1_norm,
        phi2_sup: 1.0,
    })
}

/// Midpoint of the admissible split exponents `(n/(n-1), n/λ)`.
pub fn default_split_exponent(dim: usize, lambda: f64) -> f64 {
    let n = dim as f64;
    let lo = n / (n - 1.0);
    if lambda > 0.0 {
        0.5 * (lo + n / lambda)
    } else {
        lo + 1.0
    }
}

/// `1/p + 1/q + λ/n = 1 + 1/r` with all exponents in `[1, ∞]`.
pub fn validate_exponents(dim: usize, lambda: f64, p: f64, q: f64, r: f64) -> Result<()> {
    for (name, e) in [("p", p), ("q", q), ("r", r)] {
        if !(e >= 1.0) {
            return domain(format!("exponent {name} must lie in [1, ∞], got {e}"));
        }
    }
    let lhs = 1.0 / p + 1.0 / q + lambda / dim as f64;
    let rhs = 1.0 + 1.0 / r;
    if (lhs - rhs).abs() > 1e-12 {
        return domain(format!("exponents violate 1/p + 1/q + λ/n = 1 + 1/r ({lhs} vs {rhs})"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QEstimateReport {
    /// `‖Q₊(f,g)‖_{L^r_v} / (‖f‖_p ‖g‖_q N)`.
    pub gain_ratio: f64,
    pub loss_ratio: f64,
    /// `N`: weak `L^{n/λ}` norm of the potential (1 for `λ = 0`).
    pub potential_norm: f64,
}

/// Ratios of `‖Q±(f,g)‖_{L^r_v}` to `‖f‖_{L^p_v}‖g‖_{L^q_v}` times the potential norm
/// on the velocity slice at spatial cell `x_flat` of lab-frame fields.
pub fn q_estimate_check(f: &PhaseField, g: &PhaseField, p: f64, q_exp: f64, r: f64, quad: &CollisionQuadrature, x_flat: usize) -> Result<QEstimateReport> {
    let kernel = quad.kernel();
    validate_exponents(kernel.dim(), kernel.lambda(), p, q_exp, r)?;
    if f.frame != Frame::Lab || g.frame != Frame::Lab {
        return Err(KbError::Contract("q_estimate_check expects lab-frame fields".into()));
    }
    if x_flat >= f.grid.x_cells() {
        return domain("spatial cell out of range");
    }
    let potential_norm = if kernel.lambda() > 0.0 {
        weak_norm_closed_form(kernel.dim(), kernel.lambda())?
    } else {
        1.0
    };
    let den = f.lp_v_norm(x_flat, p) * g.lp_v_norm(x_flat, q_exp) * potential_norm;
    if den == 0.0 {
        return Ok(QEstimateReport {
            gain_ratio: 0.0,
            loss_ratio: 0.0,
            potential_norm,
        });
    }
    let gain = quad.gain(f, g)?;
    let rate = quad.loss_rate(g)?;
    let loss = PhaseField {
        values: f.values.iter().zip(&rate.values).map(|(a, b)| a * b).collect(),
        ..f.clone()
    };
    Ok(QEstimateReport {
        gain_ratio: gain.lp_v_norm(x_flat, r) / den,
        loss_ratio: loss.lp_v_norm(x_flat, r) / den,
        potential_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QEstimateSweep {
    pub max_gain: f64,
    pub max_loss: f64,
    pub refined_max_gain: f64,
    pub refined_max_loss: f64,
    pub pass: bool,
}

fn random_bump(grid: PhaseGrid, rng: &mut ChaCha8Rng) -> PhaseField {
    let dim = grid.dim();
    let a: f64 = rng.gen_range(0.5..2.0);
    let b: f64 = rng.gen_range(0.5..2.0);
    let mut c = [0.0; MAX_DIM];
    for cd in c.iter_mut().take(dim) {
        *cd = rng.gen_range(-1.0..1.0);
    }
    PhaseField::from_fn(grid, 0.0, Frame::Lab, |_, v| {
        let mut d2 = 0.0;
        for k in 0..dim {
            d2 += (v[k] - c[k]).powi(2);
        }
        a * (-b * d2).exp()
    })
}

/// Maximum ratios over `pairs` random Gaussian pairs, then again with `Nv` doubled;
/// passes when the ratios are finite and the refinement changes them by less than 2×.
pub fn q_estimate_sweep(kernel: &CollisionKernel, grid: PhaseGrid, n_sigma: usize, exps: (f64, f64, f64), pairs: usize, seed: u64) -> Result<QEstimateSweep> {
    let fine = PhaseGrid::new(grid.dim(), grid.lx(), grid.lv(), grid.nx(), 2 * grid.nv())?;
    let run = |g: PhaseGrid| -> Result<(f64, f64)> {
        let quad = CollisionQuadrature::new(kernel.clone(), g, n_sigma, crate::collision::InterpolationWeight::none())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = (0.0f64, 0.0f64);
        for _ in 0..pairs {
            let f = random_bump(g, &mut rng);
            let h = random_bump(g, &mut rng);
            let rep = q_estimate_check(&f, &h, exps.0, exps.1, exps.2, &quad, 0)?;
            best = (best.0.max(rep.gain_ratio), best.1.max(rep.loss_ratio));
        }
        Ok(best)
    };
    let (max_gain, max_loss) = run(grid)?;
    let (refined_max_gain, refined_max_loss) = run(fine)?;
    let within = |a: f64, b: f64| a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0 && (a / b).max(b / a) <= 2.0;
    Ok(QEstimateSweep {
        max_gain,
        max_loss,
        refined_max_gain,
        refined_max_loss,
        pass: within(max_gain, refined_max_gain) && within(max_loss, refined_max_loss),
    })
}

/// One monitored ratio history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormTrace {
    pub norm: String,
    pub ratios: Vec<f64>,
    pub first_half_max: f64,
    pub second_half_max: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityTrace {
    pub times: Vec<f64>,
    pub traces: Vec<NormTrace>,
    pub split: PotentialSplit,
    /// Conjugate exponent of `split.s`.
    pub s_prime: f64,
    /// `n/s'`, the decay rate of `‖f+g‖_{L^{s'}_v}`; above 1 for an admissible split.
    pub decay_rate: f64,
}

impl StabilityTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["t".to_string()];
        let mut cols = vec![self.times.clone()];
        for t in &self.traces {
            header.push(t.norm.clone());
            cols.push(t.ratios.clone());
        }
        write_columns_csv(path, &header, &cols)
    }
}

fn norm_trace(name: &str, times: &[f64], values: Vec<f64>) -> NormTrace {
    let initial = values[0];
    let ratios: Vec<f64> = values
        .iter()
        .map(|&v| {
            if initial > 0.0 {
                v / initial
            } else if v == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mid = 0.5 * (times[0] + times[times.len() - 1]);
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for (t, r) in times.iter().zip(&ratios) {
        if *t <= mid {
            first = first.max(*r);
        } else {
            second = second.max(*r);
        }
    }
    NormTrace {
        norm: name.into(),
        pass: ratios.iter().all(|r| r.is_finite()) && second <= NO_GROWTH_FACTOR * first,
        ratios,
        first_half_max: first,
        second_half_max: second,
    }
}

/// `‖f - g‖(t)/‖f₀ - g₀‖` in `L^1`, `L^2`, `L^∞` and the weighted sup norm, with a
/// no-growth monitor on each history.
pub fn stability_compare(f: &Solution, g: &Solution, kernel: &CollisionKernel, alpha: f64, beta: f64) -> Result<(StabilityTrace, Verdict)> {
    if f.f.len() != g.f.len() || f.f.grid() != g.f.grid() || f.report.time_offset != g.report.time_offset || f.f.times() != g.f.times() {
        return domain("stability comparison needs runs on the same grid and time nodes");
    }
    let times = lab_times(f);
    let diffs: Vec<PhaseField> = f.f.fields.iter().zip(&g.f.fields).map(|(a, b)| a.sub(b)).collect::<Result<_>>()?;
    let series = |norm: &dyn Fn(&PhaseField) -> f64| diffs.iter().map(norm).collect::<Vec<f64>>();
    let traces = vec![
        norm_trace("L1", &times, series(&|d| d.lp_norm(1.0))),
        norm_trace("L2", &times, series(&|d| d.lp_norm(2.0))),
        norm_trace("Linf", &times, series(&|d| d.lp_norm(f64::INFINITY))),
        norm_trace("weighted", &times, series(&|d| d.weighted_sup_norm(alpha, beta))),
    ];
    let s = default_split_exponent(kernel.dim(), kernel.lambda());
    let split = potential_split(kernel, s)?;
    let s_prime = s / (s - 1.0);
    let worst = traces
        .iter()
        .map(|t| (t.second_half_max / t.first_half_max.max(f64::MIN_POSITIVE), t.norm.clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    let pass = traces.iter().all(|t| t.pass);
    let verdict = Verdict::new(
        "stability",
        pass,
        worst.0,
        worst.1,
        format!("second-half over first-half maximum, allowed {NO_GROWTH_FACTOR}"),
    );
    Ok((
        StabilityTrace {
            times,
            traces,
            split,
            s_prime,
            decay_rate: kernel.dim() as f64 / s_prime,
        },
        verdict,
    ))
}
