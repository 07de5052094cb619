//! Truncated phase-space grids, fields on them, Maxwellian envelopes and the
//! free-transport (trajectory) change of frame.
//!
//! Values are stored velocity-major: `values[iv * nx^n + ix]`, with both flat
//! indices row-major (last axis fastest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, KbError, Result};

/// Spatial or velocity point; only the first `dim` components are used.
pub type Point = [f64; 3];

pub const MAX_DIM: usize = 3;

/// Tail level used to pick default truncation widths.
pub const TAIL_LEVEL: f64 = 1e-8;

pub fn dot(a: &Point, b: &Point, dim: usize) -> f64 {
    (0..dim).map(|d| a[d] * b[d]).sum()
}

pub fn norm2(a: &Point, dim: usize) -> f64 {
    dot(a, a, dim)
}

/// Row-major multi-index of `flat` over `dim` axes of length `len`.
pub fn unflatten(mut flat: usize, len: usize, dim: usize) -> [usize; MAX_DIM] {
    let mut idx = [0; MAX_DIM];
    for d in (0..dim).rev() {
        idx[d] = flat % len;
        flat /= len;
    }
    idx
}

pub fn flatten(idx: &[usize; MAX_DIM], len: usize, dim: usize) -> usize {
    idx[..dim].iter().fold(0, |acc, &i| acc * len + i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    dim: usize,
    lx: f64,
    lv: f64,
    nx: usize,
    nv: usize,
}

impl PhaseGrid {
    pub fn new(dim: usize, lx: f64, lv: f64, nx: usize, nv: usize) -> Result<Self> {
        let mut problems = Vec::new();
        if !(2..=MAX_DIM).contains(&dim) {
            problems.push(format!("grid dimension must be 2 or 3, got {dim}"));
        }
        if !(lx.is_finite() && lx > 0.0) {
            problems.push(format!("Lx must be positive, got {lx}"));
        }
        if !(lv.is_finite() && lv > 0.0) {
            problems.push(format!("Lv must be positive, got {lv}"));
        }
        if nx < 4 {
            problems.push(format!("Nx must be at least 4, got {nx}"));
        }
        if nv < 4 {
            problems.push(format!("Nv must be at least 4, got {nv}"));
        }
        if !problems.is_empty() {
            return domain(problems.join("; "));
        }
        Ok(Self { dim, lx, lv, nx, nv })
    }

    /// Half-widths chosen so that `exp(-rate·L²) < 1e-8` for the slower decay
    /// rate. A zero velocity rate (infinite mass) reuses the spatial width.
    pub fn with_default_widths(dim: usize, alpha: f64, beta: f64, nx: usize, nv: usize) -> Result<Self> {
        if !(alpha > 0.0) || !(beta >= 0.0) {
            return domain(format!("decay rates need alpha > 0, beta >= 0 (got {alpha}, {beta})"));
        }
        let rate = if beta > 0.0 { alpha.min(beta) } else { alpha };
        let l = default_half_width(rate);
        Self::new(dim, l, l, nx, nv)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lx(&self) -> f64 {
        self.lx
    }
    pub fn lv(&self) -> f64 {
        self.lv
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nv(&self) -> usize {
        self.nv
    }
    pub fn hx(&self) -> f64 {
        2.0 * self.lx / self.nx as f64
    }
    pub fn hv(&self) -> f64 {
        2.0 * self.lv / self.nv as f64
    }
    /// Number of spatial cells, `Nx^n`.
    pub fn x_cells(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }
    pub fn v_cells(&self) -> usize {
        self.nv.pow(self.dim as u32)
    }
    pub fn cells(&self) -> usize {
        self.x_cells() * self.v_cells()
    }
    /// Phase-space cell volume `hx^n hv^n`.
    pub fn cell_volume(&self) -> f64 {
        (self.hx() * self.hv()).powi(self.dim as i32)
    }
    pub fn v_cell_volume(&self) -> f64 {
        self.hv().powi(self.dim as i32)
    }
    pub fn x_cell_volume(&self) -> f64 {
        self.hx().powi(self.dim as i32)
    }

    pub fn x_coord(&self, i: usize) -> f64 {
        -self.lx + (i as f64 + 0.5) * self.hx()
    }
    pub fn v_coord(&self, i: usize) -> f64 {
        -self.lv + (i as f64 + 0.5) * self.hv()
    }

    pub fn x_index(&self, flat: usize) -> [usize; MAX_DIM] {
        unflatten(flat, self.nx, self.dim)
    }
    pub fn v_index(&self, flat: usize) -> [usize; MAX_DIM] {
        unflatten(flat, self.nv, self.dim)
    }

    pub fn x_center(&self, flat: usize) -> Point {
        let idx = self.x_index(flat);
        let mut p = [0.0; MAX_DIM];
        for d in 0..self.dim {
            p[d] = self.x_coord(idx[d]);
        }
        p
    }

    pub fn v_center(&self, flat: usize) -> Point {
        let idx = self.v_index(flat);
        let mut p = [0.0; MAX_DIM];
        for d in 0..self.dim {
            p[d] = self.v_coord(idx[d]);
        }
        p
    }

    /// Flat storage index of `(x-cell, v-cell)`.
    pub fn index(&self, x_flat: usize, v_flat: usize) -> usize {
        v_flat * self.x_cells() + x_flat
    }

    /// Same grid with `Nx` and `Nv` multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.dim, self.lx, self.lv, self.nx * factor, self.nv * factor)
    }
}

pub fn default_half_width(rate: f64) -> f64 {
    // nudged so that the tail is strictly below the level
    (-(TAIL_LEVEL.ln()) / rate).sqrt() * (1.0 + 1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Lab,
    Trajectory,
}

/// `C·exp(-α|x - s·v|² - β|v|²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxwellianSpec {
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub shift: f64,
}

impl MaxwellianSpec {
    pub fn new(c: f64, alpha: f64, beta: f64, shift: f64) -> Result<Self> {
        let m = Self { c, alpha, beta, shift };
        m.validate()?;
        Ok(m)
    }

    /// Unit-amplitude static envelope `M_{α,β}`.
    pub fn unit(alpha: f64, beta: f64) -> Self {
        Self {
            c: 1.0,
            alpha,
            beta,
            shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.c.is_finite() && self.c >= 0.0) {
            problems.push(format!("amplitude C must be >= 0, got {}", self.c));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            problems.push(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            problems.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if !self.shift.is_finite() {
            problems.push("shift must be finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            domain(problems.join("; "))
        }
    }

    pub fn with_amplitude(&self, c: f64) -> Self {
        Self { c, ..*self }
    }

    /// Exponent `α|x - s·v|² + β|v|²`.
    pub fn exponent(&self, x: &Point, v: &Point, dim: usize) -> f64 {
        let mut ax = 0.0;
        let mut bv = 0.0;
        for d in 0..dim {
            let y = x[d] - self.shift * v[d];
            ax += y * y;
            bv += v[d] * v[d];
        }
        self.alpha * ax + self.beta * bv
    }

    pub fn eval(&self, x: &Point, v: &Point, dim: usize) -> f64 {
        self.c * (-self.exponent(x, v, dim)).exp()
    }
}

/// `C·exp(-α|x - s·v|² - β|v|²)` at `(x, v)`.
pub fn maxwellian_eval(m: &MaxwellianSpec, x: &Point, v: &Point, dim: usize) -> f64 {
    m.eval(x, v, dim)
}

/// Real-valued field on a phase grid (differences of solutions may be signed).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField {
    pub grid: PhaseGrid,
    pub t: f64,
    pub frame: Frame,
    pub values: Vec<f64>,
}

impl PhaseField {
    pub fn zeros(grid: PhaseGrid, t: f64, frame: Frame) -> Self {
        Self {
            grid,
            t,
            frame,
            values: vec![0.0; grid.cells()],
        }
    }

    pub fn from_values(grid: PhaseGrid, t: f64, frame: Frame, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(KbError::Contract(format!(
                "field has {} values, grid needs {}",
                values.len(),
                grid.cells()
            )));
        }
        Ok(Self { grid, t, frame, values })
    }

    /// Samples `f(x, v)` at cell centers.
    pub fn from_fn(grid: PhaseGrid, t: f64, frame: Frame, f: impl Fn(&Point, &Point) -> f64) -> Self {
        let nxc = grid.x_cells();
        let xs: Vec<Point> = (0..nxc).map(|i| grid.x_center(i)).collect();
        let mut values = Vec::with_capacity(grid.cells());
        for iv in 0..grid.v_cells() {
            let v = grid.v_center(iv);
            for x in &xs {
                values.push(f(x, &v));
            }
        }
        Self { grid, t, frame, values }
    }

    pub fn maxwellian(grid: PhaseGrid, t: f64, frame: Frame, m: &MaxwellianSpec) -> Self {
        let dim = grid.dim();
        Self::from_fn(grid, t, frame, |x, v| m.eval(x, v, dim))
    }

    pub fn at(&self, x_flat: usize, v_flat: usize) -> f64 {
        self.values[self.grid.index(x_flat, v_flat)]
    }

    fn check_compatible(&self, other: &PhaseField) -> Result<()> {
        if self.grid != other.grid {
            return Err(KbError::Contract("fields live on different grids".into()));
        }
        if self.frame != other.frame {
            return Err(KbError::Contract(format!(
                "frame mismatch: {:?} vs {:?}",
                self.frame, other.frame
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &PhaseField) -> Result<PhaseField> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self { values, ..self.clone() })
    }

    pub fn add(&self, other: &PhaseField) -> Result<PhaseField> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { values, ..self.clone() })
    }

    pub fn scale(&self, c: f64) -> PhaseField {
        Self {
            values: self.values.iter().map(|v| c * v).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |f|·exp(α|x|² + β|v|²)` over grid cells.
    pub fn weighted_sup_norm(&self, alpha: f64, beta: f64) -> f64 {
        let envelope = MaxwellianSpec::unit(alpha, beta);
        let g = &self.grid;
        let dim = g.dim();
        let xs: Vec<Point> = (0..g.x_cells()).map(|i| g.x_center(i)).collect();
        let mut best: f64 = 0.0;
        for iv in 0..g.v_cells() {
            let v = g.v_center(iv);
            for (ix, x) in xs.iter().enumerate() {
                let value = self.at(ix, iv).abs();
                if value > 0.0 {
                    best = best.max(value / envelope.eval(x, &v, dim));
                }
            }
        }
        best
    }

    /// Grid `L^p(R^{2n})` norm; `p = ∞` gives the max of `|f|`.
    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.max_abs();
        }
        let vol = self.grid.cell_volume();
        if p == 1.0 {
            return self.values.iter().map(|v| v.abs()).sum::<f64>() * vol;
        }
        (self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * vol).powf(1.0 / p)
    }

    /// `L^p_v` norm of the velocity slice at spatial cell `x_flat`.
    pub fn lp_v_norm(&self, x_flat: usize, p: f64) -> f64 {
        let g = &self.grid;
        let slice = (0..g.v_cells()).map(|iv| self.at(x_flat, iv).abs());
        if p.is_infinite() {
            return slice.fold(0.0, f64::max);
        }
        (slice.map(|v| v.powf(p)).sum::<f64>() * g.v_cell_volume()).powf(1.0 / p)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|v| *v >= 0.0 && v.is_finite())
    }
}

/// Nonnegative, finite field: `f` (lab frame) or `f^#` (trajectory frame).
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField(PhaseField);

impl DistributionField {
    pub fn new(field: PhaseField) -> Result<Self> {
        if let Some(bad) = field.values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(KbError::Contract(format!(
                "distribution value {} at storage index {bad} is negative or not finite",
                field.values[bad]
            )));
        }
        Ok(Self(field))
    }

    pub fn zeros(grid: PhaseGrid, t: f64, frame: Frame) -> Self {
        Self(PhaseField::zeros(grid, t, frame))
    }

    pub fn maxwellian(grid: PhaseGrid, t: f64, frame: Frame, m: &MaxwellianSpec) -> Self {
        Self(PhaseField::maxwellian(grid, t, frame, m))
    }

    pub fn from_fn(grid: PhaseGrid, t: f64, frame: Frame, f: impl Fn(&Point, &Point) -> f64) -> Result<Self> {
        Self::new(PhaseField::from_fn(grid, t, frame, f))
    }

    /// Clamps values at zero; used where negative values can only come from roundoff.
    pub fn clamped(mut field: PhaseField) -> Self {
        for v in &mut field.values {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        Self(field)
    }

    pub fn field(&self) -> &PhaseField {
        &self.0
    }

    pub fn into_field(self) -> PhaseField {
        self.0
    }
}

impl Deref for DistributionField {
    type Target = PhaseField;
    fn deref(&self) -> &PhaseField {
        &self.0
    }
}

pub fn weighted_sup_norm(f: &PhaseField, alpha: f64, beta: f64) -> f64 {
    f.weighted_sup_norm(alpha, beta)
}

pub fn lp_norm(f: &PhaseField, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return domain(format!("L^p norm needs p >= 1, got {p}"));
    }
    Ok(f.lp_norm(p))
}

/// Linear interpolation weights along one axis for a position given in cell-index
/// units. Returns `None` outside the box `[-1/2, n - 1/2]`.
pub(crate) fn axis_stencil(pos: f64, n: usize) -> Option<(isize, f64)> {
    const EDGE: f64 = 1e-9;
    if pos < -0.5 - EDGE || pos > n as f64 - 0.5 + EDGE {
        return None;
    }
    let base = pos.floor();
    Some((base as isize, pos - base))
}

/// Spatial resampling `g(x, v) = f(x + shift(v), v)` by multilinear interpolation of
/// `f / reference` in `x`, zero outside the box. `shift` is given per velocity cell
/// in physical units; the reference envelope makes the resampling exact for it.
fn resample_x(
    f: &PhaseField,
    shift: impl Fn(&Point) -> Point,
    reference: Option<&MaxwellianSpec>,
) -> Vec<f64> {
    let g = f.grid;
    let dim = g.dim();
    let nx = g.nx();
    let nxc = g.x_cells();
    let hx = g.hx();
    let mut out = vec![0.0; g.cells()];
    let corners = 1usize << dim;
    for iv in 0..g.v_cells() {
        let v = g.v_center(iv);
        let s = shift(&v);
        let mut offsets = [0.0; MAX_DIM];
        for d in 0..dim {
            offsets[d] = s[d] / hx;
        }
        let row = &f.values[iv * nxc..(iv + 1) * nxc];
        let ratio: Option<Vec<f64>> = reference.map(|m| {
            (0..nxc)
                .map(|ix| {
                    let w = m.eval(&g.x_center(ix), &v, dim);
                    if w > 0.0 {
                        row[ix] / w
                    } else {
                        0.0
                    }
                })
                .collect()
        });
        let source: &[f64] = ratio.as_deref().unwrap_or(row);
        for ix in 0..nxc {
            let idx = g.x_index(ix);
            let mut stencil = [(0isize, 0.0); MAX_DIM];
            let mut inside = true;
            for d in 0..dim {
                match axis_stencil(idx[d] as f64 + offsets[d], nx) {
                    Some(st) => stencil[d] = st,
                    None => {
                        inside = false;
                        break;
                    }
                }
            }
            if !inside {
                continue;
            }
            let mut acc = 0.0;
            for c in 0..corners {
                let mut w = 1.0;
                let mut flat = 0usize;
                let mut valid = true;
                for d in 0..dim {
                    let (base, frac) = stencil[d];
                    let upper = (c >> d) & 1 == 1;
                    let wd = if upper { frac } else { 1.0 - frac };
                    if wd == 0.0 {
                        w = 0.0;
                        break;
                    }
                    let k = base + upper as isize;
                    if k < 0 || k >= nx as isize {
                        valid = false;
                        break;
                    }
                    w *= wd;
                    flat = flat * nx + k as usize;
                }
                if w != 0.0 && valid {
                    acc += w * source[flat];
                }
            }
            if let Some(m) = reference {
                let x = g.x_center(ix);
                let mut y = [0.0; MAX_DIM];
                for d in 0..dim {
                    y[d] = x[d] + s[d];
                }
                acc *= m.eval(&y, &v, dim);
            }
            out[iv * nxc + ix] = acc;
        }
    }
    out
}

fn transport(f: &PhaseField, sign: f64, reference: Option<&MaxwellianSpec>) -> PhaseField {
    let t = f.t;
    let dim = f.grid.dim();
    let values = resample_x(
        f,
        |v| {
            let mut s = [0.0; MAX_DIM];
            for d in 0..dim {
                s[d] = sign * t * v[d];
            }
            s
        },
        reference,
    );
    PhaseField {
        grid: f.grid,
        t,
        frame: if sign > 0.0 { Frame::Trajectory } else { Frame::Lab },
        values,
    }
}

/// Lab → trajectory frame: `f^#(t,x,v) = f(t, x + tv, v)`.
pub fn to_trajectory(f: &PhaseField) -> Result<PhaseField> {
    to_trajectory_with(f, None)
}

/// As [`to_trajectory`], interpolating `f / reference` so that fields proportional to
/// the reference Maxwellian are transported exactly.
pub fn to_trajectory_with(f: &PhaseField, reference: Option<&MaxwellianSpec>) -> Result<PhaseField> {
    if f.frame != Frame::Lab {
        return Err(KbError::Contract("to_trajectory expects a lab-frame field".into()));
    }
    Ok(transport(f, 1.0, reference))
}

/// Trajectory → lab frame: `f(t,x,v) = f^#(t, x - tv, v)`.
pub fn from_trajectory(f: &PhaseField) -> Result<PhaseField> {
    from_trajectory_with(f, None)
}

pub fn from_trajectory_with(f: &PhaseField, reference: Option<&MaxwellianSpec>) -> Result<PhaseField> {
    if f.frame != Frame::Trajectory {
        return Err(KbError::Contract("from_trajectory expects a trajectory-frame field".into()));
    }
    Ok(transport(f, -1.0, reference))
}

/// Spatial resampling `f(x + shift(v), v)` within the field's own frame.
pub fn shift_x(f: &PhaseField, shift: impl Fn(&Point) -> Point, reference: Option<&MaxwellianSpec>) -> PhaseField {
    PhaseField {
        values: resample_x(f, shift, reference),
        ..f.clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct FieldSidecar {
    grid: PhaseGrid,
    frame: Frame,
    times: Vec<f64>,
    hx: f64,
    hv: f64,
    layout: String,
}

fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

/// Writes fields (one grid, one frame) as flat CSV plus a JSON sidecar next to it.
pub fn write_fields_csv(path: &Path, fields: &[&PhaseField]) -> Result<()> {
    let first = fields
        .first()
        .ok_or_else(|| KbError::Contract("no fields to write".into()))?;
    for f in fields {
        first.check_compatible(f)?;
    }
    let grid = first.grid;
    let dim = grid.dim();
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((0..dim).map(|d| format!("ix{d}")));
    header.extend((0..dim).map(|d| format!("iv{d}")));
    header.push("value".into());
    writeln!(w, "{}", header.join(","))?;
    for f in fields {
        for ix in 0..grid.x_cells() {
            let xi = grid.x_index(ix);
            for iv in 0..grid.v_cells() {
                let vi = grid.v_index(iv);
                write!(w, "{:e}", f.t)?;
                for d in 0..dim {
                    write!(w, ",{}", xi[d])?;
                }
                for d in 0..dim {
                    write!(w, ",{}", vi[d])?;
                }
                writeln!(w, ",{:e}", f.at(ix, iv))?;
            }
        }
    }
    w.flush()?;
    let sidecar = FieldSidecar {
        grid,
        frame: first.frame,
        times: fields.iter().map(|f| f.t).collect(),
        hx: grid.hx(),
        hv: grid.hv(),
        layout: "rows ordered by time, then spatial index, then velocity index".into(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), &sidecar)?;
    Ok(())
}

/// Reads back the output of [`write_fields_csv`].
pub fn read_fields_csv(path: &Path) -> Result<Vec<PhaseField>> {
    let sidecar: FieldSidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let grid = PhaseGrid::new(
        sidecar.grid.dim(),
        sidecar.grid.lx(),
        sidecar.grid.lv(),
        sidecar.grid.nx(),
        sidecar.grid.nv(),
    )?;
    let dim = grid.dim();
    let mut fields: Vec<PhaseField> = sidecar
        .times
        .iter()
        .map(|&t| PhaseField::zeros(grid, t, sidecar.frame))
        .collect();
    let mut reader = csv::Reader::from_path(path)?;
    let per_field = grid.cells();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let k = row / per_field;
        if k >= fields.len() || record.len() != 2 * dim + 2 {
            return Err(KbError::Contract(format!("unexpected CSV row {row}")));
        }
        let parse_err = |what: &str| KbError::Contract(format!("bad {what} in CSV row {row}"));
        let t: f64 = record[0].parse().map_err(|_| parse_err("time"))?;
        if t.to_bits() != fields[k].t.to_bits() {
            return Err(KbError::Contract(format!("time in CSV row {row} disagrees with sidecar")));
        }
        let mut xi = [0; MAX_DIM];
        let mut vi = [0; MAX_DIM];
        for d in 0..dim {
            xi[d] = record[1 + d].parse().map_err(|_| parse_err("index"))?;
            vi[d] = record[1 + dim + d].parse().map_err(|_| parse_err("index"))?;
        }
        let value: f64 = record[2 * dim + 1].parse().map_err(|_| parse_err("value"))?;
        let ix = flatten(&xi, grid.nx(), dim);
        let iv = flatten(&vi, grid.nv(), dim);
        fields[k].values[grid.index(ix, iv)] = value;
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2(n: usize) -> PhaseGrid {
        PhaseGrid::new(2, 3.0, 2.5, n, n).unwrap()
    }

    #[test]
    fn maxwellian_examples() {
        let m = MaxwellianSpec::new(1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(maxwellian_eval(&m, &[0.0; 3], &[0.0; 3], 2), 1.0);
        let m = MaxwellianSpec::new(2.0, 0.7, 0.0, 1.3).unwrap();
        let v = [0.4, -1.1, 0.0];
        let x = [1.3 * 0.4, 1.3 * -1.1, 0.0];
        assert_eq!(maxwellian_eval(&m, &x, &v, 2), 2.0);
        let m = MaxwellianSpec::new(1.0, 1.0, 0.0, 1.0).unwrap();
        let r = maxwellian_eval(&m, &[1.0, 0.0, 0.0], &[0.0; 3], 2);
        assert!((r - (-1.0f64).exp()).abs() < 1e-16);
        assert!(MaxwellianSpec::new(1.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_validation_and_cells() {
        assert!(PhaseGrid::new(2, 1.0, 1.0, 3, 8).is_err());
        assert!(PhaseGrid::new(2, 0.0, 1.0, 8, 8).is_err());
        let g = PhaseGrid::new(2, 2.0, 1.0, 4, 8).unwrap();
        assert_eq!(g.hx(), 1.0);
        assert_eq!(g.x_coord(0), -1.5);
        assert_eq!(g.cells(), 16 * 64);
        let d = PhaseGrid::with_default_widths(2, 1.0, 1.0, 12, 12).unwrap();
        assert!((-d.lx() * d.lx()).exp() < 1e-8);
        assert!((-(0.99 * d.lx()).powi(2)).exp() > 1e-8);
    }

    #[test]
    fn weighted_norm_examples() {
        let g = grid2(8);
        let m = MaxwellianSpec::unit(0.8, 1.2);
        let f = PhaseField::maxwellian(g, 0.0, Frame::Lab, &m);
        assert_eq!(f.weighted_sup_norm(0.8, 1.2), 1.0);
        assert_eq!(PhaseField::zeros(g, 0.0, Frame::Lab).weighted_sup_norm(1.0, 1.0), 0.0);

        let half = PhaseField::maxwellian(g, 0.0, Frame::Lab, &MaxwellianSpec::new(0.5, 1.6, 1.2, 0.0).unwrap());
        let got = half.weighted_sup_norm(0.8, 1.2);
        // brute force over cells
        let mut best: f64 = 0.0;
        for ix in 0..g.x_cells() {
            let x = g.x_center(ix);
            best = best.max(0.5 * (-0.8 * norm2(&x, 2)).exp());
        }
        assert!((got - best).abs() < 1e-15 * best);
        // nearest-origin cell has |x|² = 2·(hx/2)²
        let hx = g.hx();
        assert!((best - 0.5 * (-0.8 * 2.0 * (hx / 2.0).powi(2)).exp()).abs() < 1e-15);
    }

    #[test]
    fn lp_norm_examples() {
        let g = grid2(6);
        let c = 0.3;
        let f = PhaseField::from_fn(g, 0.0, Frame::Lab, |_, _| c);
        let vol = (2.0 * g.lx()).powi(2) * (2.0 * g.lv()).powi(2);
        assert!((f.lp_norm(1.0) - c * vol).abs() < 1e-12 * c * vol);
        assert_eq!(f.lp_norm(f64::INFINITY), c);
        let mut spike = PhaseField::zeros(g, 0.0, Frame::Lab);
        spike.values[17] = 2.0;
        let expected = 2.0 * g.cell_volume().sqrt();
        assert!((spike.lp_norm(2.0) - expected).abs() < 1e-14);
        assert!(lp_norm(&spike, 0.5).is_err());
    }

    #[test]
    fn l1_norm_of_maxwellian_converges_first_order_or_better() {
        // box wide enough that truncation sits far below the discretization error
        let m = MaxwellianSpec::unit(1.0, 1.0);
        let exact = std::f64::consts::PI.powi(2);
        let mut prev_err = f64::INFINITY;
        for n in [8, 16, 32] {
            let g = PhaseGrid::new(2, 6.0, 6.0, n, n).unwrap();
            let f = PhaseField::maxwellian(g, 0.0, Frame::Lab, &m);
            let err = (f.lp_norm(1.0) / exact - 1.0).abs();
            assert!(err <= prev_err / 2.0 || err < 1e-13, "n={n}: {err} vs {prev_err}");
            prev_err = err;
        }
    }

    #[test]
    fn zero_time_transport_is_identity() {
        let g = grid2(8);
        let f = PhaseField::from_fn(g, 0.0, Frame::Lab, |x, v| (x[0] + 2.0 * v[1]).sin().abs() + x[1] * x[1]);
        let tr = to_trajectory(&f).unwrap();
        assert_eq!(tr.values, f.values);
        assert_eq!(tr.frame, Frame::Trajectory);
    }

    #[test]
    fn transport_frame_contract() {
        let g = grid2(4);
        let f = PhaseField::zeros(g, 0.0, Frame::Trajectory);
        assert!(to_trajectory(&f).is_err());
        assert!(from_trajectory(&f).is_ok());
    }

    #[test]
    fn zero_velocity_slice_is_unchanged() {
        // odd Nv puts a cell center at v = 0
        let g = PhaseGrid::new(2, 3.0, 2.0, 8, 5).unwrap();
        let f = PhaseField::from_fn(g, 1.7, Frame::Lab, |x, v| 1.0 + x[0] * x[0] + v[0].abs() + x[1]);
        let tr = to_trajectory(&f).unwrap();
        let center = flatten(&[2, 2, 0], 5, 2);
        for ix in 0..g.x_cells() {
            assert_eq!(tr.at(ix, center), f.at(ix, center));
        }
    }

    fn brute_shift(f: &PhaseField, s_of_v: impl Fn(&Point) -> Point) -> Vec<f64> {
        // per-point bilinear interpolation written independently
        let g = f.grid;
        let hx = g.hx();
        let mut out = vec![0.0; g.cells()];
        for iv in 0..g.v_cells() {
            let v = g.v_center(iv);
            let s = s_of_v(&v);
            for ix in 0..g.x_cells() {
                let x = g.x_center(ix);
                let y0 = x[0] + s[0];
                let y1 = x[1] + s[1];
                if y0.abs() > g.lx() + 1e-12 || y1.abs() > g.lx() + 1e-12 {
                    continue;
                }
                let p0 = (y0 + g.lx()) / hx - 0.5;
                let p1 = (y1 + g.lx()) / hx - 0.5;
                let (i0, i1) = (p0.floor() as i64, p1.floor() as i64);
                let (a0, a1) = (p0 - i0 as f64, p1 - i1 as f64);
                let read = |a: i64, b: i64| -> f64 {
                    if a < 0 || b < 0 || a >= g.nx() as i64 || b >= g.nx() as i64 {
                        0.0
                    } else {
                        f.at(a as usize * g.nx() + b as usize, iv)
                    }
                };
                out[g.index(ix, iv)] = (1.0 - a0) * (1.0 - a1) * read(i0, i1)
                    + a0 * (1.0 - a1) * read(i0 + 1, i1)
                    + (1.0 - a0) * a1 * read(i0, i1 + 1)
                    + a0 * a1 * read(i0 + 1, i1 + 1);
            }
        }
        out
    }

    #[test]
    fn round_trip_matches_bruteforce_oracle() {
        let g = PhaseGrid::new(2, 2.0, 1.5, 8, 8).unwrap();
        let t = 0.9 * g.hx() / (2.0 * g.lv());
        let f = PhaseField::from_fn(g, t, Frame::Lab, |x, v| {
            (1.0 + (1.3 * x[0]).cos() * (0.7 * x[1]).sin()) * (-(v[0] * v[0] + v[1] * v[1])).exp()
        });
        let tr = to_trajectory(&f).unwrap();
        let expected_tr = brute_shift(&f, |v| [t * v[0], t * v[1], 0.0]);
        for (a, b) in tr.values.iter().zip(&expected_tr) {
            assert!((a - b).abs() < 1e-14);
        }
        let back = from_trajectory(&tr).unwrap();
        let expected_back = brute_shift(&tr, |v| [-t * v[0], -t * v[1], 0.0]);
        for (a, b) in back.values.iter().zip(&expected_back) {
            assert!((a - b).abs() < 1e-14);
        }
        // on interior cells the round trip is a small smoothing of f
        let mut worst: f64 = 0.0;
        for iv in 0..g.v_cells() {
            for ix in 0..g.x_cells() {
                let xi = g.x_index(ix);
                if xi[..2].iter().all(|&k| k > 0 && k + 1 < g.nx()) {
                    worst = worst.max((back.at(ix, iv) - f.at(ix, iv)).abs());
                }
            }
        }
        assert!(worst < 0.05 * f.max_abs(), "{worst}");
    }

    #[test]
    fn round_trip_exact_for_affine_in_x() {
        let g = PhaseGrid::new(2, 2.0, 1.5, 8, 8).unwrap();
        let t = 0.4 * g.hx() / (2.0 * g.lv());
        let f = PhaseField::from_fn(g, t, Frame::Lab, |x, v| 5.0 + x[0] - 0.5 * x[1] + v[0] * v[1]);
        let back = from_trajectory(&to_trajectory(&f).unwrap()).unwrap();
        for iv in 0..g.v_cells() {
            for ix in 0..g.x_cells() {
                let xi = g.x_index(ix);
                if xi[..2].iter().all(|&k| k > 0 && k + 1 < g.nx()) {
                    assert!((back.at(ix, iv) - f.at(ix, iv)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weighted_transport_is_exact_for_reference_maxwellian() {
        let g = PhaseGrid::new(2, 4.0, 4.0, 10, 10).unwrap();
        let m = MaxwellianSpec::new(0.3, 1.0, 1.0, 1.0).unwrap();
        let f = PhaseField::maxwellian(g, 1.0, Frame::Lab, &m);
        let tr = to_trajectory_with(&f, Some(&m)).unwrap();
        // at t = 1 a shift-1 envelope becomes static
        let stat = MaxwellianSpec::new(0.3, 1.0, 1.0, 0.0).unwrap();
        for iv in 0..g.v_cells() {
            let v = g.v_center(iv);
            for ix in 0..g.x_cells() {
                let x = g.x_center(ix);
                let y = [x[0] + v[0], x[1] + v[1], 0.0];
                let got = tr.at(ix, iv);
                if y[0].abs() < g.lx() - g.hx() && y[1].abs() < g.lx() - g.hx() {
                    let want = stat.eval(&x, &v, 2);
                    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let g = PhaseGrid::new(2, 1.0, 1.0, 4, 5).unwrap();
        let a = PhaseField::from_fn(g, 0.1, Frame::Trajectory, |x, v| (x[0] * 3.1 + v[1]).exp() / 7.0);
        let b = PhaseField::from_fn(g, 1.0 / 3.0, Frame::Trajectory, |x, v| 1e-300 * (x[1] - v[0]).abs());
        write_fields_csv(&path, &[&a, &b]).unwrap();
        let back = read_fields_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (orig, read) in [&a, &b].iter().zip(&back) {
            assert_eq!(orig.t.to_bits(), read.t.to_bits());
            assert_eq!(orig.grid, read.grid);
            for (x, y) in orig.values.iter().zip(&read.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("t,ix0,ix1,iv0,iv1,value\n"));
    }

    proptest! {
        #[test]
        fn transport_preserves_nonnegativity(seed in 0u64..1000, t in 0.0f64..3.0) {
            let g = PhaseGrid::new(2, 2.0, 2.0, 5, 4).unwrap();
            let f = PhaseField::from_fn(g, t, Frame::Lab, |x, v| {
                let h = ((x[0] * 7.3 + v[1] * 3.1 + seed as f64).sin() + 1.0) * 0.5;
                h * (x[1] - v[0]).abs()
            });
            let tr = to_trajectory(&f).unwrap();
            prop_assert!(tr.is_nonnegative());
            prop_assert!(from_trajectory(&tr).unwrap().is_nonnegative());
        }

        #[test]
        fn maxwellian_weighted_norm_is_one(alpha in 0.1f64..3.0, beta in 0.0f64..3.0) {
            let g = PhaseGrid::new(2, 3.0, 3.0, 6, 6).unwrap();
            let f = PhaseField::maxwellian(g, 0.0, Frame::Lab, &MaxwellianSpec::unit(alpha, beta));
            prop_assert_eq!(f.weighted_sup_norm(alpha, beta), 1.0);
        }
    }
}
