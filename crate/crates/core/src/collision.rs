//! Discrete gain and loss operators on a phase grid.
//!
//! For a velocity pair `(v_i, v_j)` on the grid, `u = v_i - v_j` is a multiple of
//! `hv`, so the post-collision offsets `-s` and `+s` (`s = (u·σ)σ`) and the spatial
//! shifts `t·s`, `t·(u - s)` of the trajectory frame depend only on the index
//! difference `Δ = i - j`, the angular node and the time. A [`StencilPlan`] stores,
//! per `(Δ, σ)`, the interpolation corners as constant offsets into a zero-padded
//! copy of the field plus the rectangles of `(i, x)` whose targets stay inside the
//! box, so the hot loop is a branch-free sweep over contiguous spatial rows.
//!
//! Fields are interpolated as `f = M_ref · H` with `H` multilinear, where `M_ref`
//! is an optional static Maxwellian (see [`InterpolationWeight`]); the products of
//! reference weights at the two post-collision points collapse to
//! `M_ref(x, v)·exp(-α|x + tu|²)·exp(-β|v_*|²)` by energy conservation.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, KbError, Result};
use crate::kernel::{sphere_area, CollisionKernel};
use crate::phase::{dot, norm2, DistributionField, Frame, PhaseField, PhaseGrid, Point, MAX_DIM};
use crate::quad::gauss_legendre;

const NORM_TOL: f64 = 1e-12;
const EDGE: f64 = 1e-9;

/// Post-collision velocities `'v = v - (u·σ)σ`, `'v_* = v_* + (u·σ)σ`.
pub fn post_collision(v: &Point, v_star: &Point, sigma: &Point, dim: usize) -> Result<(Point, Point)> {
    let len2 = norm2(sigma, dim);
    if (len2 - 1.0).abs() > NORM_TOL {
        return domain(format!("sigma must be a unit vector, |sigma|^2 = {len2}"));
    }
    Ok(post_collision_unchecked(v, v_star, sigma, dim, 1.0))
}

/// `sign = -1` flips the exchange; used only to exercise failure paths in `verify`.
pub(crate) fn post_collision_unchecked(v: &Point, v_star: &Point, sigma: &Point, dim: usize, sign: f64) -> (Point, Point) {
    let mut u = [0.0; MAX_DIM];
    for d in 0..dim {
        u[d] = v[d] - v_star[d];
    }
    let us = dot(&u, sigma, dim) * sign;
    let mut vp = [0.0; MAX_DIM];
    let mut vsp = [0.0; MAX_DIM];
    for d in 0..dim {
        vp[d] = v[d] - us * sigma[d];
        vsp[d] = v_star[d] + us * sigma[d];
    }
    (vp, vsp)
}

/// `| |x+τ(v-'v)|² + |x+τ(v-'v_*)|² - |x|² - |x+τu|² |`.
pub fn trajectory_identity_check(x: &Point, v: &Point, v_star: &Point, sigma: &Point, tau: f64, dim: usize) -> Result<f64> {
    let (vp, vsp) = post_collision(v, v_star, sigma, dim)?;
    Ok(trajectory_identity_residual(x, v, v_star, &vp, &vsp, tau, dim))
}

pub(crate) fn trajectory_identity_residual(x: &Point, v: &Point, v_star: &Point, vp: &Point, vsp: &Point, tau: f64, dim: usize) -> f64 {
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for d in 0..dim {
        let a = x[d] + tau * (v[d] - vp[d]);
        let b = x[d] + tau * (v[d] - vsp[d]);
        let c = x[d] + tau * (v[d] - v_star[d]);
        lhs += a * a + b * b;
        rhs += x[d] * x[d] + c * c;
    }
    (lhs - rhs).abs()
}

/// Average of `|u|^{-λ}` over the ball of volume `h^n` centred at the origin.
pub fn singular_cap(dim: usize, lambda: f64, h: f64) -> Result<f64> {
    let n = dim as f64;
    let ball = sphere_area(dim)? / n;
    let r0 = (h.powi(dim as i32) / ball).powf(1.0 / n);
    Ok(n / (n - lambda) * r0.powf(-lambda))
}

/// Angular node on `S^{n-1}` with its quadrature weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaNode {
    pub dir: Point,
    pub weight: f64,
}

/// Equal-angle nodes on the circle, or Gauss–Legendre in `cos θ` times uniform
/// azimuth on the sphere. Only one node of each antipodal pair is returned; the
/// pair shares the collision geometry and differs only in `b(±û·σ)`.
pub fn sigma_half_nodes(dim: usize, n_sigma: usize) -> Result<Vec<SigmaNode>> {
    if n_sigma < 8 {
        return domain(format!("Nsigma must be at least 8, got {n_sigma}"));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    match dim {
        2 => {
            if n_sigma % 2 != 0 {
                return domain(format!("Nsigma must be even in two dimensions, got {n_sigma}"));
            }
            let w = two_pi / n_sigma as f64;
            Ok((0..n_sigma / 2)
                .map(|k| {
                    let th = (k as f64 + 0.5) * w;
                    SigmaNode {
                        dir: [th.cos(), th.sin(), 0.0],
                        weight: w,
                    }
                })
                .collect())
        }
        3 => {
            let (n_mu, n_phi) = sphere_split(n_sigma);
            if n_phi % 2 != 0 {
                return domain(format!(
                    "Nsigma = {n_sigma} splits into {n_mu} polar x {n_phi} azimuthal nodes; the azimuthal count must be even"
                ));
            }
            let (mu, wmu) = gauss_legendre(n_mu);
            let dphi = two_pi / n_phi as f64;
            let mut nodes = Vec::with_capacity(n_sigma / 2);
            for (m, wm) in mu.iter().zip(&wmu) {
                let r = (1.0 - m * m).max(0.0).sqrt();
                for b in 0..n_phi / 2 {
                    let ph = (b as f64 + 0.5) * dphi;
                    nodes.push(SigmaNode {
                        dir: [r * ph.cos(), r * ph.sin(), *m],
                        weight: wm * dphi,
                    });
                }
            }
            Ok(nodes)
        }
        _ => domain(format!("angular nodes need dimension 2 or 3, got {dim}")),
    }
}

/// Polar count is the largest divisor of `n` not exceeding `√n`.
pub fn sphere_split(n: usize) -> (usize, usize) {
    let mut n_mu = 1;
    for d in 1..=n {
        if d * d > n {
            break;
        }
        if n % d == 0 {
            n_mu = d;
        }
    }
    (n_mu, n / n_mu)
}

/// Static Maxwellian `exp(-α|x|² - β|v|²)` used to weight interpolation;
/// `α = β = 0` gives plain multilinear interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct InterpolationWeight {
    pub alpha: f64,
    pub beta: f64,
}

impl InterpolationWeight {
    pub fn none() -> Self {
        Self::default()
    }
    pub fn maxwellian(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }
    fn is_plain(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }
}

#[derive(Debug, Clone)]
struct DeltaEntry {
    offset: [isize; MAX_DIM],
    u: Point,
    /// `‖b‖·K(|u|)·hv^n`, the loss weight.
    loss: f64,
    /// Folded angular weights `K·(b(û·σ)+b(-û·σ))·w_σ·hv^n`, normalised so their sum is the loss weight.
    gain: Vec<f64>,
}

/// Precomputed geometry and weights of the discrete collision operator.
#[derive(Debug, Clone)]
pub struct CollisionQuadrature {
    kernel: CollisionKernel,
    grid: PhaseGrid,
    n_sigma: usize,
    nodes: Vec<SigmaNode>,
    singular_cap: f64,
    weight: InterpolationWeight,
    deltas: Vec<DeltaEntry>,
}

#[derive(Debug, Clone)]
struct Stencil {
    delta: usize,
    coef: f64,
    i_lo: [usize; MAX_DIM],
    i_hi: [usize; MAX_DIM],
    x_lo: [usize; MAX_DIM],
    x_hi: [usize; MAX_DIM],
    f_corners: Vec<(isize, f64)>,
    g_corners: Vec<(isize, f64)>,
}

/// Stencils for one evaluation time.
#[derive(Debug, Clone)]
pub struct StencilPlan {
    t: f64,
    gain: Vec<Stencil>,
    loss: Vec<Stencil>,
    /// `exp(-α|x + t·u_Δ|²)` per `(Δ, x)`; empty for plain interpolation.
    spatial: Vec<f64>,
}

impl StencilPlan {
    pub fn time(&self) -> f64 {
        self.t
    }
    pub fn gain_stencils(&self) -> usize {
        self.gain.len()
    }
}

/// Field divided by the reference weight, stored with a ghost layer of zeros.
#[derive(Debug, Clone)]
pub struct PreparedField {
    h: Vec<f64>,
    t: f64,
    frame: Frame,
    zero: bool,
}

struct Layout {
    dim: usize,
    nx: usize,
    nv: usize,
    px: usize,
    pv: usize,
    pxc: usize,
    nxc: usize,
}

impl Layout {
    fn new(grid: &PhaseGrid) -> Self {
        let dim = grid.dim();
        let px = grid.nx() + 2;
        Self {
            dim,
            nx: grid.nx(),
            nv: grid.nv(),
            px,
            pv: grid.nv() + 2,
            pxc: px.pow(dim as u32),
            nxc: grid.x_cells(),
        }
    }

    fn x_stride(&self, d: usize) -> isize {
        self.px.pow((self.dim - 1 - d) as u32) as isize
    }

    fn v_stride(&self, d: usize) -> isize {
        (self.pv.pow((self.dim - 1 - d) as u32) * self.pxc) as isize
    }

    /// Padded index of interior cell `(i, x)`.
    fn base(&self, i: &[usize; MAX_DIM], x: &[usize; MAX_DIM]) -> usize {
        let mut b: isize = 0;
        for d in 0..self.dim {
            b += (i[d] as isize + 1) * self.v_stride(d) + (x[d] as isize + 1) * self.x_stride(d);
        }
        b as usize
    }
}

/// Integer range of `k` in `[0, n-1]` with `k + shift` inside `[-1/2, n-1/2]`.
fn shifted_range(shift: f64, n: usize) -> Option<(isize, isize)> {
    let lo = ((-0.5 - EDGE - shift).ceil() as isize).max(0);
    let hi = ((n as f64 - 0.5 + EDGE - shift).floor() as isize).min(n as isize - 1);
    (lo <= hi).then_some((lo, hi))
}

fn corners(
    layout: &Layout,
    v_shift: &[f64; MAX_DIM],
    x_shift: &[f64; MAX_DIM],
    interpolate_v: bool,
) -> Vec<(isize, f64)> {
    let dim = layout.dim;
    let mut axes: Vec<[(isize, f64); 2]> = Vec::with_capacity(2 * dim);
    let mut strides = Vec::with_capacity(2 * dim);
    for d in 0..dim {
        let fl = x_shift[d].floor();
        let fr = x_shift[d] - fl;
        axes.push([(fl as isize, 1.0 - fr), (fl as isize + 1, fr)]);
        strides.push(layout.x_stride(d));
        let fl = v_shift[d].floor();
        let fr = v_shift[d] - fl;
        if interpolate_v {
            axes.push([(fl as isize, 1.0 - fr), (fl as isize + 1, fr)]);
        } else {
            axes.push([(v_shift[d].round() as isize, 1.0), (0, 0.0)]);
        }
        strides.push(layout.v_stride(d));
    }
    let mut out = Vec::with_capacity(1 << (2 * dim));
    for mask in 0..(1usize << axes.len()) {
        let mut w = 1.0;
        let mut off = 0isize;
        for (a, (choices, stride)) in axes.iter().zip(&strides).enumerate() {
            let (k, wk) = choices[(mask >> a) & 1];
            w *= wk;
            off += k * stride;
        }
        if w != 0.0 {
            out.push((off, w));
        }
    }
    out
}

impl CollisionQuadrature {
    pub fn new(kernel: CollisionKernel, grid: PhaseGrid, n_sigma: usize, weight: InterpolationWeight) -> Result<Self> {
        let dim = grid.dim();
        if kernel.dim() != dim {
            return Err(KbError::Contract(format!(
                "kernel dimension {} differs from grid dimension {dim}",
                kernel.dim()
            )));
        }
        if !(weight.alpha >= 0.0 && weight.beta >= 0.0) {
            return domain("interpolation weight rates must be >= 0");
        }
        let nodes = sigma_half_nodes(dim, n_sigma)?;
        let hv = grid.hv();
        let vol = grid.v_cell_volume();
        let cap = singular_cap(dim, kernel.lambda(), hv)?;
        let bnorm = kernel.angular_norm();
        let b = kernel.angular();
        let nv = grid.nv() as isize;
        let span = (2 * nv - 1) as usize;
        let count = span.pow(dim as u32);
        let mut deltas = Vec::with_capacity(count);
        for flat in 0..count {
            let idx = crate::phase::unflatten(flat, span, dim);
            let mut offset = [0isize; MAX_DIM];
            let mut u = [0.0; MAX_DIM];
            for d in 0..dim {
                offset[d] = idx[d] as isize - (nv - 1);
                u[d] = offset[d] as f64 * hv;
            }
            let speed = norm2(&u, dim).sqrt();
            let mut gain = vec![0.0; nodes.len()];
            let k = if speed == 0.0 { cap } else { kernel.speed_factor(speed) };
            let loss = bnorm * k * vol;
            if speed == 0.0 {
                // no geometry at u = 0; a single term carries the whole angular mass
                gain[0] = loss;
            } else {
                let mut raw_sum = 0.0;
                for (g, node) in gain.iter_mut().zip(&nodes) {
                    let c = dot(&u, &node.dir, dim) / speed;
                    let folded = (b.eval(c) + b.eval(-c)) * node.weight;
                    *g = folded;
                    raw_sum += folded;
                }
                let scale = if raw_sum > 0.0 { loss / raw_sum } else { 0.0 };
                for g in &mut gain {
                    *g *= scale;
                }
            }
            deltas.push(DeltaEntry { offset, u, loss, gain });
        }
        Ok(Self {
            kernel,
            grid,
            n_sigma,
            nodes,
            singular_cap: cap,
            weight,
            deltas,
        })
    }

    pub fn kernel(&self) -> &CollisionKernel {
        &self.kernel
    }
    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }
    pub fn n_sigma(&self) -> usize {
        self.n_sigma
    }
    pub fn singular_cap(&self) -> f64 {
        self.singular_cap
    }
    pub fn weight(&self) -> InterpolationWeight {
        self.weight
    }
    pub fn half_nodes(&self) -> &[SigmaNode] {
        &self.nodes
    }

    /// Same operator with a different interpolation weight.
    pub fn with_weight(&self, weight: InterpolationWeight) -> Self {
        Self {
            weight,
            ..self.clone()
        }
    }

    /// Builds the stencils for fields given at trajectory time `t`
    /// (`t = 0` for lab-frame evaluation).
    pub fn plan(&self, t: f64) -> StencilPlan {
        let layout = Layout::new(&self.grid);
        let dim = layout.dim;
        let hx = self.grid.hx();
        let hv = self.grid.hv();
        let nv = layout.nv;
        let nx = layout.nx;
        let mut gain = Vec::new();
        let mut loss = Vec::new();
        for (di, entry) in self.deltas.iter().enumerate() {
            // j = i - Δ must be a grid index
            let mut j_lo = [0usize; MAX_DIM];
            let mut j_hi = [0usize; MAX_DIM];
            let mut ok = true;
            for d in 0..dim {
                let lo = entry.offset[d].max(0);
                let hi = (nv as isize - 1 + entry.offset[d]).min(nv as isize - 1);
                if lo > hi {
                    ok = false;
                    break;
                }
                j_lo[d] = lo as usize;
                j_hi[d] = hi as usize;
            }
            if !ok {
                continue;
            }
            // loss: g(x + t u, v_j)
            let mut x_shift = [0.0; MAX_DIM];
            let mut v_shift = [0.0; MAX_DIM];
            let mut x_lo = [0usize; MAX_DIM];
            let mut x_hi = [0usize; MAX_DIM];
            let mut inside = true;
            for d in 0..dim {
                x_shift[d] = t * entry.u[d] / hx;
                v_shift[d] = -(entry.offset[d] as f64);
                match shifted_range(x_shift[d], nx) {
                    Some((lo, hi)) => {
                        x_lo[d] = lo as usize;
                        x_hi[d] = hi as usize;
                    }
                    None => inside = false,
                }
            }
            if inside && entry.loss > 0.0 {
                loss.push(Stencil {
                    delta: di,
                    coef: entry.loss,
                    i_lo: j_lo,
                    i_hi: j_hi,
                    x_lo,
                    x_hi,
                    f_corners: Vec::new(),
                    g_corners: corners(&layout, &v_shift, &x_shift, false),
                });
            }
            for (node, &coef) in self.nodes.iter().zip(&entry.gain) {
                if coef == 0.0 {
                    continue;
                }
                let us = dot(&entry.u, &node.dir, dim);
                let mut fv = [0.0; MAX_DIM];
                let mut fx = [0.0; MAX_DIM];
                let mut gv = [0.0; MAX_DIM];
                let mut gx = [0.0; MAX_DIM];
                let mut i_lo = j_lo;
                let mut i_hi = j_hi;
                let mut x_lo = [0usize; MAX_DIM];
                let mut x_hi = [usize::MAX; MAX_DIM];
                let mut inside = true;
                for d in 0..dim {
                    let s = us * node.dir[d];
                    fv[d] = -s / hv;
                    fx[d] = t * s / hx;
                    gv[d] = -(entry.offset[d] as f64) + s / hv;
                    gx[d] = t * (entry.u[d] - s) / hx;
                    for (shift, n, is_v) in [(fv[d], nv, true), (gv[d], nv, true), (fx[d], nx, false), (gx[d], nx, false)] {
                        let (lo, hi) = if is_v { (&mut i_lo[d], &mut i_hi[d]) } else { (&mut x_lo[d], &mut x_hi[d]) };
                        match shifted_range(shift, n) {
                            Some((a, b)) => {
                                *lo = (*lo).max(a as usize);
                                *hi = (*hi).min(b as usize);
                                if *lo > *hi {
                                    inside = false;
                                }
                            }
                            None => inside = false,
                        }
                    }
                    if !inside {
                        break;
                    }
                }
                if !inside {
                    continue;
                }
                gain.push(Stencil {
                    delta: di,
                    coef,
                    i_lo,
                    i_hi,
                    x_lo,
                    x_hi,
                    f_corners: corners(&layout, &fv, &fx, true),
                    g_corners: corners(&layout, &gv, &gx, true),
                });
            }
        }
        let spatial = if self.weight.alpha == 0.0 {
            Vec::new()
        } else {
            let nxc = layout.nxc;
            let xs: Vec<Point> = (0..nxc).map(|i| self.grid.x_center(i)).collect();
            let mut e = vec![0.0; self.deltas.len() * nxc];
            for (di, entry) in self.deltas.iter().enumerate() {
                for (ix, x) in xs.iter().enumerate() {
                    let mut r2 = 0.0;
                    for d in 0..dim {
                        let y = x[d] + t * entry.u[d];
                        r2 += y * y;
                    }
                    e[di * nxc + ix] = (-self.weight.alpha * r2).exp();
                }
            }
            e
        };
        StencilPlan { t, gain, loss, spatial }
    }

    fn reference(&self, x: &Point, v: &Point) -> f64 {
        let dim = self.grid.dim();
        (-(self.weight.alpha * norm2(x, dim) + self.weight.beta * norm2(v, dim))).exp()
    }

    fn velocity_weights(&self) -> Vec<f64> {
        let dim = self.grid.dim();
        (0..self.grid.v_cells())
            .map(|j| (-self.weight.beta * norm2(&self.grid.v_center(j), dim)).exp())
            .collect()
    }

    /// Shift time implied by the frame: trajectory fields at `t` are evaluated
    /// along characteristics, lab fields pointwise in `x`.
    fn field_time(field: &PhaseField) -> f64 {
        match field.frame {
            Frame::Trajectory => field.t,
            Frame::Lab => 0.0,
        }
    }

    pub fn prepare(&self, field: &PhaseField) -> Result<PreparedField> {
        if field.grid != self.grid {
            return Err(KbError::Contract("field grid differs from the quadrature grid".into()));
        }
        let layout = Layout::new(&self.grid);
        let pvc = layout.pv.pow(layout.dim as u32);
        let mut h = vec![0.0; pvc * layout.pxc];
        let plain = self.weight.is_plain();
        let xs: Vec<Point> = (0..layout.nxc).map(|i| self.grid.x_center(i)).collect();
        let mut zero = true;
        for iv in 0..self.grid.v_cells() {
            let vi = self.grid.v_index(iv);
            let v = self.grid.v_center(iv);
            for ix in 0..layout.nxc {
                let value = field.values[iv * layout.nxc + ix];
                if value == 0.0 {
                    continue;
                }
                zero = false;
                let xi = self.grid.x_index(ix);
                let scaled = if plain {
                    value
                } else {
                    let r = self.reference(&xs[ix], &v);
                    if r > 0.0 {
                        value / r
                    } else {
                        0.0
                    }
                };
                h[layout.base(&vi, &xi)] = scaled;
            }
        }
        Ok(PreparedField {
            h,
            t: Self::field_time(field),
            frame: field.frame,
            zero,
        })
    }

    fn check_pair(&self, f: &PreparedField, g: &PreparedField, plan: &StencilPlan) -> Result<()> {
        if f.frame != g.frame {
            return Err(KbError::Contract(format!("frame mismatch: {:?} vs {:?}", f.frame, g.frame)));
        }
        if f.t != g.t {
            return Err(KbError::Contract(format!("fields at different times {} and {}", f.t, g.t)));
        }
        if plan.t != f.t {
            return Err(KbError::Contract(format!("plan time {} differs from field time {}", plan.t, f.t)));
        }
        Ok(())
    }

    /// `Q₊(f, g)` on every cell (trajectory-frame fields give `Q₊^#`).
    pub fn gain(&self, f: &PhaseField, g: &PhaseField) -> Result<PhaseField> {
        if f.frame != g.frame || f.t != g.t {
            return Err(KbError::Contract("gain needs fields in the same frame and at the same time".into()));
        }
        let plan = self.plan(Self::field_time(f));
        let pf = self.prepare(f)?;
        let pg = if std::ptr::eq(f, g) { pf.clone() } else { self.prepare(g)? };
        let values = self.gain_prepared(&plan, &pf, &pg)?;
        PhaseField::from_values(self.grid, f.t, f.frame, values)
    }

    /// Gain on prepared inputs with a prebuilt plan; returns storage-ordered values.
    pub fn gain_prepared(&self, plan: &StencilPlan, f: &PreparedField, g: &PreparedField) -> Result<Vec<f64>> {
        self.check_pair(f, g, plan)?;
        let layout = Layout::new(&self.grid);
        let nxc = layout.nxc;
        let mut out = vec![0.0; self.grid.cells()];
        if f.zero || g.zero {
            return Ok(out);
        }
        let wv = self.velocity_weights();
        let plain = self.weight.is_plain();
        out.par_chunks_mut(nxc).enumerate().for_each(|(iv, row)| {
            let vi = self.grid.v_index(iv);
            let mut buf_f = vec![0.0; layout.nx];
            let mut buf_g = vec![0.0; layout.nx];
            for st in &plan.gain {
                if !(0..layout.dim).all(|d| st.i_lo[d] <= vi[d] && vi[d] <= st.i_hi[d]) {
                    continue;
                }
                let j = self.partner(iv, st.delta, &layout);
                let coef = st.coef * if plain { 1.0 } else { wv[j] };
                let e = if plan.spatial.is_empty() {
                    None
                } else {
                    Some(&plan.spatial[st.delta * nxc..(st.delta + 1) * nxc])
                };
                sweep(&layout, st, &vi, coef, e, &f.h, &g.h, row, &mut buf_f, &mut buf_g);
            }
            if !plain {
                let v = self.grid.v_center(iv);
                for (ix, r) in row.iter_mut().enumerate() {
                    if *r != 0.0 {
                        *r *= self.reference(&self.grid.x_center(ix), &v);
                    }
                }
            }
        });
        Ok(out)
    }

    /// Gain at a single cell, summed in the same order as [`gain_prepared`](Self::gain_prepared).
    pub fn gain_at(&self, plan: &StencilPlan, f: &PreparedField, g: &PreparedField, x_flat: usize, v_flat: usize) -> Result<f64> {
        self.check_pair(f, g, plan)?;
        let layout = Layout::new(&self.grid);
        let vi = self.grid.v_index(v_flat);
        let xi = self.grid.x_index(x_flat);
        let plain = self.weight.is_plain();
        let wv_j = |j: usize| {
            if plain {
                1.0
            } else {
                (-self.weight.beta * norm2(&self.grid.v_center(j), layout.dim)).exp()
            }
        };
        let base = layout.base(&vi, &xi);
        let mut acc = 0.0;
        for st in &plan.gain {
            if !(0..layout.dim).all(|d| {
                st.i_lo[d] <= vi[d] && vi[d] <= st.i_hi[d] && st.x_lo[d] <= xi[d] && xi[d] <= st.x_hi[d]
            }) {
                continue;
            }
            let j = self.partner(v_flat, st.delta, &layout);
            let mut sf = 0.0;
            for &(o, w) in &st.f_corners {
                sf += w * f.h[base.wrapping_add_signed(o)];
            }
            let mut sg = 0.0;
            for &(o, w) in &st.g_corners {
                sg += w * g.h[base.wrapping_add_signed(o)];
            }
            let e = if plan.spatial.is_empty() {
                1.0
            } else {
                plan.spatial[st.delta * layout.nxc + x_flat]
            };
            acc += st.coef * wv_j(j) * e * (sf * sg);
        }
        if !plain {
            acc *= self.reference(&self.grid.x_center(x_flat), &self.grid.v_center(v_flat));
        }
        Ok(acc)
    }

    fn partner(&self, iv: usize, delta: usize, layout: &Layout) -> usize {
        let vi = self.grid.v_index(iv);
        let off = self.deltas[delta].offset;
        let mut j = 0usize;
        for d in 0..layout.dim {
            j = j * layout.nv + (vi[d] as isize - off[d]) as usize;
        }
        j
    }

    /// `R(g) = ‖b‖ Σ_j g(x + t u, v_j) K(|v - v_j|) hv^n` (with `t` from the frame).
    pub fn loss_rate(&self, g: &PhaseField) -> Result<PhaseField> {
        let plan = self.plan(Self::field_time(g));
        let pg = self.prepare(g)?;
        let values = self.loss_prepared(&plan, &pg)?;
        PhaseField::from_values(self.grid, g.t, g.frame, values)
    }

    pub fn loss_prepared(&self, plan: &StencilPlan, g: &PreparedField) -> Result<Vec<f64>> {
        if plan.t != g.t {
            return Err(KbError::Contract(format!("plan time {} differs from field time {}", plan.t, g.t)));
        }
        let layout = Layout::new(&self.grid);
        let nxc = layout.nxc;
        let mut out = vec![0.0; self.grid.cells()];
        if g.zero {
            return Ok(out);
        }
        let wv = self.velocity_weights();
        let plain = self.weight.is_plain();
        out.par_chunks_mut(nxc).enumerate().for_each(|(iv, row)| {
            let vi = self.grid.v_index(iv);
            for st in &plan.loss {
                if !(0..layout.dim).all(|d| st.i_lo[d] <= vi[d] && vi[d] <= st.i_hi[d]) {
                    continue;
                }
                let j = self.partner(iv, st.delta, &layout);
                let coef = st.coef * if plain { 1.0 } else { wv[j] };
                let e = if plan.spatial.is_empty() {
                    None
                } else {
                    Some(&plan.spatial[st.delta * nxc..(st.delta + 1) * nxc])
                };
                for_each_row(&layout, st, &vi, |base, out_start, len| {
                    for k in 0..len {
                        let b = base + k;
                        let mut s = 0.0;
                        for &(o, w) in &st.g_corners {
                            s += w * g.h[b.wrapping_add_signed(o)];
                        }
                        let ek = e.map_or(1.0, |e| e[out_start + k]);
                        row[out_start + k] += coef * ek * s;
                    }
                });
            }
        });
        Ok(out)
    }

    /// `Q(f, g) = Q₊(f, g) - f·R(g)`.
    pub fn apply_q(&self, f: &PhaseField, g: &PhaseField) -> Result<PhaseField> {
        let gain = self.gain(f, g)?;
        let loss = self.loss_rate(g)?;
        let values = gain
            .values
            .iter()
            .zip(&loss.values)
            .zip(&f.values)
            .map(|((q, r), fv)| q - fv * r)
            .collect();
        PhaseField::from_values(self.grid, f.t, f.frame, values)
    }

    /// Gain of two nonnegative fields as a distribution field.
    pub fn gain_distribution(&self, f: &DistributionField, g: &DistributionField) -> Result<DistributionField> {
        Ok(DistributionField::clamped(self.gain(f, g)?))
    }
}

/// Calls `body(padded_base, out_offset, run_length)` for each contiguous spatial run
/// of the stencil's rectangle at velocity cell `vi`.
#[inline]
fn for_each_row(layout: &Layout, st: &Stencil, vi: &[usize; MAX_DIM], mut body: impl FnMut(usize, usize, usize)) {
    let dim = layout.dim;
    let last = dim - 1;
    let len = st.x_hi[last] - st.x_lo[last] + 1;
    let mut xi = st.x_lo;
    loop {
        let base = layout.base(vi, &xi);
        let out_start = crate::phase::flatten(&xi, layout.nx, dim);
        body(base, out_start, len);
        // advance the prefix axes
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            if xi[d] < st.x_hi[d] {
                xi[d] += 1;
                break;
            }
            xi[d] = st.x_lo[d];
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn sweep(
    layout: &Layout,
    st: &Stencil,
    vi: &[usize; MAX_DIM],
    coef: f64,
    e: Option<&[f64]>,
    hf: &[f64],
    hg: &[f64],
    row: &mut [f64],
    buf_f: &mut [f64],
    buf_g: &mut [f64],
) {
    for_each_row(layout, st, vi, |base, out_start, len| {
        let bf = &mut buf_f[..len];
        let bg = &mut buf_g[..len];
        bf.fill(0.0);
        bg.fill(0.0);
        for &(o, w) in &st.f_corners {
            let start = base.wrapping_add_signed(o);
            for (acc, h) in bf.iter_mut().zip(&hf[start..start + len]) {
                *acc += w * h;
            }
        }
        for &(o, w) in &st.g_corners {
            let start = base.wrapping_add_signed(o);
            for (acc, h) in bg.iter_mut().zip(&hg[start..start + len]) {
                *acc += w * h;
            }
        }
        let out = &mut row[out_start..out_start + len];
        match e {
            Some(e) => {
                for (((o, a), b), ek) in out.iter_mut().zip(bf.iter()).zip(bg.iter()).zip(&e[out_start..out_start + len]) {
                    *o += coef * ek * (a * b);
                }
            }
            None => {
                for ((o, a), b) in out.iter_mut().zip(bf.iter()).zip(bg.iter()) {
                    *o += coef * (a * b);
                }
            }
        }
    });
}

/// `Σ_v Q(x, v)·φ(v)·hv^n` at spatial cell `x_flat` for `φ ∈ {1, v_1..v_n, |v|²}`.
pub fn weak_moments(q: &PhaseField, x_flat: usize) -> Vec<f64> {
    let g = &q.grid;
    let dim = g.dim();
    let vol = g.v_cell_volume();
    let mut m = vec![0.0; dim + 2];
    for iv in 0..g.v_cells() {
        let v = g.v_center(iv);
        let value = q.at(x_flat, iv) * vol;
        m[0] += value;
        for d in 0..dim {
            m[1 + d] += value * v[d];
        }
        m[dim + 1] += value * norm2(&v, dim);
    }
    m
}

/// Largest weak-form moment of `Q` at `x_flat`, relative to `Σ_v |Q|·(1 + |v| + |v|²)·hv^n`.
pub fn weak_form_residual(q: &PhaseField, x_flat: usize) -> f64 {
    let g = &q.grid;
    let dim = g.dim();
    let vol = g.v_cell_volume();
    let scale: f64 = (0..g.v_cells())
        .map(|iv| {
            let v2 = norm2(&g.v_center(iv), dim);
            q.at(x_flat, iv).abs() * (1.0 + v2.sqrt() + v2) * vol
        })
        .sum();
    if scale == 0.0 {
        return 0.0;
    }
    weak_moments(q, x_flat).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AngularKernel, KernelMode};
    use crate::phase::MaxwellianSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel(lambda: f64, dim: usize) -> CollisionKernel {
        CollisionKernel::new(lambda, AngularKernel::Constant(1.0), dim, KernelMode::NearVacuum).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Point {
        loop {
            let mut s = [0.0; MAX_DIM];
            for d in 0..dim {
                s[d] = rng.gen_range(-1.0..1.0);
            }
            let n = norm2(&s, dim).sqrt();
            if n > 0.1 {
                for d in 0..dim {
                    s[d] /= n;
                }
                return s;
            }
        }
    }

    #[test]
    fn post_collision_examples() {
        let (a, b) = post_collision(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(a, [-1.0, 0.0, 0.0]);
        assert_eq!(b, [1.0, 0.0, 0.0]);
        let v = [0.3, 1.2, 0.0];
        let vs = [-0.7, 1.2, 0.0];
        let (a, b) = post_collision(&v, &vs, &[0.0, 1.0, 0.0], 2).unwrap();
        assert_eq!((a, b), (v, vs));
        assert!(post_collision(&v, &vs, &[0.5, 0.5, 0.0], 2).is_err());
    }

    #[test]
    fn conservation_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [2, 3] {
            for _ in 0..100 {
                let mut v = [0.0; 3];
                let mut vs = [0.0; 3];
                for d in 0..dim {
                    v[d] = rng.gen_range(-5.0..5.0);
                    vs[d] = rng.gen_range(-5.0..5.0);
                }
                let s = unit(&mut rng, dim);
                let (a, b) = post_collision(&v, &vs, &s, dim).unwrap();
                let scale = norm2(&v, dim) + norm2(&vs, dim);
                for d in 0..dim {
                    assert!((a[d] + b[d] - v[d] - vs[d]).abs() <= 1e-12 * scale.sqrt().max(1.0));
                }
                let e = norm2(&a, dim) + norm2(&b, dim);
                assert!((e - scale).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn trajectory_identity_examples() {
        let x = [0.4, -1.0, 0.0];
        let v = [1.0, 2.0, 0.0];
        let vs = [-0.5, 0.3, 0.0];
        assert_eq!(trajectory_identity_check(&x, &v, &vs, &[1.0, 0.0, 0.0], 0.0, 2).unwrap(), 0.0);
        // σ ⟂ u
        let u = [1.5, 1.7];
        let n = (u[0] * u[0] + u[1] * u[1]) as f64;
        let perp = [-u[1] / n.sqrt(), u[0] / n.sqrt(), 0.0];
        let r = trajectory_identity_check(&x, &v, &vs, &perp, 2.5, 2).unwrap();
        assert!(r < 1e-13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let mut x = [0.0; 3];
            let mut v = [0.0; 3];
            let mut vs = [0.0; 3];
            for d in 0..3 {
                x[d] = rng.gen_range(-4.0..4.0);
                v[d] = rng.gen_range(-4.0..4.0);
                vs[d] = rng.gen_range(-4.0..4.0);
            }
            let tau = rng.gen_range(0.0..20.0);
            let s = unit(&mut rng, 3);
            let r = trajectory_identity_check(&x, &v, &vs, &s, tau, 3).unwrap();
            let mut u = [0.0; 3];
            for d in 0..3 {
                u[d] = v[d] - vs[d];
            }
            assert!(r <= 1e-12 * (1.0 + norm2(&x, 3) + norm2(&u, 3) * tau * tau));
        }
    }

    #[test]
    fn singular_cap_is_ball_average() {
        // λ = 0 gives 1; for n=2 the ball average of |u|^{-λ} is 2/(2-λ) r0^{-λ}
        assert!((singular_cap(2, 0.0, 0.3).unwrap() - 1.0).abs() < 1e-15);
        let h = 0.5;
        let r0 = h / std::f64::consts::PI.sqrt();
        let avg = crate::quad::integrate(
            |r: f64| r.powf(-0.5) * 2.0 * std::f64::consts::PI * r,
            0.0,
            r0,
            Default::default(),
        )
        .unwrap()
            / (h * h);
        assert!((singular_cap(2, 0.5, h).unwrap() - avg).abs() < 1e-9 * avg);
    }

    #[test]
    fn angular_nodes() {
        assert!(sigma_half_nodes(2, 6).is_err());
        assert!(sigma_half_nodes(2, 9).is_err());
        let n2 = sigma_half_nodes(2, 16).unwrap();
        let total: f64 = n2.iter().map(|n| 2.0 * n.weight).sum();
        assert!((total - 2.0 * std::f64::consts::PI).abs() < 1e-13);
        assert_eq!(sphere_split(16), (4, 4));
        assert_eq!(sphere_split(8), (2, 4));
        assert!(sigma_half_nodes(3, 9).is_err());
        let n3 = sigma_half_nodes(3, 16).unwrap();
        let total: f64 = n3.iter().map(|n| 2.0 * n.weight).sum();
        assert!((total - 4.0 * std::f64::consts::PI).abs() < 1e-12);
        for n in &n3 {
            assert!((norm2(&n.dir, 3) - 1.0).abs() < 1e-14);
        }
    }

    fn grid() -> PhaseGrid {
        PhaseGrid::new(2, 3.0, 3.0, 6, 8).unwrap()
    }

    #[test]
    fn loss_rate_examples() {
        let g = grid();
        let q = CollisionQuadrature::new(kernel(0.0, 2), g, 8, InterpolationWeight::none()).unwrap();
        let f = PhaseField::from_fn(g, 0.0, Frame::Lab, |x, v| (1.0 + x[0].abs()) * (-norm2(v, 2)).exp());
        let r = q.loss_rate(&f).unwrap();
        let bnorm = 2.0 * std::f64::consts::PI;
        for ix in 0..g.x_cells() {
            let mass: f64 = (0..g.v_cells()).map(|j| f.at(ix, j)).sum::<f64>() * g.v_cell_volume();
            for iv in 0..g.v_cells() {
                assert!((r.at(ix, iv) - bnorm * mass).abs() < 1e-12 * bnorm * mass);
            }
        }
        let zero = PhaseField::zeros(g, 0.0, Frame::Lab);
        assert_eq!(q.loss_rate(&zero).unwrap().max_abs(), 0.0);

        // single spike of mass m at v0, λ = 1/2
        let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, InterpolationWeight::none()).unwrap();
        let mut spike = PhaseField::zeros(g, 0.0, Frame::Lab);
        let (ix0, iv0) = (7, 19);
        let m = 0.75;
        spike.values[g.index(ix0, iv0)] = m / g.v_cell_volume();
        let r = q.loss_rate(&spike).unwrap();
        let v0 = g.v_center(iv0);
        for iv in 0..g.v_cells() {
            let v = g.v_center(iv);
            let dist = ((v[0] - v0[0]).powi(2) + (v[1] - v0[1]).powi(2)).sqrt();
            if dist > g.hv() * 1.01 {
                let want = bnorm * m * dist.powf(-0.5);
                assert!((r.at(ix0, iv) - want).abs() < 1e-12 * want);
            }
        }
    }

    #[test]
    fn gain_vanishes_for_zero_input_and_checks_frames() {
        let g = grid();
        let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, InterpolationWeight::none()).unwrap();
        let f = PhaseField::maxwellian(g, 0.0, Frame::Lab, &MaxwellianSpec::unit(1.0, 1.0));
        let z = PhaseField::zeros(g, 0.0, Frame::Lab);
        assert_eq!(q.gain(&f, &z).unwrap().max_abs(), 0.0);
        assert_eq!(q.gain(&z, &f).unwrap().max_abs(), 0.0);
        let ft = PhaseField { frame: Frame::Trajectory, ..f.clone() };
        assert!(matches!(q.gain(&f, &ft), Err(KbError::Contract(_))));
        assert!(q.apply_q(&f, &z).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn gain_at_matches_full_field() {
        let g = grid();
        for weight in [InterpolationWeight::none(), InterpolationWeight::maxwellian(0.7, 0.9)] {
            let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, weight).unwrap();
            let f = PhaseField::from_fn(g, 0.8, Frame::Trajectory, |x, v| {
                (1.0 + 0.3 * (x[0] + v[1]).sin()) * (-0.7 * norm2(x, 2) - 0.9 * norm2(v, 2)).exp()
            });
            let full = q.gain(&f, &f).unwrap();
            let plan = q.plan(0.8);
            let pf = q.prepare(&f).unwrap();
            for (ix, iv) in [(0, 0), (13, 27), (35, 63), (20, 40)] {
                let a = q.gain_at(&plan, &pf, &pf, ix, iv).unwrap();
                let b = full.at(ix, iv);
                assert!((a - b).abs() <= 1e-13 * b.abs().max(1e-300), "{a} vs {b}");
            }
        }
    }

    /// Direct evaluation of the gain sum, one term at a time, without stencil tables.
    fn gain_oracle(q: &CollisionQuadrature, f: &PhaseField, g_: &PhaseField, ix: usize, iv: usize) -> f64 {
        let grid = q.grid();
        let dim = grid.dim();
        let t = f.t;
        let interp = |h: &PhaseField, y: &Point, w: &Point| -> f64 {
            // bilinear in (x, v), zero outside the box
            for d in 0..dim {
                if y[d].abs() > grid.lx() + 1e-9 * grid.hx() || w[d].abs() > grid.lv() + 1e-9 * grid.hv() {
                    return 0.0;
                }
            }
            let mut px = [0.0; 3];
            let mut pv = [0.0; 3];
            for d in 0..dim {
                px[d] = (y[d] + grid.lx()) / grid.hx() - 0.5;
                pv[d] = (w[d] + grid.lv()) / grid.hv() - 0.5;
            }
            let mut acc = 0.0;
            for mask in 0..16usize {
                let mut wt = 1.0;
                let mut xi = [0usize; 3];
                let mut vi = [0usize; 3];
                let mut ok = true;
                for d in 0..dim {
                    let bx = px[d].floor();
                    let kx = bx as i64 + ((mask >> d) & 1) as i64;
                    wt *= if (mask >> d) & 1 == 1 { px[d] - bx } else { 1.0 - (px[d] - bx) };
                    let bv = pv[d].floor();
                    let kv = bv as i64 + ((mask >> (d + 2)) & 1) as i64;
                    wt *= if (mask >> (d + 2)) & 1 == 1 { pv[d] - bv } else { 1.0 - (pv[d] - bv) };
                    if kx < 0 || kx >= grid.nx() as i64 || kv < 0 || kv >= grid.nv() as i64 {
                        ok = false;
                    } else {
                        xi[d] = kx as usize;
                        vi[d] = kv as usize;
                    }
                }
                if ok && wt != 0.0 {
                    acc += wt * h.at(crate::phase::flatten(&xi, grid.nx(), dim), crate::phase::flatten(&vi, grid.nv(), dim));
                }
            }
            acc
        };
        let x = grid.x_center(ix);
        let v = grid.v_center(iv);
        let bnorm = q.kernel().angular_norm();
        let mut total = 0.0;
        for j in 0..grid.v_cells() {
            let vs = grid.v_center(j);
            let mut u = [0.0; 3];
            for d in 0..dim {
                u[d] = v[d] - vs[d];
            }
            let speed = norm2(&u, dim).sqrt();
            if speed == 0.0 {
                total += q.singular_cap() * bnorm * grid.v_cell_volume() * f.at(ix, iv) * g_.at(ix, iv);
                continue;
            }
            let nodes = sigma_half_nodes(dim, q.n_sigma()).unwrap();
            let bsum: f64 = nodes.iter().map(|n| 2.0 * n.weight).sum();
            for node in &nodes {
                let (vp, vsp) = post_collision(&v, &vs, &node.dir, dim).unwrap();
                let mut y1 = [0.0; 3];
                let mut y2 = [0.0; 3];
                for d in 0..dim {
                    y1[d] = x[d] + t * (v[d] - vp[d]);
                    y2[d] = x[d] + t * (v[d] - vsp[d]);
                }
                let w = 2.0 * node.weight * bnorm / bsum;
                total += interp(f, &y1, &vp) * interp(g_, &y2, &vsp) * speed.powf(-q.kernel().lambda()) * w * grid.v_cell_volume();
            }
        }
        total
    }

    #[test]
    fn gain_matches_direct_oracle() {
        let g = grid();
        let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, InterpolationWeight::none()).unwrap();
        for t in [0.0, 0.35, 1.3] {
            let f = PhaseField::from_fn(g, t, Frame::Trajectory, |x, v| {
                (1.2 + (x[0] - 0.5 * v[1]).cos()) * (-0.4 * norm2(x, 2) - 0.6 * norm2(v, 2)).exp()
            });
            let h = PhaseField::from_fn(g, t, Frame::Trajectory, |x, v| (-0.3 * norm2(x, 2) - norm2(v, 2)).exp() * (1.0 + v[0] * v[0]));
            let full = q.gain(&f, &h).unwrap();
            for (ix, iv) in [(14, 27), (0, 9), (21, 36), (35, 63), (8, 44)] {
                let want = gain_oracle(&q, &f, &h, ix, iv);
                let got = full.at(ix, iv);
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-200), "t={t} ({ix},{iv}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn weighted_interpolation_reproduces_barrier_reduction() {
        // Q₊^#(CM, CM) = C² M ‖b‖ hv^n Σ_j exp(-α|x+tu|² - β|v_j|²) K when all targets are interior
        let g = PhaseGrid::new(2, 4.0, 4.0, 8, 8).unwrap();
        let (alpha, beta) = (0.8, 1.1);
        let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, InterpolationWeight::maxwellian(alpha, beta)).unwrap();
        let c = 0.3;
        let t = 0.0;
        let f = PhaseField::maxwellian(g, t, Frame::Trajectory, &MaxwellianSpec::new(c, alpha, beta, 0.0).unwrap());
        let gain = q.gain(&f, &f).unwrap();
        let ix = g.x_cells() / 2 + g.nx() / 2;
        let iv = g.v_cells() / 2 + g.nv() / 2;
        let x = g.x_center(ix);
        let v = g.v_center(iv);
        let mut sum = 0.0;
        let mut drop = false;
        for j in 0..g.v_cells() {
            let vs = g.v_center(j);
            let u = [v[0] - vs[0], v[1] - vs[1], 0.0];
            let speed = norm2(&u, 2).sqrt();
            let k = if speed == 0.0 { q.singular_cap() } else { speed.powf(-0.5) };
            sum += (-alpha * norm2(&x, 2) - beta * norm2(&vs, 2)).exp() * k;
            drop |= speed > 0.0;
        }
        assert!(drop);
        let want_upper = c * c * MaxwellianSpec::unit(alpha, beta).eval(&x, &v, 2) * 2.0 * std::f64::consts::PI * g.v_cell_volume() * sum;
        let got = gain.at(ix, iv);
        // post-collision points leaving the velocity box only remove mass
        assert!(got <= want_upper * (1.0 + 1e-12));
        assert!(got >= 0.5 * want_upper);
    }

    #[test]
    fn bilinear_exactly() {
        let g = grid();
        let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, InterpolationWeight::none()).unwrap();
        let mk = |s: f64| PhaseField::from_fn(g, 0.4, Frame::Trajectory, move |x, v| (-(x[0] - s).powi(2) - norm2(v, 2)).exp());
        let (f1, f2, h) = (mk(0.3), mk(-0.8), mk(0.0));
        let a = q.apply_q(&f1.add(&f2).unwrap(), &h).unwrap();
        let b1 = q.apply_q(&f1, &h).unwrap();
        let b2 = q.apply_q(&f2, &h).unwrap();
        for k in 0..a.values.len() {
            let s = b1.values[k] + b2.values[k];
            assert!((a.values[k] - s).abs() <= 1e-12 * (b1.values[k].abs() + b2.values[k].abs()).max(1e-300));
        }
    }

    #[test]
    fn gain_is_deterministic_across_pools() {
        let g = grid();
        let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, InterpolationWeight::maxwellian(0.5, 0.5)).unwrap();
        let f = PhaseField::from_fn(g, 1.1, Frame::Trajectory, |x, v| (-0.5 * norm2(x, 2) - 0.5 * norm2(v, 2) + 0.1 * x[0] * v[1]).exp());
        let a = q.gain(&f, &f).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| q.gain(&f, &f).unwrap());
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn three_dimensional_gain_matches_oracle_shape() {
        let g = PhaseGrid::new(3, 2.0, 2.0, 4, 4).unwrap();
        let q = CollisionQuadrature::new(kernel(0.5, 3), g, 8, InterpolationWeight::none()).unwrap();
        let f = PhaseField::from_fn(g, 0.0, Frame::Lab, |x, v| (-0.5 * norm2(x, 3) - norm2(v, 3)).exp());
        let r = q.loss_rate(&f).unwrap();
        let gain = q.gain(&f, &f).unwrap();
        assert!(gain.is_nonnegative() && r.is_nonnegative());
        // mass balance at each x: Σ Q₊ ≤ Σ f R (targets leaving the box only lose mass)
        for ix in 0..g.x_cells() {
            let gp: f64 = (0..g.v_cells()).map(|iv| gain.at(ix, iv)).sum();
            let lm: f64 = (0..g.v_cells()).map(|iv| f.at(ix, iv) * r.at(ix, iv)).sum();
            assert!(gp <= lm * 1.05, "{gp} vs {lm}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn gain_and_loss_are_monotone(seed in 0u64..10_000, t in 0.0f64..2.0) {
            let g = PhaseGrid::new(2, 2.5, 2.5, 4, 6).unwrap();
            let q = CollisionQuadrature::new(kernel(0.5, 2), g, 8, InterpolationWeight::maxwellian(0.5, 0.5)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<f64> = (0..g.cells()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let bump: Vec<f64> = (0..g.cells()).map(|_| rng.gen_range(0.0..0.5)).collect();
            let f = PhaseField::from_values(g, t, Frame::Trajectory, base.clone()).unwrap();
            let big = PhaseField::from_values(g, t, Frame::Trajectory, base.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
            let lo = q.gain(&f, &f).unwrap();
            let hi = q.gain(&big, &big).unwrap();
            let rl = q.loss_rate(&f).unwrap();
            let rh = q.loss_rate(&big).unwrap();
            for k in 0..lo.values.len() {
                prop_assert!(lo.values[k] <= hi.values[k] * (1.0 + 1e-13) + 1e-300);
                prop_assert!(rl.values[k] <= rh.values[k] * (1.0 + 1e-13) + 1e-300);
                prop_assert!(lo.values[k] >= 0.0 && rl.values[k] >= 0.0);
            }
        }

        #[test]
        fn conservation_holds_for_random_samples(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 3;
            let mut v = [0.0; 3];
            let mut vs = [0.0; 3];
            for d in 0..dim {
                v[d] = rng.gen_range(-10.0..10.0);
                vs[d] = rng.gen_range(-10.0..10.0);
            }
            let s = unit(&mut rng, dim);
            let (a, b) = post_collision(&v, &vs, &s, dim).unwrap();
            let e0 = norm2(&v, dim) + norm2(&vs, dim);
            prop_assert!((norm2(&a, dim) + norm2(&b, dim) - e0).abs() <= 1e-12 * e0);
        }
    }

    fn two_bump(g: PhaseGrid) -> PhaseField {
        PhaseField::from_fn(g, 0.0, Frame::Lab, |_, v| {
            (-(v[0] - 1.0).powi(2) - v[1] * v[1]).exp() + 0.5 * (-2.0 * ((v[0] + 1.0).powi(2) + (v[1] - 0.5).powi(2))).exp()
        })
    }

    #[test]
    fn weak_form_residual_drops_under_refinement() {
        for lambda in [0.0, 0.5] {
            let res = |nv: usize, ns: usize| {
                let g = PhaseGrid::new(2, 1.0, 5.0, 4, nv).unwrap();
                let q = CollisionQuadrature::new(kernel(lambda, 2), g, ns, InterpolationWeight::none()).unwrap();
                let f = two_bump(g);
                weak_form_residual(&q.apply_q(&f, &f).unwrap(), 0)
            };
            let coarse = res(12, 16);
            let fine = res(24, 32);
            assert!(coarse / fine >= 1.5, "λ = {lambda}: {coarse:e} -> {fine:e}");
        }
    }

    #[test]
    fn maxwellian_collision_vanishes_under_refinement() {
        let rel = |nv: usize, ns: usize| {
            let g = PhaseGrid::new(2, 1.0, 5.0, 4, nv).unwrap();
            let q = CollisionQuadrature::new(kernel(0.5, 2), g, ns, InterpolationWeight::none()).unwrap();
            let m = PhaseField::from_fn(g, 0.0, Frame::Lab, |_, v| (-norm2(v, 2)).exp());
            let full = q.apply_q(&m, &m).unwrap();
            let gain = q.gain(&m, &m).unwrap();
            let inner: Vec<usize> = (0..g.v_cells()).filter(|&iv| norm2(&g.v_center(iv), 2) < 4.0).collect();
            let top = inner.iter().map(|&iv| gain.at(0, iv)).fold(0.0, f64::max);
            inner.iter().map(|&iv| full.at(0, iv).abs()).fold(0.0, f64::max) / top
        };
        let coarse = rel(12, 16);
        let fine = rel(24, 32);
        assert!(fine < coarse && coarse / fine >= 1.5, "{coarse:e} -> {fine:e}");
        assert!(fine < 0.1);
    }
}
