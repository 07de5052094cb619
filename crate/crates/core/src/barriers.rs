//! Barrier constructions: the near-vacuum Maxwellian envelope `C·M_{α,β}` and the
//! near-local-Maxwellian pair `C₁(t)M₁ ≤ f^# ≤ C₂(t)M₂` with closed-form amplitudes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::collision::{sigma_half_nodes, singular_cap, CollisionQuadrature};
use crate::error::{domain, KbError, Result};
use crate::kernel::{sphere_area, CollisionKernel};
use crate::phase::{norm2, Frame, MaxwellianSpec, PhaseField, PhaseGrid, Point, MAX_DIM};
use crate::quad::gauss_legendre;

/// Gaussian factors below `exp(-PHI_CUT)` = 1e-12 are dropped from `φ` lattices.
pub const PHI_CUT: f64 = 27.631021115928547;
/// Safety factor applied to sampled sup norms of `φ`.
pub const SUP_MARGIN: f64 = 1.05;

/// `√π α^{-1/2} ‖b‖ (|S^{n-1}|/(n-λ-1) + π^{n/2} β^{-n/2})`.
pub fn k_alpha_beta(alpha: f64, beta: f64, kernel: &CollisionKernel) -> Result<f64> {
    if !(alpha > 0.0) {
        return domain(format!("alpha must be > 0, got {alpha}"));
    }
    if beta == 0.0 {
        return domain("the near-vacuum constant needs beta > 0; use the near-Maxwellian regime for beta = 0");
    }
    if !(beta > 0.0) {
        return domain(format!("beta must be > 0, got {beta}"));
    }
    let n = kernel.dim() as f64;
    let m = n - kernel.lambda() - 1.0;
    if !(m > 0.0) {
        return domain(format!("need lambda < n - 1, got lambda = {}", kernel.lambda()));
    }
    let pi = std::f64::consts::PI;
    let area = sphere_area(kernel.dim())?;
    Ok(pi.sqrt() / alpha.sqrt() * kernel.angular_norm() * (area / m + dimensional_constant(kernel.dim()) * beta.powf(-n / 2.0)))
}

/// `C_n = π^{n/2}`, the full Gaussian mass bounding the velocity tail.
pub fn dimensional_constant(dim: usize) -> f64 {
    std::f64::consts::PI.powf(dim as f64 / 2.0)
}

/// Smaller root of `k C² - C + f = 0`, written as `2f / (1 + √(1 - 4kf))`.
pub fn vacuum_fixed_point(f0_norm: f64, k_ab: f64) -> Result<f64> {
    if !(f0_norm >= 0.0) || !f0_norm.is_finite() {
        return domain(format!("initial norm must be finite and >= 0, got {f0_norm}"));
    }
    if !(k_ab > 0.0) || !k_ab.is_finite() {
        return domain(format!("k must be finite and > 0, got {k_ab}"));
    }
    let threshold = 1.0 / (4.0 * k_ab);
    let kf = 4.0 * k_ab * f0_norm;
    if kf > 1.0 + 4.0 * f64::EPSILON {
        return Err(KbError::SmallnessViolated {
            norm: f0_norm,
            threshold,
        });
    }
    // within rounding of the double root the square root would amplify noise
    let disc = if (1.0 - kf).abs() <= 4.0 * f64::EPSILON { 0.0 } else { 1.0 - kf };
    Ok(2.0 * f0_norm / (1.0 + disc.sqrt()))
}

/// Static near-vacuum envelope `u₀ = C·M_{α,β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VacuumBarrier {
    pub alpha: f64,
    pub beta: f64,
    pub k_ab: f64,
    pub c: f64,
    pub f0_norm: f64,
    pub cn: f64,
}

impl VacuumBarrier {
    pub fn new(alpha: f64, beta: f64, f0_norm: f64, kernel: &CollisionKernel) -> Result<Self> {
        let k_ab = k_alpha_beta(alpha, beta, kernel)?;
        let c = vacuum_fixed_point(f0_norm, k_ab)?;
        Ok(Self {
            alpha,
            beta,
            k_ab,
            c,
            f0_norm,
            cn: dimensional_constant(kernel.dim()),
        })
    }

    pub fn threshold(&self) -> f64 {
        1.0 / (4.0 * self.k_ab)
    }

    pub fn envelope(&self) -> MaxwellianSpec {
        MaxwellianSpec {
            c: self.c,
            alpha: self.alpha,
            beta: self.beta,
            shift: 0.0,
        }
    }
}

/// `|C₂ - C₁| + |α₂ - α₁| + |β₂ - β₁|`; both envelopes must use the same shift.
pub fn maxwellian_distance(m1: &MaxwellianSpec, m2: &MaxwellianSpec) -> Result<f64> {
    if m1.shift != m2.shift {
        return domain(format!("cannot compare Maxwellians with shifts {} and {}", m1.shift, m2.shift));
    }
    Ok((m2.c - m1.c).abs() + (m2.alpha - m1.alpha).abs() + (m2.beta - m1.beta).abs())
}

/// Lattice spacing for `φ` at time `t`.
fn phi_spacing(alpha: f64, beta: f64, t: f64, divisor: f64) -> f64 {
    let a = 1.0 / alpha.sqrt();
    let b = if beta > 0.0 { t / beta.sqrt() } else { f64::INFINITY };
    a.min(b) / divisor
}

fn default_divisor(dim: usize) -> f64 {
    if dim == 2 {
        8.0
    } else {
        4.0
    }
}

/// Sums `weight(w, |w|^{-λ}) · h^n` over the lattice `hℤ^n` restricted to the box of
/// half-width `radius` around `center`; the origin uses the ball average of `|w|^{-λ}`.
fn lattice_sum(dim: usize, lambda: f64, h: f64, center: &Point, radius: f64, mut term: impl FnMut(&Point, f64) -> f64) -> Result<f64> {
    let cap = singular_cap(dim, lambda, h)?;
    let mut lo = [0i64; MAX_DIM];
    let mut hi = [0i64; MAX_DIM];
    for d in 0..dim {
        lo[d] = ((center[d] - radius) / h).floor() as i64;
        hi[d] = ((center[d] + radius) / h).ceil() as i64;
    }
    let vol = h.powi(dim as i32);
    let mut idx = lo;
    let mut acc = 0.0;
    loop {
        let mut w = [0.0; MAX_DIM];
        let mut zero = true;
        for d in 0..dim {
            w[d] = idx[d] as f64 * h;
            zero &= idx[d] == 0;
        }
        let k = if zero { cap } else { norm2(&w, dim).sqrt().powf(-lambda) };
        acc += term(&w, k);
        let mut d = dim;
        loop {
            if d == 0 {
                return Ok(acc * vol);
            }
            d -= 1;
            if idx[d] < hi[d] {
                idx[d] += 1;
                break;
            }
            idx[d] = lo[d];
        }
    }
}

/// `‖b‖ ∫ exp(-α|x+w|² - β|v - w/t|²)|w|^{-λ} dw` on a lattice centred at the origin.
pub fn phi_eval(alpha: f64, beta: f64, t: f64, x: &Point, v: &Point, kernel: &CollisionKernel) -> Result<f64> {
    phi_eval_with(alpha, beta, t, x, v, kernel, default_divisor(kernel.dim()))
}

/// As [`phi_eval`] with lattice spacing `min(α^{-1/2}, t β^{-1/2}) / divisor`.
pub fn phi_eval_with(alpha: f64, beta: f64, t: f64, x: &Point, v: &Point, kernel: &CollisionKernel, divisor: f64) -> Result<f64> {
    if !(t >= 1.0) {
        return domain(format!("phi is defined for t >= 1, got {t}"));
    }
    if !(alpha > 0.0 && beta >= 0.0) {
        return domain("phi needs alpha > 0 and beta >= 0");
    }
    let dim = kernel.dim();
    let h = phi_spacing(alpha, beta, t, divisor);
    let radius = (PHI_CUT / alpha).sqrt();
    let mut center = [0.0; MAX_DIM];
    for d in 0..dim {
        center[d] = -x[d];
    }
    let s = lattice_sum(dim, kernel.lambda(), h, &center, radius, |w, k| {
        let mut ex = 0.0;
        let mut ev = 0.0;
        for d in 0..dim {
            let a = x[d] + w[d];
            let b = v[d] - w[d] / t;
            ex += a * a;
            ev += b * b;
        }
        let e = alpha * ex + beta * ev;
        if e > PHI_CUT {
            0.0
        } else {
            (-e).exp() * k
        }
    })?;
    Ok(kernel.angular_norm() * s)
}

/// Sampled sup norms of `φ₁`, `φ₂`, `φ₁ - φ₂` and `φ₁ + φ₂`, multiplied by
/// [`SUP_MARGIN`]; `raw_*` hold the unscaled maxima.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiSups {
    pub phi1: f64,
    pub phi2: f64,
    pub diff: f64,
    pub sum: f64,
    pub raw_phi1: f64,
    pub raw_phi2: f64,
    pub raw_diff: f64,
    pub raw_sum: f64,
}

#[derive(Clone, Copy)]
struct PhiSample {
    t: f64,
    a: f64,
    b: f64,
    psi: f64,
}

fn sample_point(s: &PhiSample, dim: usize) -> (Point, Point) {
    let mut x = [0.0; MAX_DIM];
    let mut v = [0.0; MAX_DIM];
    x[0] = s.a;
    v[0] = s.b * s.psi.cos();
    if dim > 1 {
        v[1] = s.b * s.psi.sin();
    }
    (x, v)
}

/// Estimates the four sup norms over `t ∈ [1, 10⁶]` and all `(x, v)`. Joint rotations
/// of `(x, v)` leave `φ` invariant, so `x` is placed on the first axis and `v` in the
/// first coordinate plane. A coarse lattice is followed by one local refinement of
/// each maximiser.
pub fn phi_sup_norms(m1: &MaxwellianSpec, m2: &MaxwellianSpec, kernel: &CollisionKernel) -> Result<PhiSups> {
    let dim = kernel.dim();
    let eval = |s: &PhiSample| -> Result<(f64, f64)> {
        let (x, v) = sample_point(s, dim);
        Ok((
            phi_eval(m1.alpha, m1.beta, s.t, &x, &v, kernel)?,
            phi_eval(m2.alpha, m2.beta, s.t, &x, &v, kernel)?,
        ))
    };
    let amin = m1.alpha.min(m2.alpha);
    let bmin = m1.beta.min(m2.beta);
    let a_max = 2.0 / amin.sqrt();
    let b_max = if bmin > 0.0 { 2.0 / bmin.sqrt() } else { 2.0 };
    let n_t = 13;
    let n_a = 7;
    let n_b = 7;
    let n_psi = 5;
    let ts: Vec<f64> = (0..n_t).map(|i| 10f64.powf(6.0 * i as f64 / (n_t - 1) as f64)).collect();
    let mut best = [(f64::NEG_INFINITY, PhiSample { t: 1.0, a: 0.0, b: 0.0, psi: 0.0 }); 4];
    let score = |p: (f64, f64)| [p.0, p.1, (p.0 - p.1).abs(), p.0 + p.1];
    let consider = |s: PhiSample, best: &mut [(f64, PhiSample); 4]| -> Result<()> {
        let vals = score(eval(&s)?);
        for (slot, val) in best.iter_mut().zip(vals) {
            if val > slot.0 {
                *slot = (val, s);
            }
        }
        Ok(())
    };
    for &t in &ts {
        for ia in 0..n_a {
            let a = a_max * ia as f64 / (n_a - 1) as f64;
            for ib in 0..n_b {
                let b = b_max * ib as f64 / (n_b - 1) as f64;
                let psis = if ib == 0 { 1 } else { n_psi };
                for ip in 0..psis {
                    let psi = std::f64::consts::PI * ip as f64 / (n_psi - 1) as f64;
                    consider(PhiSample { t, a, b, psi }, &mut best)?;
                }
            }
        }
    }
    // one refinement pass around each maximiser at half the coarse spacing
    let da = a_max / (n_a - 1) as f64 / 2.0;
    let db = b_max / (n_b - 1) as f64 / 2.0;
    let dpsi = std::f64::consts::PI / (n_psi - 1) as f64 / 2.0;
    let tfac = 10f64.powf(6.0 / (n_t - 1) as f64 / 2.0);
    let seeds: Vec<PhiSample> = best.iter().map(|b| b.1).collect();
    for s in seeds {
        for kt in -1i32..=1 {
            for ka in -1i32..=1 {
                for kb in -1i32..=1 {
                    for kp in -1i32..=1 {
                        let cand = PhiSample {
                            t: (s.t * tfac.powi(kt)).clamp(1.0, 1e6),
                            a: (s.a + ka as f64 * da).max(0.0),
                            b: (s.b + kb as f64 * db).max(0.0),
                            psi: (s.psi + kp as f64 * dpsi).clamp(0.0, std::f64::consts::PI),
                        };
                        consider(cand, &mut best)?;
                    }
                }
            }
        }
    }
    Ok(PhiSups {
        phi1: SUP_MARGIN * best[0].0,
        phi2: SUP_MARGIN * best[1].0,
        diff: SUP_MARGIN * best[2].0,
        sum: SUP_MARGIN * best[3].0,
        raw_phi1: best[0].0,
        raw_phi2: best[1].0,
        raw_diff: best[2].0,
        raw_sum: best[3].0,
    })
}

/// `(S - D)/(S + D) · C₁(1)C₂(1)` with `S = ‖φ₁+φ₂‖`, `D = ‖φ₁-φ₂‖`.
pub fn barrier_k2(c1_init: f64, c2_init: f64, sum: f64, diff: f64) -> Result<f64> {
    if !(diff >= 0.0) || !(sum > diff) {
        return domain(format!("need ||phi1+phi2|| > ||phi1-phi2|| >= 0, got {sum} and {diff}"));
    }
    Ok((sum - diff) / (sum + diff) * c1_init * c2_init)
}

/// Amplitude system `C₁' = [(C₁²-C₁C₂)S - (C₁²+C₁C₂)D]/(2t^{m+1})`,
/// `C₂' = [(C₂²-C₁C₂)S + (C₂²+C₁C₂)D]/(2t^{m+1})` with `m = n - λ - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarrierOde {
    pub c1_init: f64,
    pub c2_init: f64,
    pub sum: f64,
    pub diff: f64,
    pub m: f64,
    pub k: f64,
}

impl BarrierOde {
    pub fn new(c1_init: f64, c2_init: f64, sum: f64, diff: f64, m: f64) -> Result<Self> {
        if !(c1_init > 0.0 && c1_init <= c2_init) {
            return domain(format!("need 0 < C1(1) <= C2(1), got {c1_init} and {c2_init}"));
        }
        if !(m > 0.0) {
            return domain(format!("need n - lambda - 1 > 0, got {m}"));
        }
        let k2 = barrier_k2(c1_init, c2_init, sum, diff)?;
        Ok(Self {
            c1_init,
            c2_init,
            sum,
            diff,
            m,
            k: k2.sqrt(),
        })
    }

    pub fn rhs(&self, t: f64, c1: f64, c2: f64) -> (f64, f64) {
        let den = 2.0 * t.powf(self.m + 1.0);
        let p = c1 * c2;
        (
            ((c1 * c1 - p) * self.sum - (c1 * c1 + p) * self.diff) / den,
            ((c2 * c2 - p) * self.sum + (c2 * c2 + p) * self.diff) / den,
        )
    }

    fn rate(&self) -> f64 {
        self.k * (self.sum + self.diff) / self.m
    }

    /// `((C₂(1)+k)/(C₂(1)-k)) / exp(k(S+D)/m)`; `+∞` when `C₂(1) = k`.
    pub fn margin(&self) -> f64 {
        let gap = self.c2_init - self.k;
        if gap <= 0.0 {
            return f64::INFINITY;
        }
        ((self.c2_init + self.k) / gap) / self.rate().exp()
    }

    /// Time at which `C₂` diverges, if the boundedness condition fails.
    pub fn critical_time(&self) -> Option<f64> {
        if self.margin() > 1.0 {
            return None;
        }
        let q1 = (self.c2_init - self.k) / (self.c2_init + self.k);
        let base = 1.0 - q1.recip().ln() / self.rate();
        Some(if base > 0.0 { base.powf(-1.0 / self.m) } else { f64::INFINITY })
    }

    fn check_bounded(&self) -> Result<()> {
        let margin = self.margin();
        if margin > 1.0 {
            Ok(())
        } else {
            Err(KbError::BlowUp {
                critical_t: self.critical_time().unwrap_or(f64::INFINITY),
                margin,
            })
        }
    }

    /// Closed-form `C₂(t)` for `t ≥ 1`.
    pub fn c2(&self, t: f64) -> Result<f64> {
        if !(t >= 1.0) {
            return domain(format!("barrier profiles are defined for t >= 1, got {t}"));
        }
        self.check_bounded()?;
        if t == 1.0 || self.c2_init == self.k {
            return Ok(self.c2_init);
        }
        let q1 = (self.c2_init - self.k) / (self.c2_init + self.k);
        let q = q1 * (self.rate() * (1.0 - t.powf(-self.m))).exp();
        Ok(self.k * (1.0 + q) / (1.0 - q))
    }

    /// `C₁(t) = C₁(1)C₂(1)/C₂(t)`.
    pub fn c1(&self, t: f64) -> Result<f64> {
        let c2 = self.c2(t)?;
        if c2 == self.c2_init {
            return Ok(self.c1_init);
        }
        Ok(self.c1_init * self.c2_init / c2)
    }

    /// `lim_{t→∞} C₂(t)`.
    pub fn c2_limit(&self) -> Result<f64> {
        self.check_bounded()?;
        if self.c2_init == self.k {
            return Ok(self.c2_init);
        }
        let q1 = (self.c2_init - self.k) / (self.c2_init + self.k);
        let q = q1 * self.rate().exp();
        Ok(self.k * (1.0 + q) / (1.0 - q))
    }
}

/// Near-local-Maxwellian barrier pair. `target`, `m1`, `m2` carry the lab shift
/// (`x - v` at the initial time), so `m_i` with the shift removed are the static
/// trajectory-frame envelopes at internal time 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxwellianBarrier {
    pub target: MaxwellianSpec,
    pub m1: MaxwellianSpec,
    pub m2: MaxwellianSpec,
    pub eps: f64,
    pub sups: PhiSups,
    pub k2: f64,
    pub ode: BarrierOde,
    pub dim: usize,
    pub lambda: f64,
}

/// Ordering and closeness problems of a proposed sandwich; empty when valid.
pub fn sandwich_parameter_problems(target: &MaxwellianSpec, m1: &MaxwellianSpec, m2: &MaxwellianSpec, eps: f64) -> Vec<String> {
    let mut p = Vec::new();
    if !(m2.alpha <= target.alpha && target.alpha <= m1.alpha) {
        p.push(format!("need alpha2 <= alpha <= alpha1, got {} <= {} <= {}", m2.alpha, target.alpha, m1.alpha));
    }
    if !(m2.beta <= target.beta && target.beta <= m1.beta) {
        p.push(format!("need beta2 <= beta <= beta1, got {} <= {} <= {}", m2.beta, target.beta, m1.beta));
    }
    if !(m1.c <= target.c && target.c <= m2.c) {
        p.push(format!("need C1 <= C <= C2, got {} <= {} <= {}", m1.c, target.c, m2.c));
    }
    if !(0.5 * target.c <= m1.c && m2.c <= 2.0 * target.c) {
        p.push("amplitudes must lie within a factor 2 of the target".into());
    }
    if !(0.5 * target.alpha <= m2.alpha && m1.alpha <= 2.0 * target.alpha) {
        p.push("spatial rates must lie within a factor 2 of the target".into());
    }
    if !(0.5 * target.beta <= m2.beta && m1.beta <= 2.0 * target.beta) {
        p.push("velocity rates must lie within a factor 2 of the target".into());
    }
    if (target.beta == 0.0) != (m1.beta == 0.0 && m2.beta == 0.0) {
        p.push("beta = 0 requires beta1 = beta2 = 0".into());
    }
    for (name, m) in [("M1", m1), ("M2", m2)] {
        match maxwellian_distance(m, target) {
            Ok(d) if d < eps => {}
            Ok(d) => p.push(format!("d({name}, M) = {d} is not below eps = {eps}")),
            Err(e) => p.push(e.to_string()),
        }
    }
    p
}

impl MaxwellianBarrier {
    pub fn new(target: MaxwellianSpec, m1: MaxwellianSpec, m2: MaxwellianSpec, eps: f64, kernel: &CollisionKernel) -> Result<Self> {
        for m in [&target, &m1, &m2] {
            m.validate()?;
        }
        let problems = sandwich_parameter_problems(&target, &m1, &m2, eps);
        if !problems.is_empty() {
            return domain(problems.join("; "));
        }
        let sups = phi_sup_norms(&m1, &m2, kernel)?;
        Self::with_sups(target, m1, m2, eps, sups, kernel)
    }

    /// Builds the pair from precomputed sup norms.
    pub fn with_sups(target: MaxwellianSpec, m1: MaxwellianSpec, m2: MaxwellianSpec, eps: f64, sups: PhiSups, kernel: &CollisionKernel) -> Result<Self> {
        let m = kernel.dim() as f64 - kernel.lambda() - 1.0;
        let ode = BarrierOde::new(m1.c, m2.c, sups.sum, sups.diff, m)?;
        Ok(Self {
            target,
            m1,
            m2,
            eps,
            sups,
            k2: ode.k * ode.k,
            ode,
            dim: kernel.dim(),
            lambda: kernel.lambda(),
        })
    }

    pub fn boundedness_condition(&self) -> f64 {
        self.ode.margin()
    }

    pub fn c1_profile(&self, t: f64) -> Result<f64> {
        self.ode.c1(t)
    }

    pub fn c2_profile(&self, t: f64) -> Result<f64> {
        self.ode.c2(t)
    }

    /// Trajectory-frame lower envelope `C₁(t)·M_{α₁,β₁}(x, v)` at internal time `t`.
    pub fn lower(&self, t: f64) -> Result<MaxwellianSpec> {
        Ok(MaxwellianSpec {
            c: self.c1_profile(t)?,
            alpha: self.m1.alpha,
            beta: self.m1.beta,
            shift: 0.0,
        })
    }

    pub fn upper(&self, t: f64) -> Result<MaxwellianSpec> {
        Ok(MaxwellianSpec {
            c: self.c2_profile(t)?,
            alpha: self.m2.alpha,
            beta: self.m2.beta,
            shift: 0.0,
        })
    }
}

pub fn c1_profile(t: f64, barrier: &MaxwellianBarrier) -> Result<f64> {
    barrier.c1_profile(t)
}

pub fn c2_profile(t: f64, barrier: &MaxwellianBarrier) -> Result<f64> {
    barrier.c2_profile(t)
}

pub fn boundedness_condition(barrier: &MaxwellianBarrier) -> f64 {
    barrier.boundedness_condition()
}

/// Outcome of the pointwise sandwich `M₁ ≤ f₀ ≤ M₂` and the closeness clause.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichVerdict {
    pub pass: bool,
    pub pointwise_pass: bool,
    pub distance_pass: bool,
    pub d1: f64,
    pub d2: f64,
    pub violations: usize,
    /// `(x cell, v cell, relative excess)` of the worst violation.
    pub worst: Option<(usize, usize, f64)>,
}

/// Checks `C₁M₁ ≤ f₀ ≤ C₂M₂` on every lab cell. The envelopes carry the lab shift,
/// so this is the trajectory-frame sandwich at the initial time written in lab
/// coordinates (no interpolation involved).
pub fn sandwich_check(f0: &PhaseField, m1: &MaxwellianSpec, m2: &MaxwellianSpec, target: &MaxwellianSpec, eps: f64) -> Result<SandwichVerdict> {
    if f0.frame != Frame::Lab {
        return Err(KbError::Contract("sandwich_check expects a lab-frame initial datum".into()));
    }
    let d1 = maxwellian_distance(m1, target)?;
    let d2 = maxwellian_distance(m2, target)?;
    let g = f0.grid;
    let dim = g.dim();
    let mut violations = 0;
    let mut worst: Option<(usize, usize, f64)> = None;
    for iv in 0..g.v_cells() {
        let v = g.v_center(iv);
        for ix in 0..g.x_cells() {
            let x = g.x_center(ix);
            let f = f0.at(ix, iv);
            let lo = m1.eval(&x, &v, dim);
            let hi = m2.eval(&x, &v, dim);
            let scale = hi.max(f.abs()).max(f64::MIN_POSITIVE);
            let excess = ((lo - f).max(f - hi)) / scale;
            if excess > 1e-12 {
                violations += 1;
                if worst.map_or(true, |w| excess > w.2) {
                    worst = Some((ix, iv, excess));
                }
            }
        }
    }
    let distance_pass = d1 < eps && d2 < eps;
    Ok(SandwichVerdict {
        pass: violations == 0 && distance_pass,
        pointwise_pass: violations == 0,
        distance_pass,
        d1,
        d2,
        violations,
        worst,
    })
}

/// `(x cell, v cell)` pairs drawn uniformly from the grid.
pub fn sample_cells(grid: &PhaseGrid, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (rng.gen_range(0..grid.x_cells()), rng.gen_range(0..grid.v_cells())))
        .collect()
}

/// Worst ratio of the time-integrated gain to its Maxwellian bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainIntegralReport {
    pub worst_ratio: f64,
    pub worst_cell: (usize, usize),
    pub k_ab: f64,
    pub t_end: f64,
    pub f_norm: f64,
    pub g_norm: f64,
    pub ratios: Vec<f64>,
}

/// Panel breakpoints in `[0, t_end]`, geometric away from the origin.
fn time_panels(t_end: f64) -> Vec<f64> {
    let mut pts = vec![0.0];
    let mut t = (t_end / 256.0).min(0.05);
    while t < t_end {
        pts.push(t);
        t *= 2.0;
    }
    pts.push(t_end);
    pts
}

/// Integrates `|Q₊^#(f,g)(τ)|` over `τ ∈ [0, t_end]` at the sampled cells and compares
/// with `k_{α,β} M_{α,β}(x,v) ‖f^#‖ ‖g^#‖`, the norms taken as sups over the
/// quadrature times. `f(τ)`, `g(τ)` must return trajectory-frame fields at time `τ`.
pub fn gain_time_integral_check(
    q: &CollisionQuadrature,
    f: &dyn Fn(f64) -> Result<PhaseField>,
    g: &dyn Fn(f64) -> Result<PhaseField>,
    alpha: f64,
    beta: f64,
    t_end: f64,
    samples: &[(usize, usize)],
) -> Result<GainIntegralReport> {
    let k_ab = k_alpha_beta(alpha, beta, q.kernel())?;
    let grid = q.grid();
    let dim = grid.dim();
    let (gl_x, gl_w) = gauss_legendre(8);
    let panels = time_panels(t_end);
    let mut integrals = vec![0.0; samples.len()];
    let mut f_norm: f64 = 0.0;
    let mut g_norm: f64 = 0.0;
    for win in panels.windows(2) {
        let (a, b) = (win[0], win[1]);
        for (xk, wk) in gl_x.iter().zip(&gl_w) {
            let tau = 0.5 * (a + b) + 0.5 * (b - a) * xk;
            let ff = f(tau)?;
            let gg = g(tau)?;
            for fld in [&ff, &gg] {
                if fld.frame != Frame::Trajectory || fld.t != tau {
                    return Err(KbError::Contract("gain integrand must be trajectory-frame fields at the requested time".into()));
                }
            }
            f_norm = f_norm.max(ff.weighted_sup_norm(alpha, beta));
            g_norm = g_norm.max(gg.weighted_sup_norm(alpha, beta));
            let plan = q.plan(tau);
            let pf = q.prepare(&ff)?;
            let pg = q.prepare(&gg)?;
            for (acc, &(ix, iv)) in integrals.iter_mut().zip(samples) {
                *acc += 0.5 * (b - a) * wk * q.gain_at(&plan, &pf, &pg, ix, iv)?.abs();
            }
        }
    }
    let mut ratios = Vec::with_capacity(samples.len());
    let mut worst = (0.0, samples.first().copied().unwrap_or((0, 0)));
    for (integral, &(ix, iv)) in integrals.iter().zip(samples) {
        let bound = k_ab * MaxwellianSpec::unit(alpha, beta).eval(&grid.x_center(ix), &grid.v_center(iv), dim) * f_norm * g_norm;
        let r = if *integral == 0.0 { 0.0 } else { integral / bound };
        if r > worst.0 {
            worst = (r, (ix, iv));
        }
        ratios.push(r);
    }
    Ok(GainIntegralReport {
        worst_ratio: worst.0,
        worst_cell: worst.1,
        k_ab,
        t_end,
        f_norm,
        g_norm,
        ratios,
    })
}

/// Pointwise trajectory-frame gain `Q₊^#(A, B)(t,x,v)` of two static envelopes,
/// summed over a lattice in `w = t·u` and the angular nodes without using the
/// energy identity.
pub fn envelope_gain(a: &MaxwellianSpec, b: &MaxwellianSpec, t: f64, x: &Point, v: &Point, kernel: &CollisionKernel, n_sigma: usize, divisor: f64) -> Result<f64> {
    let dim = kernel.dim();
    let nodes = sigma_half_nodes(dim, n_sigma)?;
    let bk = kernel.angular();
    let alpha = a.alpha.min(b.alpha);
    let beta = a.beta.min(b.beta);
    let h = phi_spacing(alpha, beta, t, divisor);
    let radius = (PHI_CUT / alpha).sqrt();
    let mut center = [0.0; MAX_DIM];
    for d in 0..dim {
        center[d] = -x[d];
    }
    let bnorm = kernel.angular_norm();
    let s = lattice_sum(dim, kernel.lambda(), h, &center, radius, |w, k| {
        let mut u = [0.0; MAX_DIM];
        for d in 0..dim {
            u[d] = w[d] / t;
        }
        let speed = norm2(&u, dim).sqrt();
        if speed == 0.0 {
            return a.eval(x, v, dim) * b.eval(x, v, dim) * bnorm * k;
        }
        // fold ±σ; normalise the discrete angular mass to ‖b‖
        let mut raw = 0.0;
        let mut acc = 0.0;
        for node in &nodes {
            let c = crate::phase::dot(&u, &node.dir, dim) / speed;
            let wt = (bk.eval(c) + bk.eval(-c)) * node.weight;
            if wt == 0.0 {
                continue;
            }
            raw += wt;
            let us = c * speed;
            let mut p1 = [0.0; MAX_DIM];
            let mut q1 = [0.0; MAX_DIM];
            let mut p2 = [0.0; MAX_DIM];
            let mut q2 = [0.0; MAX_DIM];
            for d in 0..dim {
                let sd = us * node.dir[d];
                p1[d] = x[d] + t * sd;
                q1[d] = v[d] - sd;
                p2[d] = x[d] + t * (u[d] - sd);
                q2[d] = v[d] - u[d] + sd;
            }
            acc += wt * a.eval(&p1, &q1, dim) * b.eval(&p2, &q2, dim);
        }
        if raw == 0.0 {
            0.0
        } else {
            acc * bnorm / raw * k
        }
    })?;
    // du = dw / t^n and |u|^{-λ} = t^λ |w|^{-λ}
    Ok(s * t.powf(kernel.lambda() - dim as f64))
}

/// Pointwise trajectory-frame loss rate `R^#(B)(t,x,v) = ‖b‖∫B(x+tu, v-u)|u|^{-λ}du`.
pub fn envelope_loss_rate(b: &MaxwellianSpec, t: f64, x: &Point, v: &Point, kernel: &CollisionKernel, divisor: f64) -> Result<f64> {
    let dim = kernel.dim();
    let h = phi_spacing(b.alpha, b.beta, t, divisor);
    let radius = (PHI_CUT / b.alpha).sqrt();
    let mut center = [0.0; MAX_DIM];
    for d in 0..dim {
        center[d] = -x[d];
    }
    let s = lattice_sum(dim, kernel.lambda(), h, &center, radius, |w, k| {
        let mut p = [0.0; MAX_DIM];
        let mut q = [0.0; MAX_DIM];
        for d in 0..dim {
            p[d] = x[d] + w[d];
            q[d] = v[d] - w[d] / t;
        }
        b.eval(&p, &q, dim) * k
    })?;
    Ok(kernel.angular_norm() * s * t.powf(kernel.lambda() - dim as f64))
}

/// Residuals of the two barrier differential inequalities at one sample point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// `dl₀^#/dt + Q₋^#(l₀,u₀) - Q₊^#(l₀,l₀)`, must be ≤ tolerance.
    pub lower_excess: f64,
    /// `Q₊^#(u₀,u₀) - du₀^#/dt - Q₋^#(u₀,l₀)`, must be ≤ tolerance.
    pub upper_excess: f64,
    pub lower_tolerance: f64,
    pub upper_tolerance: f64,
    /// Excess divided by the size of the largest term.
    pub lower_relative: f64,
    pub upper_relative: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeginningConditionReport {
    pub pass: bool,
    pub margin: f64,
    pub points: Vec<InequalityPoint>,
    pub worst_lower_relative: f64,
    pub worst_upper_relative: f64,
}

struct InequalityTerms {
    lower: [f64; 3],
    upper: [f64; 3],
}

fn inequality_terms(barrier: &MaxwellianBarrier, kernel: &CollisionKernel, n_sigma: usize, t: f64, x: &Point, v: &Point, divisor: f64) -> Result<InequalityTerms> {
    let dim = kernel.dim();
    let l = barrier.lower(t)?;
    let u = barrier.upper(t)?;
    // central differences of the closed-form amplitudes
    let dt = 1e-4 * t;
    let tm = (t - dt).max(1.0);
    let tp = t + dt;
    let dc1 = (barrier.c1_profile(tp)? - barrier.c1_profile(tm)?) / (tp - tm);
    let dc2 = (barrier.c2_profile(tp)? - barrier.c2_profile(tm)?) / (tp - tm);
    let m1 = MaxwellianSpec::unit(l.alpha, l.beta).eval(x, v, dim);
    let m2 = MaxwellianSpec::unit(u.alpha, u.beta).eval(x, v, dim);
    let lower = [
        dc1 * m1,
        l.eval(x, v, dim) * envelope_loss_rate(&u, t, x, v, kernel, divisor)?,
        envelope_gain(&l, &l, t, x, v, kernel, n_sigma, divisor)?,
    ];
    let upper = [
        dc2 * m2,
        u.eval(x, v, dim) * envelope_loss_rate(&l, t, x, v, kernel, divisor)?,
        envelope_gain(&u, &u, t, x, v, kernel, n_sigma, divisor)?,
    ];
    Ok(InequalityTerms { lower, upper })
}

/// Checks the barrier differential inequalities
/// `dl₀^#/dt + Q₋^#(l₀,u₀) ≤ Q₊^#(l₀,l₀)` and `du₀^#/dt + Q₋^#(u₀,l₀) ≥ Q₊^#(u₀,u₀)`
/// at the given internal times and points. Each collision term is evaluated at two
/// lattice resolutions; their difference plus the finite-difference error estimate
/// is the tolerance for that point.
pub fn beginning_condition_check(
    barrier: &MaxwellianBarrier,
    kernel: &CollisionKernel,
    n_sigma: usize,
    points: &[(f64, Point, Point)],
) -> Result<BeginningConditionReport> {
    let margin = barrier.boundedness_condition();
    let dim = kernel.dim();
    let coarse = default_divisor(dim);
    let mut out = Vec::with_capacity(points.len());
    let mut worst_l: f64 = f64::NEG_INFINITY;
    let mut worst_u: f64 = f64::NEG_INFINITY;
    let mut pass = margin > 1.0;
    for (t, x, v) in points {
        let fine = inequality_terms(barrier, kernel, n_sigma, *t, x, v, 2.0 * coarse)?;
        let rough = inequality_terms(barrier, kernel, n_sigma, *t, x, v, coarse)?;
        let lower_excess = fine.lower[0] + fine.lower[1] - fine.lower[2];
        let upper_excess = fine.upper[2] - fine.upper[0] - fine.upper[1];
        let quad_l = (fine.lower[1] - rough.lower[1]).abs() + (fine.lower[2] - rough.lower[2]).abs();
        let quad_u = (fine.upper[1] - rough.upper[1]).abs() + (fine.upper[2] - rough.upper[2]).abs();
        let scale_l = fine.lower.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let scale_u = fine.upper.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let lower_tolerance = quad_l + 1e-9 * scale_l;
        let upper_tolerance = quad_u + 1e-9 * scale_u;
        let lower_relative = if scale_l > 0.0 { lower_excess / scale_l } else { 0.0 };
        let upper_relative = if scale_u > 0.0 { upper_excess / scale_u } else { 0.0 };
        worst_l = worst_l.max(lower_relative);
        worst_u = worst_u.max(upper_relative);
        let ok = lower_excess <= lower_tolerance && upper_excess <= upper_tolerance;
        pass &= ok;
        out.push(InequalityPoint {
            t: *t,
            x: x[..dim].to_vec(),
            v: v[..dim].to_vec(),
            lower_excess,
            upper_excess,
            lower_tolerance,
            upper_tolerance,
            lower_relative,
            upper_relative,
            pass: ok,
        });
    }
    Ok(BeginningConditionReport {
        pass,
        margin,
        points: out,
        worst_lower_relative: worst_l,
        worst_upper_relative: worst_u,
    })
}

/// Deterministic sample set for [`beginning_condition_check`]: internal times spread
/// over `[1, t_max]` and points within two decay lengths of the origin.
pub fn inequality_sample_points(barrier: &MaxwellianBarrier, t_max: f64, count: usize, seed: u64) -> Vec<(f64, Point, Point)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = barrier.dim;
    let rx = 1.5 / barrier.m2.alpha.sqrt();
    let rv = if barrier.m2.beta > 0.0 { 1.5 / barrier.m2.beta.sqrt() } else { 1.5 };
    (0..count)
        .map(|i| {
            let t = t_max.powf(i as f64 / (count.max(2) - 1) as f64);
            let mut x = [0.0; MAX_DIM];
            let mut v = [0.0; MAX_DIM];
            for d in 0..dim {
                x[d] = rng.gen_range(-rx..rx);
                v[d] = rng.gen_range(-rv..rv);
            }
            (t, x, v)
        })
        .collect()
}

/// Diagnostics emitted with every barrier construction.
#[derive(Debug, Clone, Serialize)]
pub struct BarrierDiagnostics {
    pub k_ab: Option<f64>,
    pub c: Option<f64>,
    pub margin: Option<f64>,
    pub k2: Option<f64>,
    pub phi_sups: Option<PhiSups>,
    pub profile: Vec<(f64, f64, f64)>,
}

impl BarrierDiagnostics {
    pub fn vacuum(b: &VacuumBarrier) -> Self {
        Self {
            k_ab: Some(b.k_ab),
            c: Some(b.c),
            margin: None,
            k2: None,
            phi_sups: None,
            profile: Vec::new(),
        }
    }

    pub fn maxwellian(b: &MaxwellianBarrier) -> Result<Self> {
        let mut profile = Vec::new();
        for i in 0..=12 {
            let t = 10f64.powf(i as f64 / 4.0);
            profile.push((t, b.c1_profile(t)?, b.c2_profile(t)?));
        }
        Ok(Self {
            k_ab: None,
            c: Some(b.target.c),
            margin: Some(b.boundedness_condition()),
            k2: Some(b.k2),
            phi_sups: Some(b.sups),
            profile,
        })
    }
}
