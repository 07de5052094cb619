//! Collision kernel `B(|u|, û·σ) = |u|^{-λ} b(û·σ)` and angular integration.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{domain, KbError, Result};
use crate::quad::{integrate_with_breaks, QuadTolerance};

/// Relative tolerance used for `‖b‖_{L¹(S^{n-1})}`.
pub const ANGULAR_NORM_RTOL: f64 = 1e-10;

/// Surface measure `|S^{n-1}| = 2π^{n/2}/Γ(n/2)`.
pub fn sphere_area(n: usize) -> Result<f64> {
    if n < 2 {
        return domain(format!("sphere_area needs n >= 2, got {n}"));
    }
    Ok(sphere_measure(n))
}

// |S^{d-1}| for d >= 1 by the two-step recursion |S^{d+1}| = 2π/d |S^{d-1}|.
fn sphere_measure(d: usize) -> f64 {
    let (mut area, mut k) = if d % 2 == 0 { (2.0 * PI, 2) } else { (2.0, 1) };
    while k < d {
        area *= 2.0 * PI / k as f64;
        k += 2;
    }
    area
}

/// Angular part `b(s)`, `s = û·σ ∈ [-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularKernel {
    Constant(f64),
    /// `b(s) = |s|^k`
    Power { exponent: f64 },
    /// Samples on the uniform nodes `s_i = -1 + 2i/(m-1)`, joined piecewise-linearly.
    Tabulated(Vec<f64>),
    /// `(b(s) + b(-s))·1{s <= 0}`
    Symmetrized(Box<AngularKernel>),
}

impl AngularKernel {
    pub fn validate(&self) -> Result<()> {
        match self {
            AngularKernel::Constant(c) => {
                if !(c.is_finite() && *c >= 0.0) {
                    return domain(format!("constant angular kernel must be finite and >= 0, got {c}"));
                }
            }
            AngularKernel::Power { exponent } => {
                if !exponent.is_finite() {
                    return domain("power angular kernel exponent must be finite");
                }
            }
            AngularKernel::Tabulated(samples) => {
                if samples.len() < 2 {
                    return domain("tabulated angular kernel needs at least two samples");
                }
                if let Some(bad) = samples.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                    return domain(format!("tabulated angular kernel sample {bad} is not finite and >= 0"));
                }
            }
            AngularKernel::Symmetrized(inner) => inner.validate()?,
        }
        Ok(())
    }

    /// Evaluates `b(s)`; `s` is clamped to `[-1, 1]`.
    pub fn eval(&self, s: f64) -> f64 {
        let s = s.clamp(-1.0, 1.0);
        match self {
            AngularKernel::Constant(c) => *c,
            AngularKernel::Power { exponent } => s.abs().powf(*exponent),
            AngularKernel::Tabulated(samples) => {
                let m = samples.len() - 1;
                let pos = (s + 1.0) * 0.5 * m as f64;
                let i = (pos.floor() as usize).min(m - 1);
                let theta = pos - i as f64;
                (1.0 - theta) * samples[i] + theta * samples[i + 1]
            }
            AngularKernel::Symmetrized(inner) => {
                if s <= 0.0 {
                    inner.eval(s) + inner.eval(-s)
                } else {
                    0.0
                }
            }
        }
    }

    /// Points in `(-1, 1)` where `b` has a kink, jump or singularity.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts = match self {
            AngularKernel::Constant(_) => Vec::new(),
            AngularKernel::Power { .. } => vec![0.0],
            AngularKernel::Tabulated(samples) => {
                let m = samples.len() - 1;
                (1..m).map(|i| -1.0 + 2.0 * i as f64 / m as f64).collect()
            }
            AngularKernel::Symmetrized(inner) => {
                let mut p = inner.breakpoints();
                let mirrored: Vec<f64> = p.iter().map(|s| -s).collect();
                p.extend(mirrored);
                p.push(0.0);
                p
            }
        };
        pts.retain(|s| *s > -1.0 && *s < 1.0);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    /// Multiplies the kernel by `c > 0`.
    pub fn scaled(&self, c: f64) -> AngularKernel {
        match self {
            AngularKernel::Constant(v) => AngularKernel::Constant(v * c),
            AngularKernel::Tabulated(s) => AngularKernel::Tabulated(s.iter().map(|v| v * c).collect()),
            AngularKernel::Symmetrized(inner) => AngularKernel::Symmetrized(Box::new(inner.scaled(c))),
            AngularKernel::Power { .. } => {
                // |s|^k has no amplitude slot; tabulating would change the function.
                AngularKernel::Tabulated(
                    (0..=2000)
                        .map(|i| c * self.eval(-1.0 + i as f64 / 1000.0))
                        .collect(),
                )
            }
        }
    }
}

/// `b̄(s) = (b(s) + b(-s))·1{s <= 0}`.
pub fn symmetrize(b: &AngularKernel) -> AngularKernel {
    AngularKernel::Symmetrized(Box::new(b.clone()))
}

/// `‖b‖_{L¹(S^{n-1})}` by adaptive quadrature (relative tolerance 1e-10).
///
/// For `n >= 3` this is `|S^{n-2}| ∫ b(s)(1-s²)^{(n-3)/2} ds`; for `n = 2` the
/// endpoint singularity is removed by integrating `2∫_0^π b(cos θ) dθ`.
pub fn angular_norm(b: &AngularKernel, n: usize) -> Result<f64> {
    b.validate()?;
    if n < 2 {
        return domain(format!("angular_norm needs n >= 2, got {n}"));
    }
    let tol = QuadTolerance::relative(ANGULAR_NORM_RTOL);
    let breaks = b.breakpoints();
    let value = if n == 2 {
        let mut pts = vec![0.0];
        // θ increases as s = cos θ decreases.
        pts.extend(breaks.iter().rev().map(|s| s.acos()));
        pts.push(PI);
        2.0 * integrate_with_breaks(|theta: f64| b.eval(theta.cos()), &pts, tol)?
    } else {
        let mut pts = vec![-1.0];
        pts.extend(breaks.iter().copied());
        pts.push(1.0);
        let exponent = (n as f64 - 3.0) / 2.0;
        let weight = move |s: f64| {
            if n == 3 {
                1.0
            } else {
                (1.0 - s * s).max(0.0).powf(exponent)
            }
        };
        sphere_measure(n - 1) * integrate_with_breaks(|s: f64| b.eval(s) * weight(s), &pts, tol)?
    };
    if !value.is_finite() {
        return Err(KbError::IntegrationFailure("angular kernel norm is not finite".into()));
    }
    Ok(value)
}

/// Which barrier construction the kernel is used with; it fixes the admissible λ range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    NearVacuum,
    NearMaxwellian,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionKernel {
    lambda: f64,
    angular: AngularKernel,
    dim: usize,
    mode: KernelMode,
    norm: f64,
}

impl CollisionKernel {
    /// Validates λ against the mode and caches `‖b‖_{L¹}`.
    pub fn new(lambda: f64, angular: AngularKernel, dim: usize, mode: KernelMode) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return domain(format!("kernel dimension must be 2 or 3, got {dim}"));
        }
        let upper = dim as f64 - 1.0;
        let lower = match mode {
            KernelMode::NearMaxwellian => 0.0,
            KernelMode::NearVacuum => -1.0,
        };
        if !(lambda.is_finite() && lambda >= lower && lambda < upper) {
            return domain(format!(
                "lambda = {lambda} outside the soft-potential range {lower} <= lambda < n-1 = {upper} for {mode:?}"
            ));
        }
        let norm = angular_norm(&angular, dim)?;
        Ok(Self {
            lambda,
            angular,
            dim,
            mode,
            norm,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn angular(&self) -> &AngularKernel {
        &self.angular
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    /// `‖b‖_{L¹(S^{n-1})}`.
    pub fn angular_norm(&self) -> f64 {
        self.norm
    }

    /// `|u|^{-λ}`.
    pub fn speed_factor(&self, speed: f64) -> f64 {
        if self.lambda == 0.0 {
            1.0
        } else {
            speed.powf(-self.lambda)
        }
    }

    /// Same kernel with a different mode (re-validated).
    pub fn with_mode(&self, mode: KernelMode) -> Result<Self> {
        Self::new(self.lambda, self.angular.clone(), self.dim, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn sphere_areas() {
        assert!(rel(sphere_area(2).unwrap(), 2.0 * PI) < 1e-15);
        assert!(rel(sphere_area(3).unwrap(), 4.0 * PI) < 1e-15);
        assert!(rel(sphere_area(4).unwrap(), 2.0 * PI * PI) < 1e-15);
        // 2π^{n/2}/Γ(n/2) through the gamma function for a few more.
        for n in 2..9 {
            let g = statrs::function::gamma::gamma(n as f64 / 2.0);
            let expected = 2.0 * PI.powf(n as f64 / 2.0) / g;
            assert!(rel(sphere_area(n).unwrap(), expected) < 1e-13, "n={n}");
        }
        assert!(matches!(sphere_area(1), Err(KbError::Domain(_))));
    }

    #[test]
    fn constant_kernel_norms() {
        let b = AngularKernel::Constant(1.0);
        assert!(rel(angular_norm(&b, 3).unwrap(), 4.0 * PI) < 1e-12);
        assert!(rel(angular_norm(&b, 2).unwrap(), 2.0 * PI) < 1e-12);
        assert!(rel(angular_norm(&b, 4).unwrap(), 2.0 * PI * PI) < 1e-10);
    }

    #[test]
    fn abs_kernel_norm_in_3d() {
        // 2π ∫_{-1}^{1} |s| ds = 2π
        let b = AngularKernel::Power { exponent: 1.0 };
        assert!(rel(angular_norm(&b, 3).unwrap(), 2.0 * PI) < 1e-10);
    }

    #[test]
    fn non_integrable_power_kernel_fails() {
        let b = AngularKernel::Power { exponent: -1.0 };
        assert!(matches!(angular_norm(&b, 3), Err(KbError::IntegrationFailure(_))));
        // but an integrable singularity is fine: 2π ∫|s|^{-1/2} = 8π
        let b = AngularKernel::Power { exponent: -0.5 };
        assert!(rel(angular_norm(&b, 3).unwrap(), 8.0 * PI) < 1e-8);
    }

    #[test]
    fn invalid_tabulation_rejected() {
        assert!(AngularKernel::Tabulated(vec![1.0, -0.1]).validate().is_err());
        assert!(AngularKernel::Tabulated(vec![1.0]).validate().is_err());
        assert!(AngularKernel::Tabulated(vec![1.0, f64::INFINITY]).validate().is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let b = symmetrize(&AngularKernel::Constant(1.0));
        assert_eq!(b.eval(-0.3), 2.0);
        assert_eq!(b.eval(0.0), 2.0);
        assert_eq!(b.eval(0.3), 0.0);
        // s·1{s>=0} tabulated exactly on nodes {-1, 0, 1}
        let ramp = AngularKernel::Tabulated(vec![0.0, 0.0, 1.0]);
        let sym = symmetrize(&ramp);
        for s in [-1.0, -0.7, -0.25, 0.0, 0.4, 1.0] {
            let expected = if s <= 0.0 { -s } else { 0.0 };
            assert!((sym.eval(s) - expected).abs() < 1e-15, "s={s}");
        }
    }

    #[test]
    fn symmetrization_preserves_norm_for_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let m = rng.gen_range(3..12);
            let table: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..3.0)).collect();
            let b = AngularKernel::Tabulated(table);
            for n in [2, 3] {
                let a = angular_norm(&b, n).unwrap();
                let s = angular_norm(&symmetrize(&b), n).unwrap();
                assert!(rel(s, a) < 1e-8, "n={n}: {a} vs {s}");
            }
        }
    }

    #[test]
    fn norm_is_positively_homogeneous() {
        let b = AngularKernel::Tabulated(vec![0.5, 1.0, 2.0, 0.25]);
        let base = angular_norm(&b, 3).unwrap();
        for c in [0.5, 2.0, 8.0] {
            let scaled = angular_norm(&b.scaled(c), 3).unwrap();
            assert!(rel(scaled, c * base) < 1e-12);
        }
    }

    #[test]
    fn lambda_validated_against_mode() {
        let b = AngularKernel::Constant(1.0);
        assert!(CollisionKernel::new(1.0, b.clone(), 2, KernelMode::NearMaxwellian).is_err());
        assert!(CollisionKernel::new(-0.5, b.clone(), 2, KernelMode::NearMaxwellian).is_err());
        assert!(CollisionKernel::new(-0.5, b.clone(), 2, KernelMode::NearVacuum).is_ok());
        assert!(CollisionKernel::new(-1.5, b.clone(), 3, KernelMode::NearVacuum).is_err());
        assert!(CollisionKernel::new(1.9, b.clone(), 3, KernelMode::NearMaxwellian).is_ok());
        assert!(CollisionKernel::new(0.5, b, 4, KernelMode::NearVacuum).is_err());
    }
}
