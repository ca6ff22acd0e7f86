//! Closed-form pieces that are not kernels: the normal-normal component of
//! `g_t` on a half-space and the flat constant `c₁` recomputed by quadrature.
//!
//! The half-space kernel uses the Neumann reflection
//! `ρ(x, y, t) = G(x − y) + G(x − ȳ)`. Its normal-normal pullback component is
//!
//! `c_n t^{−(n+2)/2} ((1 − e^{−u})/2 + u e^{−u})`, `u = x_n²/2t`, `c_n = 2c₁`,
//!
//! which tends to the whole-space value `c₁ t^{−(n+2)/2}` far from the
//! boundary and vanishes on it. The profile peaks at `u = 3/2`.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pullback::flat_constant;
use crate::quadrature::integrate_panels;
use crate::specfun::log_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HalfSpaceSample {
    pub n: usize,
    pub x_n: f64,
    pub t: f64,
    pub value: f64,
}

/// `c_n = 2c₁`, fixed by matching the whole-space value as `x_n → ∞`.
pub fn halfspace_constant(n: usize) -> f64 {
    2.0 * flat_constant(n)
}

/// `((1 − e^{−u})/2 + u e^{−u})` as a function of `u = x_n²/2t`.
pub fn halfspace_profile(u: f64) -> f64 {
    -0.5 * (-u).exp_m1() + u * (-u).exp()
}

fn check_args(n: usize, x_n: f64, t: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("dimension must be ≥ 1".into()));
    }
    if !(x_n > 0.0) || !x_n.is_finite() {
        return Err(Error::Domain(format!("x_n must be finite and > 0, got {x_n}")));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite and > 0, got {t}")));
    }
    Ok(())
}

/// `g_t(∂_{x_n}, ∂_{x_n})` on `ℝⁿ₊` at height `x_n`, closed form.
pub fn halfspace_gt_normal(n: usize, x_n: f64, t: f64) -> Result<HalfSpaceSample> {
    check_args(n, x_n, t)?;
    let u = x_n * x_n / (2.0 * t);
    let value = halfspace_constant(n) * t.powf(-0.5 * (n as f64 + 2.0)) * halfspace_profile(u);
    Ok(HalfSpaceSample { n, x_n, t, value })
}

/// `|S^k|`, the area of the unit `k`-sphere.
fn sphere_area(k: usize) -> f64 {
    let h = 0.5 * (k as f64 + 1.0);
    2.0 * PI.powf(h) * (-log_gamma(h).expect("positive")).exp()
}

/// `∫_{ℝⁿ₊} (∂_{x_n} ρ(x, y, t))² dy` by a 2-D Gauss–Legendre rule over the
/// height `y_n` and the radial tangential coordinate `|y'|`.
pub fn halfspace_gt_normal_quadrature(n: usize, x_n: f64, t: f64) -> Result<HalfSpaceSample> {
    check_args(n, x_n, t)?;
    let g1 = |d: f64| (4.0 * PI * t).powf(-0.5) * (-d * d / (4.0 * t)).exp();
    let dg1 = |d: f64| -d / (2.0 * t) * g1(d);
    let tangential = |rho: f64| (4.0 * PI * t).powf(-0.5 * (n as f64 - 1.0)) * (-rho * rho / (4.0 * t)).exp();
    let normal = |b: f64| dg1(x_n - b) + dg1(x_n + b);
    let reach = 40.0 * t.sqrt();
    let value = if n == 1 {
        integrate_panels(0.0, x_n + reach, 32, |b| normal(b).powi(2))
    } else {
        let area = sphere_area(n - 2);
        integrate_panels(0.0, x_n + reach, 32, |b| {
            let nb = normal(b);
            integrate_panels(0.0, reach, 8, |rho| area * rho.powi(n as i32 - 2) * (tangential(rho) * nb).powi(2))
        })
    };
    Ok(HalfSpaceSample { n, x_n, t, value })
}

/// `∫_{ℝⁿ} (∂_{x₁} ρ(0, y, 1))² dy`, which is `c₁` since `t = 1`.
///
/// The Gaussian factorizes, so the integral is a product of 1-D rules.
pub fn flat_constant_by_quadrature(n: usize) -> Result<f64> {
    if !(1..=6).contains(&n) {
        return Err(Error::Range { what: format!("dimension {n}"), supported: "1 ≤ n ≤ 6".into() });
    }
    let g1 = |y: f64| (4.0 * PI).powf(-0.5) * (-y * y / 4.0).exp();
    let along = integrate_panels(-40.0, 40.0, 32, |y| (0.5 * y * g1(y)).powi(2));
    let across = integrate_panels(-40.0, 40.0, 32, |y| g1(y).powi(2));
    Ok(along * across.powi(n as i32 - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_from_boundary() {
        for n in 1..=4 {
            for t in [0.3f64, 1.0, 2.5] {
                let v = halfspace_gt_normal(n, 50.0 * t.sqrt(), t).unwrap().value;
                let interior = flat_constant(n) * t.powf(-0.5 * (n as f64 + 2.0));
                assert!((v / interior - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vanishes_at_boundary() {
        assert!(halfspace_gt_normal(3, 1e-4, 1.0).unwrap().value <= 1e-7);
        let mut prev = 0.0;
        for k in 1..20 {
            let v = halfspace_gt_normal(3, 1e-6 * k as f64, 1.0).unwrap().value;
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for (n, x, t) in [(3, 1.0, 1.0), (2, 0.4, 0.5), (1, 2.0, 1.5), (4, 1.2, 2.0)] {
            let a = halfspace_gt_normal(n, x, t).unwrap().value;
            let b = halfspace_gt_normal_quadrature(n, x, t).unwrap().value;
            assert!((a - b).abs() <= 1e-10 * a, "n={n} x={x} t={t}: {a} vs {b}");
        }
    }

    #[test]
    fn profile_shape() {
        // Rises to a maximum at x_n² = 3t, then falls back to the interior value.
        let t = 1.0;
        let peak = 3.0f64.sqrt();
        let grid: Vec<f64> = (1..200).map(|i| i as f64 * 0.05).collect();
        let v: Vec<f64> = grid.iter().map(|&x| halfspace_gt_normal(3, x, t).unwrap().value).collect();
        for (w, x) in v.windows(2).zip(&grid) {
            if x + 0.05 <= peak {
                assert!(w[1] > w[0]);
            } else if *x >= peak && *x < 5.0 {
                assert!(w[1] < w[0]);
            } else if *x >= peak {
                assert!(w[1] <= w[0]);
            }
        }
        assert!((halfspace_profile(1.5) - (0.5 + (-1.5f64).exp())).abs() < 1e-15);
        assert!(v.iter().all(|&y| y > 0.0));
    }

    #[test]
    fn self_similar() {
        for (x, t) in [(0.3, 0.2), (1.0, 4.0), (2.0, 0.7)] {
            let scaled = |s: HalfSpaceSample| s.value * s.t.powf(2.5);
            let a = scaled(halfspace_gt_normal(3, x, t).unwrap());
            let b = scaled(halfspace_gt_normal(3, x / t.sqrt(), 1.0).unwrap());
            assert!((a - b).abs() <= 1e-15 * a);
            let qa = scaled(halfspace_gt_normal_quadrature(3, x, t).unwrap());
            let qb = scaled(halfspace_gt_normal_quadrature(3, x / t.sqrt(), 1.0).unwrap());
            assert!((qa - qb).abs() <= 1e-8 * qa);
        }
    }

    #[test]
    fn domain_errors() {
        assert!(halfspace_gt_normal(3, 0.0, 1.0).is_err());
        assert!(halfspace_gt_normal(3, 1.0, -1.0).is_err());
        assert!(flat_constant_by_quadrature(7).is_err());
    }

    #[test]
    fn flat_constant_oracle() {
        for n in 1..=6 {
            let q = flat_constant_by_quadrature(n).unwrap();
            assert!((q * 4.0 * (8.0 * PI).powf(0.5 * n as f64) - 1.0).abs() < 1e-9, "n={n}");
        }
        assert!((flat_constant_by_quadrature(1).unwrap() - 0.049_867).abs() < 1e-6);
        assert!((flat_constant_by_quadrature(2).unwrap() - 0.009_947).abs() < 1e-6);
    }
}
