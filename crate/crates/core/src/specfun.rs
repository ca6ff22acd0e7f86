//! Special functions used by the kernel formulas: the modified Bessel
//! function of the first kind (ascending series, with a certified tail),
//! Gegenbauer polynomials and `ln Γ`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest order accepted by [`bessel_i`].
pub const BESSEL_MAX_ORDER: f64 = 200.0;
/// Largest argument accepted by [`bessel_i`].
pub const BESSEL_MAX_ARG: f64 = 50.0;

const BESSEL_MAX_TERMS: usize = 10_000;

/// A truncated series value together with a bound on the discarded tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesEval {
    pub value: f64,
    pub terms_used: usize,
    pub tail_bound: f64,
}

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("log_gamma needs a finite x > 0, got {x}")));
    }
    Ok(libm::lgamma(x))
}

fn check_bessel_domain(nu: f64, z: f64, tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("bessel tolerance must be > 0, got {tol}")));
    }
    let supported = || format!("nu in [0, {BESSEL_MAX_ORDER}], z in [0, {BESSEL_MAX_ARG}]");
    if !nu.is_finite() || !(0.0..=BESSEL_MAX_ORDER).contains(&nu) {
        return Err(Error::Range { what: format!("order nu = {nu}"), supported: supported() });
    }
    if !z.is_finite() || !(0.0..=BESSEL_MAX_ARG).contains(&z) {
        return Err(Error::Range { what: format!("argument z = {z}"), supported: supported() });
    }
    Ok(())
}

/// The normalized series `I_ν(z) / (z/2)^ν = Σ_k (z/2)^{2k} / (k! Γ(ν+k+1))`.
/// `tol` is absolute and refers to the normalized value.
pub fn bessel_i_scaled(nu: f64, z: f64, tol: f64) -> Result<SeriesEval> {
    check_bessel_domain(nu, z, tol)?;
    scaled_series(nu, z, 0.0, tol)
}

/// `e^{log_factor} · I_ν(z) / (z/2)^ν`, summed with the factor folded into
/// every term so that neither the factor nor `1/Γ(ν+1)` can overflow or
/// underflow on its own.
///
/// Terms are accumulated in log space. After `K` terms the ratio of
/// consecutive terms is at most `q = (z/2)² / ((K+1)(ν+K+1))`, and the ratio
/// only decreases afterwards, so the tail is dominated by `T_K / (1 - q)`.
pub(crate) fn scaled_series(nu: f64, z: f64, log_factor: f64, tol: f64) -> Result<SeriesEval> {
    let lead = log_factor - log_gamma(nu + 1.0)?;
    if z == 0.0 {
        return Ok(SeriesEval { value: lead.exp(), terms_used: 1, tail_bound: 0.0 });
    }
    let half_sq = 0.25 * z * z;
    let log_half_sq = half_sq.ln();

    let mut log_term = lead;
    let mut sum = 0.0;
    let mut k = 0usize;
    loop {
        sum += log_term.exp();
        k += 1;
        let kf = k as f64;
        let next_log = log_term + log_half_sq - (kf * (nu + kf)).ln();
        let q = half_sq / ((kf + 1.0) * (nu + kf + 1.0));
        if q < 1.0 {
            let tail = next_log.exp() / (1.0 - q);
            if tail <= tol || k >= BESSEL_MAX_TERMS {
                return Ok(SeriesEval { value: sum, terms_used: k, tail_bound: tail });
            }
        }
        log_term = next_log;
    }
}

/// Modified Bessel function of the first kind `I_ν(z)` by its ascending
/// series, with `|value − I_ν(z)| ≤ tail_bound ≤ tol` (absolute).
pub fn bessel_i(nu: f64, z: f64, tol: f64) -> Result<SeriesEval> {
    check_bessel_domain(nu, z, tol)?;
    if z == 0.0 {
        let value = if nu == 0.0 { 1.0 } else { 0.0 };
        return Ok(SeriesEval { value, terms_used: 1, tail_bound: 0.0 });
    }
    let log_prefactor = nu * (0.5 * z).ln();
    if log_prefactor > 700.0 {
        return Err(Error::Range {
            what: format!("(z/2)^nu overflows for nu = {nu}, z = {z}"),
            supported: format!("nu in [0, {BESSEL_MAX_ORDER}], z in [0, {BESSEL_MAX_ARG}]"),
        });
    }
    scaled_series(nu, z, log_prefactor, tol)
}

fn check_gegenbauer(lam: f64, x: f64) -> Result<f64> {
    if !(lam > 0.0) || !lam.is_finite() {
        return Err(Error::Domain(format!("Gegenbauer parameter must be > 0, got {lam}")));
    }
    if !(x.abs() <= 1.0 + 1e-12) {
        return Err(Error::Domain(format!("Gegenbauer argument must lie in [-1, 1], got {x}")));
    }
    Ok(x.clamp(-1.0, 1.0))
}

/// `C_l^λ(x)` by the three-term recurrence.
pub fn gegenbauer(l: usize, lam: f64, x: f64) -> Result<f64> {
    Ok(*gegenbauer_table(l, lam, x)?.last().expect("table holds l + 1 entries"))
}

/// `[C_0^λ(x), …, C_{l_max}^λ(x)]`.
pub fn gegenbauer_table(l_max: usize, lam: f64, x: f64) -> Result<Vec<f64>> {
    let x = check_gegenbauer(lam, x)?;
    let mut out = Vec::with_capacity(l_max + 1);
    out.push(1.0);
    if l_max >= 1 {
        out.push(2.0 * lam * x);
    }
    for n in 2..=l_max {
        let nf = n as f64;
        let next = (2.0 * x * (nf + lam - 1.0) * out[n - 1] - (nf + 2.0 * lam - 2.0) * out[n - 2]) / nf;
        out.push(next);
    }
    Ok(out)
}

/// `C_l^λ(1) = Γ(l + 2λ) / (Γ(2λ) l!)`.
pub fn gegenbauer_at_one(l: usize, lam: f64) -> Result<f64> {
    check_gegenbauer(lam, 1.0)?;
    let lf = l as f64;
    Ok((log_gamma(lf + 2.0 * lam)? - log_gamma(2.0 * lam)? - log_gamma(lf + 1.0)?).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Brute-force series with a fixed number of terms, factorials built by
    /// repeated multiplication.
    fn bessel_oracle(nu: f64, z: f64, terms: usize) -> f64 {
        let mut sum = 0.0;
        for k in 0..terms {
            let mut denom = libm::tgamma(nu + 1.0);
            for j in 1..=k {
                denom *= j as f64 * (nu + j as f64);
            }
            sum += (0.5 * z).powf(2.0 * k as f64 + nu) / denom;
        }
        sum
    }

    #[test]
    fn bessel_at_origin() {
        let e = bessel_i(0.0, 0.0, 1e-12).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.terms_used, 1);
        assert_eq!(e.tail_bound, 0.0);
        assert_eq!(bessel_i(2.5, 0.0, 1e-12).unwrap().value, 0.0);
    }

    #[test]
    fn bessel_half_order_closed_form() {
        let e = bessel_i(0.5, 1.0, 1e-12).unwrap();
        let closed = (2.0 / PI).sqrt() * 1f64.sinh();
        assert!((e.value - closed).abs() <= 1e-12, "{} vs {}", e.value, closed);
        assert!((closed - 0.937674).abs() < 1e-6);
        assert!((bessel_oracle(0.5, 1.0, 30) - closed).abs() < 1e-14);
        assert!(e.tail_bound <= 1e-12);
    }

    #[test]
    fn bessel_order_one() {
        let e = bessel_i(1.0, 1.0, 1e-12).unwrap();
        let oracle = bessel_oracle(1.0, 1.0, 40);
        assert!((e.value - oracle).abs() <= 1e-12);
        assert!((e.value - 0.565159).abs() < 1e-6);
    }

    #[test]
    fn bessel_rejects_outside_domain() {
        assert!(matches!(bessel_i(250.0, 1.0, 1e-8), Err(Error::Range { .. })));
        assert!(matches!(bessel_i(1.0, 60.0, 1e-8), Err(Error::Range { .. })));
        assert!(matches!(bessel_i(-1.0, 1.0, 1e-8), Err(Error::Range { .. })));
        assert!(matches!(bessel_i(1.0, f64::NAN, 1e-8), Err(Error::Range { .. })));
        assert!(matches!(bessel_i(1.0, 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn bessel_large_argument_edge() {
        // I_0(50) ≈ 2.93255378e20
        let e = bessel_i(0.0, 50.0, 1e6).unwrap();
        assert!((e.value / 2.932_553_783_849_336_3e20 - 1.0).abs() < 1e-13);
        let e = bessel_i(200.0, 50.0, 1e-300).unwrap();
        assert!(e.value > 0.0 && e.value.is_finite());
    }

    #[test]
    fn bessel_monotone_in_argument() {
        for &nu in &[0.0, 0.5, 1.0, 3.7, 12.0] {
            let mut prev: f64 = -1.0;
            for i in 0..=200 {
                let z = i as f64 * 0.25;
                let v = bessel_i(nu, z, 1e-14 * (1.0 + prev.abs())).unwrap().value;
                assert!(v >= prev, "nu={nu} z={z}");
                prev = v;
            }
        }
    }

    #[test]
    fn bessel_tail_shrinks_with_terms() {
        let a = bessel_i(3.0, 8.0, 1e-6).unwrap();
        let b = bessel_i(3.0, 8.0, 1e-10).unwrap();
        assert!(b.terms_used >= a.terms_used);
        assert!(b.tail_bound <= a.tail_bound);
    }

    #[test]
    fn log_gamma_values() {
        assert_eq!(log_gamma(1.0).unwrap(), 0.0);
        assert!((log_gamma(0.5).unwrap() - PI.sqrt().ln()).abs() < 1e-15);
        assert!((log_gamma(5.0).unwrap() - 24f64.ln()).abs() < 1e-14);
        assert!(matches!(log_gamma(0.0), Err(Error::Domain(_))));
        assert!(matches!(log_gamma(-2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn log_gamma_stirling_cross_check() {
        // Stirling with five Bernoulli corrections is far below 1e-13 for x ≥ 10.
        for &x in &[10.0, 37.5, 123.25, 1000.0, 1e4] {
            let stirling = (x - 0.5) * f64::ln(x) - x + 0.5 * (2.0 * PI).ln() + 1.0 / (12.0 * x)
                - 1.0 / (360.0 * x.powi(3))
                + 1.0 / (1260.0 * x.powi(5))
                - 1.0 / (1680.0 * x.powi(7))
                + 1.0 / (1188.0 * x.powi(9));
            let v = log_gamma(x).unwrap();
            assert!(((v - stirling) / stirling).abs() < 1e-13, "x={x}");
        }
        // Integer factorials.
        let mut fact = 1.0f64;
        for n in 2..20 {
            fact *= n as f64;
            let v = log_gamma(n as f64 + 1.0).unwrap();
            assert!(((v - fact.ln()) / fact.ln()).abs() < 1e-13);
        }
    }

    #[test]
    fn gegenbauer_small_degrees() {
        assert_eq!(gegenbauer(0, 0.5, 0.3).unwrap(), 1.0);
        assert!((gegenbauer(1, 0.5, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((gegenbauer(5, 1.0, 1.0).unwrap() - 6.0).abs() < 1e-12);
        assert!((gegenbauer_at_one(5, 1.0).unwrap() - 6.0).abs() < 1e-12);
        assert!(gegenbauer(2, 0.0, 0.1).is_err());
        assert!(gegenbauer(2, 1.0, 1.5).is_err());
    }

    #[test]
    fn gegenbauer_matches_chebyshev_u_expansion() {
        // U_10(x) = Σ_k (-1)^k binom(10-k, k) (2x)^{10-2k}
        let n = 10usize;
        for i in 0..=40 {
            let x = -1.0 + i as f64 * 0.05;
            let mut mono = 0.0;
            for k in 0..=n / 2 {
                let binom = (0..k).fold(1.0, |acc, j| acc * (n - k - j) as f64 / (j + 1) as f64);
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                mono += sign * binom * (2.0 * x).powi((n - 2 * k) as i32);
            }
            let rec = gegenbauer(n, 1.0, x).unwrap();
            assert!((rec - mono).abs() <= 1e-10 * mono.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn gegenbauer_at_one_matches_recurrence() {
        for &lam in &[0.5, 1.0, 1.5, 3.5] {
            let table = gegenbauer_table(30, lam, 1.0).unwrap();
            for (l, v) in table.iter().enumerate() {
                let c = gegenbauer_at_one(l, lam).unwrap();
                assert!((v / c - 1.0).abs() < 1e-12, "lam={lam} l={l}");
            }
        }
    }
}
