//! Heat kernels and heat traces with certified truncation.
//!
//! Compact round factors are summed level by level through the addition
//! theorem. Products multiply factor kernels, cones sum Bessel-weighted link
//! levels, and rescaled spaces use `ρ̃(x, y, t) = b⁻¹ ρ(x, y, a⁻² t)`.
//!
//! Every series stops once a computable tail bound plus a floating-point
//! summation allowance drops below the requested tolerance. The tail bounds
//! all come from the same observation: the per-level majorants `b_l` have
//! nonincreasing ratios `b_{l+1}/b_l`, so past level `L` the tail is at most
//! `b_{L+1} / (1 − b_{L+2}/b_{L+1})`.

use std::cell::Cell;
use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model_spaces::{compact_leaves, Leaf, ModelSpace, Point, Round};
use crate::specfun::{log_gamma, scaled_series, BESSEL_MAX_ARG, BESSEL_MAX_ORDER};

/// Default cap on the number of levels any single series may use.
pub const DEFAULT_MAX_LEVELS: usize = 100_000;

/// Floating-point allowance per accumulated term, relative to the sum of
/// magnitudes.
const ROUNDING: f64 = f64::EPSILON;

/// Relative accuracy used where an operation exposes no tolerance.
pub(crate) const TIGHT_REL: f64 = 1e-12;

thread_local! {
    static LEVEL_BUDGET: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Level budget: a [`with_level_budget`] override on this thread, else
/// `HEATLAB_MAX_LEVELS`, else [`DEFAULT_MAX_LEVELS`].
pub fn max_levels() -> usize {
    LEVEL_BUDGET.with(Cell::get).unwrap_or_else(|| {
        std::env::var("HEATLAB_MAX_LEVELS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .filter(|&n: &usize| n > 0)
            .unwrap_or(DEFAULT_MAX_LEVELS)
    })
}

/// Runs `f` with the level budget of the current thread set to `levels`.
pub fn with_level_budget<R>(levels: usize, f: impl FnOnce() -> R) -> R {
    let previous = LEVEL_BUDGET.with(|b| b.replace(Some(levels.max(1))));
    let out = f();
    LEVEL_BUDGET.with(|b| b.set(previous));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationCertificate {
    pub terms_used: usize,
    pub tail_bound: f64,
    pub target_tol: f64,
}

/// A value with a certified absolute error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certified {
    pub value: f64,
    pub cert: TruncationCertificate,
}

pub type KernelValue = Certified;

impl Certified {
    fn exact(value: f64, target_tol: f64) -> Self {
        Certified { value, cert: TruncationCertificate { terms_used: 1, tail_bound: 0.0, target_tol } }
    }
}

fn check_time_tol(t: f64, tol: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite and > 0, got {t}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
    }
    Ok(())
}

/// `b1 / (1 − b2/b1)` when the ratio is below one.
fn geometric_tail(b1: f64, b2: f64) -> Option<f64> {
    if b1 == 0.0 {
        return Some(0.0);
    }
    let q = b2 / b1;
    (q < 1.0).then(|| b1 / (1.0 - q))
}

fn budget_error(terms_used: usize, tail_bound: f64, target_tol: f64) -> Error {
    Error::BudgetExceeded { best: TruncationCertificate { terms_used, tail_bound, target_tol } }
}

/// Kernel of one rescaled round factor at a given geodesic angle.
fn leaf_kernel(leaf: &Leaf, angle: f64, t: f64, tol: f64) -> Result<Certified> {
    let budget = max_levels();
    let vol = leaf.volume();
    let majorant = |l: usize| leaf.mult(l) / vol * (-leaf.mu(l) * t).exp();
    let mut sum = 0.0;
    let mut majorant_sum = 0.0;
    let mut best = f64::INFINITY;
    for (l, e) in leaf.addition_kernels(angle).enumerate() {
        sum += (-leaf.mu(l) * t).exp() * e;
        majorant_sum += majorant(l);
        if let Some(tail) = geometric_tail(majorant(l + 1), majorant(l + 2)) {
            let rounding = 2.0 * ROUNDING * (l as f64 + 3.0) * majorant_sum;
            let bound = tail + rounding;
            best = best.min(bound);
            if bound <= tol {
                return Ok(Certified {
                    value: sum,
                    cert: TruncationCertificate { terms_used: l + 1, tail_bound: bound, target_tol: tol },
                });
            }
            // Only the rounding allowance is left and it keeps growing.
            if tail <= 1e-3 * rounding {
                return Err(budget_error(l + 1, best, tol));
            }
        }
        if l + 1 >= budget {
            return Err(budget_error(l + 1, best, tol));
        }
    }
    unreachable!("addition kernels stream forever")
}

/// A positive sum with a relative error bound.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PositiveSum {
    pub value: f64,
    pub rel: f64,
    pub terms: usize,
}

impl PositiveSum {
    fn scale(self, c: f64) -> Self {
        PositiveSum { value: self.value * c, rel: self.rel + ROUNDING, ..self }
    }

    fn times(self, o: PositiveSum) -> Self {
        PositiveSum {
            value: self.value * o.value,
            rel: (1.0 + self.rel) * (1.0 + o.rel) - 1.0 + ROUNDING,
            terms: self.terms + o.terms,
        }
    }

    fn plus(self, o: PositiveSum) -> Self {
        PositiveSum { value: self.value + o.value, rel: self.rel.max(o.rel) + ROUNDING, terms: self.terms + o.terms }
    }

    pub(crate) fn certified(self, target_tol: f64) -> Certified {
        Certified {
            value: self.value,
            cert: TruncationCertificate { terms_used: self.terms, tail_bound: self.rel * self.value, target_tol },
        }
    }
}

/// `Σ_l m_l μ_l^w e^{−μ_l s}` over one factor, with `w ∈ {0, 1}`.
pub(crate) fn leaf_positive_sum(leaf: &Leaf, s: f64, weight_mu: bool, rel_tol: f64) -> Result<PositiveSum> {
    let budget = max_levels();
    let term = |l: usize| {
        let mu = leaf.mu(l);
        let w = if weight_mu { mu } else { 1.0 };
        leaf.mult(l) * w * (-mu * s).exp()
    };
    let mut sum = 0.0;
    let mut best = f64::INFINITY;
    for l in 0..budget {
        sum += term(l);
        if l == 1 && sum < f64::MIN_POSITIVE {
            return Err(Error::Range {
                what: format!("spectral sum at s = {s} (first nonzero level underflows)"),
                supported: "sums above the smallest normal f64".into(),
            });
        }
        if sum > 0.0 {
            if let Some(tail) = geometric_tail(term(l + 1), term(l + 2)) {
                let rounding = ROUNDING * (l as f64 + 3.0) * sum;
                let bound = tail + rounding;
                best = best.min(bound);
                if bound <= rel_tol * sum {
                    return Ok(PositiveSum { value: sum, rel: bound / sum, terms: l + 1 });
                }
                if tail <= 1e-3 * rounding {
                    return Err(budget_error(l + 1, best, rel_tol * sum));
                }
            }
        }
    }
    Err(budget_error(budget, best, rel_tol * sum))
}

/// Heat trace `Z(s) = Σ m_l e^{−μ_l s}` of a compact space as a positive sum.
pub(crate) fn trace_sum(space: &ModelSpace, s: f64, rel_tol: f64) -> Result<PositiveSum> {
    let leaves = compact_leaves(space)?;
    let per = rel_tol / (2.0 * leaves.len() as f64);
    let mut acc: Option<PositiveSum> = None;
    for leaf in &leaves {
        let z = leaf_positive_sum(leaf, s, false, per)?;
        acc = Some(match acc {
            None => z,
            Some(a) => a.times(z),
        });
    }
    Ok(acc.expect("at least one leaf"))
}

/// `Σ m_l μ_l e^{−2 μ_l t}` over the full spectrum of a compact space.
///
/// For products this is `Σ_i S_i(t) Π_{j≠i} Z_j(2t)`, the merged-spectrum sum
/// expressed through the factors.
pub(crate) fn slope_sum(space: &ModelSpace, t: f64, rel_tol: f64) -> Result<PositiveSum> {
    let leaves = compact_leaves(space)?;
    let per = rel_tol / (2.0 * leaves.len() as f64);
    let traces: Vec<PositiveSum> =
        leaves.iter().map(|l| leaf_positive_sum(l, 2.0 * t, false, per)).collect::<Result<_>>()?;
    let mut total: Option<PositiveSum> = None;
    for (i, leaf) in leaves.iter().enumerate() {
        let mut term = leaf_positive_sum(leaf, 2.0 * t, true, per)?;
        for (j, z) in traces.iter().enumerate() {
            if i != j {
                term = term.times(*z);
            }
        }
        total = Some(match total {
            None => term,
            Some(a) => a.plus(term),
        });
    }
    Ok(total.expect("at least one leaf"))
}

/// Turns an absolute target into a relative one using a coarse first pass.
fn absolute_positive<F>(tol: f64, f: F) -> Result<Certified>
where
    F: Fn(f64) -> Result<PositiveSum>,
{
    let rough = f(1e-3)?;
    let upper = rough.value * (1.0 + rough.rel);
    let fine = f((tol / upper).min(1e-3))?;
    Ok(fine.certified(tol))
}

/// `Z(t) = Σ_l m_l e^{−μ_l t}` within absolute tolerance `tol`.
pub fn heat_trace(space: &ModelSpace, t: f64, tol: f64) -> Result<Certified> {
    check_time_tol(t, tol)?;
    if !space.is_compact() {
        return Err(Error::Unsupported { op: "heat_trace", space: space.to_string() });
    }
    absolute_positive(tol, |rel| trace_sum(space, t, rel))
}

fn gaussian(n: usize, d2: f64, t: f64) -> f64 {
    (4.0 * PI * t).powf(-0.5 * n as f64) * (-d2 / (4.0 * t)).exp()
}

/// Product `ab` of two certified factors within `tol`.
fn certified_product<FA, FB>(tol: f64, fa: FA, fb: FB) -> Result<Certified>
where
    FA: Fn(f64) -> Result<Certified>,
    FB: Fn(f64) -> Result<Certified>,
{
    let ra = fa(tol)?;
    let rb = fb(tol)?;
    let mut ua = ra.value.abs() + ra.cert.tail_bound;
    let mut ub = rb.value.abs() + rb.cert.tail_bound;
    for _ in 0..6 {
        let ta = (tol / (3.0 * ub)).min((tol / 3.0).sqrt());
        let tb = (tol / (3.0 * ua)).min((tol / 3.0).sqrt());
        let a = if ta >= tol { ra } else { fa(ta)? };
        let b = if tb >= tol { rb } else { fb(tb)? };
        let (ea, eb) = (a.cert.tail_bound, b.cert.tail_bound);
        let bound = a.value.abs() * eb + b.value.abs() * ea + ea * eb + ROUNDING * (a.value * b.value).abs();
        if bound <= tol {
            return Ok(Certified {
                value: a.value * b.value,
                cert: TruncationCertificate {
                    terms_used: a.cert.terms_used + b.cert.terms_used,
                    tail_bound: bound,
                    target_tol: tol,
                },
            });
        }
        ua *= 2.0;
        ub *= 2.0;
    }
    Err(budget_error(ra.cert.terms_used + rb.cert.terms_used, f64::INFINITY, tol))
}

fn cone_link_leaf(link: &ModelSpace) -> Leaf {
    match link {
        ModelSpace::Circle { radius } => Leaf { round: Round::Circle { radius: *radius }, dist: 1.0, measure: 1.0 },
        ModelSpace::Sphere { dim, radius } => {
            Leaf { round: Round::Sphere { dim: *dim, radius: *radius }, dist: 1.0, measure: 1.0 }
        }
        _ => unreachable!("cone links are validated at construction"),
    }
}

/// Bessel-series kernel of the Euclidean cone over a round link:
/// `(r₁r₂)^α Σ_j (2t)⁻¹ e^{−(r₁²+r₂²)/4t} I_{ν_j}(r₁r₂/2t) E_j(x₁, x₂)`
/// with `α = (2 − n)/2` and `ν_j = √(α² + μ_j)`.
///
/// Half the tolerance goes to the truncated tail and half is split over the
/// Bessel evaluations with weights `1/((j+1)(j+2))`.
fn cone_kernel(link: &Leaf, r1: f64, x1: &Point, r2: f64, x2: &Point, t: f64, tol: f64) -> Result<Certified> {
    let n = link.dim() + 1;
    let alpha = 0.5 * (2.0 - n as f64);
    let vol = link.volume();
    let log_pref = -(r1 * r1 + r2 * r2) / (4.0 * t) - (2.0 * t).ln();
    let nu = |j: usize| (alpha * alpha + link.mu(j)).sqrt();

    let rr = r1 * r2;
    if rr == 0.0 {
        // Only the constant level survives at the apex: (r₁r₂)^α I_{−α}(z) → (4t)^α / Γ(1 − α).
        let nu0 = nu(0);
        let value = (log_pref + alpha * (4.0 * t).ln() - log_gamma(1.0 + nu0)?).exp() / vol;
        return Ok(Certified::exact(value, tol));
    }

    let z = rr / (2.0 * t);
    if z > BESSEL_MAX_ARG {
        return Err(Error::Range {
            what: format!("cone Bessel argument r1 r2 / 2t = {z}"),
            supported: format!("r1 r2 / 2t ≤ {BESSEL_MAX_ARG}"),
        });
    }
    let log_half = (0.5 * z).ln();
    let log_rr = rr.ln();
    // log of (r₁r₂)^α (z/2)^{ν_j} (2t)⁻¹ e^{−(r₁²+r₂²)/4t}
    let log_level = |j: usize| log_pref + alpha * log_rr + nu(j) * log_half;
    // sup |E_j| on the link
    let sup_e = |j: usize| link.mult(j) / vol;

    let angle = link.round.angle(x1, x2);
    let budget = max_levels();
    let mut sum = 0.0;
    let mut abs_sum = 0.0;
    let mut bessel_err = 0.0;
    let mut max_bessel_terms = 0usize;
    let mut terms = 0usize;
    let mut best = f64::INFINITY;
    for (j, e) in link.addition_kernels(angle).enumerate() {
        let nu_j = nu(j);
        if nu_j > BESSEL_MAX_ORDER {
            return Err(Error::Range {
                what: format!("cone Bessel order {nu_j} at link level {j}"),
                supported: format!("orders ≤ {BESSEL_MAX_ORDER}"),
            });
        }
        let weight = 1.0 / ((j as f64 + 1.0) * (j as f64 + 2.0));
        let series = scaled_series(nu_j, z, log_level(j), 0.5 * tol * weight / sup_e(j))?;
        max_bessel_terms = max_bessel_terms.max(series.terms_used);
        terms += series.terms_used;
        sum += series.value * e;
        abs_sum += series.value * sup_e(j);
        bessel_err += series.tail_bound * sup_e(j);

        // Majorants b_k for k > j: Ĩ_ν(z) ≤ e^{(z/2)²/(ν+1)} / Γ(ν+1) with ν ≥ ν_{j+1}.
        let growth = 0.25 * z * z / (nu(j + 1) + 1.0);
        let majorant =
            |k: usize| -> Result<f64> { Ok((log_level(k) + sup_e(k).ln() + growth - log_gamma(nu(k) + 1.0)?).exp()) };
        if let Some(tail) = geometric_tail(majorant(j + 1)?, majorant(j + 2)?) {
            let rounding = 2.0 * ROUNDING * (j as f64 + 3.0 + max_bessel_terms as f64) * abs_sum;
            let bound = tail + bessel_err + rounding;
            best = best.min(bound);
            if bound <= tol {
                return Ok(Certified {
                    value: sum,
                    cert: TruncationCertificate { terms_used: terms, tail_bound: bound, target_tol: tol },
                });
            }
            if tail <= 1e-3 * rounding {
                break;
            }
        }
        if j + 1 >= budget {
            break;
        }
    }
    Err(budget_error(terms, best, tol))
}

/// `ρ(x, y, t)` within absolute tolerance `tol`.
pub fn evaluate(space: &ModelSpace, x: &Point, y: &Point, t: f64, tol: f64) -> Result<KernelValue> {
    check_time_tol(t, tol)?;
    space.check_point(x)?;
    space.check_point(y)?;
    evaluate_unchecked(space, x, y, t, tol)
}

fn evaluate_unchecked(space: &ModelSpace, x: &Point, y: &Point, t: f64, tol: f64) -> Result<KernelValue> {
    match (space, x, y) {
        (ModelSpace::Circle { .. } | ModelSpace::Sphere { .. }, _, _) => {
            let leaf = compact_leaves(space)?[0];
            leaf_kernel(&leaf, leaf.round.angle(x, y), t, tol)
        }
        (ModelSpace::Euclidean { dim }, Point::Coords(u), Point::Coords(v)) => {
            let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(Certified::exact(gaussian(*dim, d2, t), tol))
        }
        (ModelSpace::HalfSpace { dim }, Point::Coords(u), Point::Coords(v)) => {
            // Neumann condition: image source across {x_n = 0} with a + sign.
            let tangential: f64 = u[..dim - 1].iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            let (a, b) = (u[dim - 1], v[dim - 1]);
            let direct = gaussian(*dim, tangential + (a - b) * (a - b), t);
            let image = gaussian(*dim, tangential + (a + b) * (a + b), t);
            Ok(Certified::exact(direct + image, tol))
        }
        (ModelSpace::Product(a, b), Point::Pair(x1, x2), Point::Pair(y1, y2)) => certified_product(
            tol,
            |ta| evaluate_unchecked(a, x1, y1, t, ta),
            |tb| evaluate_unchecked(b, x2, y2, t, tb),
        ),
        (ModelSpace::Cone(link), Point::Cone { radius: r1, link: p1 }, Point::Cone { radius: r2, link: p2 }) => {
            cone_kernel(&cone_link_leaf(link), *r1, p1, *r2, p2, t, tol)
        }
        (ModelSpace::Rescaled { base, distance, measure }, _, _) => {
            let inner = evaluate_unchecked(base, x, y, t / (distance * distance), tol * measure)?;
            Ok(Certified {
                value: inner.value / measure,
                cert: TruncationCertificate {
                    tail_bound: inner.cert.tail_bound / measure,
                    target_tol: tol,
                    ..inner.cert
                },
            })
        }
        _ => unreachable!("points are checked before dispatch"),
    }
}

/// On-diagonal value `ρ(p, p, t)`.
///
/// Compact factors are homogeneous, so their diagonal is `Z(t)/vol`. The cone
/// over a unit sphere or unit circle is flat, with diagonal `(4πt)^{-n/2}`;
/// other cones and half-spaces are evaluated at `p`.
pub fn diagonal(space: &ModelSpace, p: &Point, t: f64) -> Result<f64> {
    check_time_tol(t, 1.0)?;
    space.check_point(p)?;
    diagonal_unchecked(space, p, t)
}

fn diagonal_unchecked(space: &ModelSpace, p: &Point, t: f64) -> Result<f64> {
    match (space, p) {
        (ModelSpace::Circle { .. } | ModelSpace::Sphere { .. }, _) => {
            let leaf = compact_leaves(space)?[0];
            Ok(leaf_positive_sum(&leaf, t, false, TIGHT_REL)?.value / leaf.volume())
        }
        (ModelSpace::Euclidean { dim }, _) => Ok(gaussian(*dim, 0.0, t)),
        (ModelSpace::HalfSpace { .. }, _) => Ok(evaluate_unchecked(space, p, p, t, f64::MIN_POSITIVE)?.value),
        (ModelSpace::Cone(link), _) => {
            let n = link.dim() + 1;
            let unit_link = match **link {
                ModelSpace::Circle { radius } => radius == 1.0,
                _ => true,
            };
            if unit_link {
                Ok(gaussian(n, 0.0, t))
            } else {
                let scale = gaussian(n, 0.0, t);
                Ok(evaluate_unchecked(space, p, p, t, TIGHT_REL * scale)?.value)
            }
        }
        (ModelSpace::Product(a, b), Point::Pair(x, y)) => Ok(diagonal_unchecked(a, x, t)? * diagonal_unchecked(b, y, t)?),
        (ModelSpace::Rescaled { base, distance, measure }, _) => {
            Ok(diagonal_unchecked(base, p, t / (distance * distance))? / measure)
        }
        _ => unreachable!("points are checked before dispatch"),
    }
}

/// `ρ_t = Z(t)/vol` of a compact space, with a relative error bound.
pub(crate) fn compact_diagonal(space: &ModelSpace, t: f64, rel_tol: f64) -> Result<PositiveSum> {
    let vol = crate::model_spaces::volume(space)?;
    Ok(trace_sum(space, t, rel_tol)?.scale(1.0 / vol))
}
