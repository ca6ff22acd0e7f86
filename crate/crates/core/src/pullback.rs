//! Pullback metrics `g_t` of the heat-kernel map, the normalization `c(t)`,
//! and isometric-immersion checks.
//!
//! Every space handled here has a constant on-diagonal kernel, so `g_t` is a
//! constant multiple of `g` on each irreducible factor. A factor `i` carries
//! its own `ρ_{2t}^{(i)}` and `λ_i(t)`; on a product the block of factor `i`
//! is `λ_i(t) Π_{j≠i} ρ_{2t}^{(j)}`.
//!
//! On a round factor `λ(t) = S(t)/(n·vol)` with `S(t) = Σ_l m_l μ_l e^{−2μ_l t}`;
//! on `ℝⁿ` it is `c₁ t^{−(n+2)/2}` with `c₁ = (4(8π)^{n/2})⁻¹`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heat_kernel::{compact_diagonal, leaf_positive_sum, slope_sum, Certified, TruncationCertificate};
use crate::model_spaces::{compact_leaves, eigenspace_sum, single_leaf, volume, ModelSpace, Point, Round};
use crate::specfun::gegenbauer_at_one;

/// Default IHKI threshold on the normalized deviation.
pub const DEFAULT_THRESHOLD: f64 = 1e-8;

/// Default number of points of a log-spaced time grid.
pub const DEFAULT_GRID_POINTS: usize = 33;

/// Relative accuracy of the factor sums behind `g_t`.
const FACTOR_REL: f64 = 1e-12;

/// `c₁ = (4(8π)^{n/2})⁻¹`, the constant in `g_t = c₁ t^{−(n+2)/2} g` on `ℝⁿ`.
pub fn flat_constant(n: usize) -> f64 {
    1.0 / (4.0 * (8.0 * PI).powf(0.5 * n as f64))
}

/// `λ(t)` with `g_t = λ(t) g` on `ℝⁿ`.
pub fn flat_pullback_scalar(n: usize, t: f64) -> f64 {
    flat_constant(n) * t.powf(-0.5 * (n as f64 + 2.0))
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite and > 0, got {t}")));
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
    }
    Ok(())
}

/// Own quantities of one irreducible factor.
#[derive(Debug, Clone, Copy)]
struct Factor {
    dim: usize,
    diag2t: f64,
    lambda: f64,
    rel: f64,
    terms: usize,
}

fn flat_factor(n: usize, t: f64) -> Factor {
    Factor { dim: n, diag2t: (8.0 * PI * t).powf(-0.5 * n as f64), lambda: flat_pullback_scalar(n, t), rel: 0.0, terms: 1 }
}

fn factors(space: &ModelSpace, t: f64, rel: f64) -> Result<Vec<Factor>> {
    match space {
        ModelSpace::Circle { .. } | ModelSpace::Sphere { .. } => {
            let leaf = compact_leaves(space)?[0];
            let vol = leaf.volume();
            let z = leaf_positive_sum(&leaf, 2.0 * t, false, 0.5 * rel)?;
            let s = leaf_positive_sum(&leaf, 2.0 * t, true, 0.5 * rel)?;
            Ok(vec![Factor {
                dim: leaf.dim(),
                diag2t: z.value / vol,
                lambda: s.value / (leaf.dim() as f64 * vol),
                rel: z.rel.max(s.rel),
                terms: z.terms + s.terms,
            }])
        }
        ModelSpace::Euclidean { dim } => Ok(vec![flat_factor(*dim, t)]),
        ModelSpace::Cone(link) => match **link {
            ModelSpace::Circle { radius } if radius != 1.0 => Err(Error::HypothesisViolated(format!(
                "{space} has a non-constant diagonal ρ_2t; the product formula for g_t needs a constant one"
            ))),
            _ => Ok(vec![flat_factor(space.dim(), t)]),
        },
        ModelSpace::HalfSpace { .. } => Err(Error::HypothesisViolated(format!(
            "{space} has a non-constant diagonal ρ_2t; the product formula for g_t needs a constant one"
        ))),
        ModelSpace::Product(a, b) => {
            let mut out = factors(a, t, rel)?;
            out.extend(factors(b, t, rel)?);
            Ok(out)
        }
        ModelSpace::Rescaled { base, distance, measure } => {
            let a2 = distance * distance;
            let mut out = factors(base, t / a2, rel)?;
            for f in out.iter_mut() {
                f.lambda /= a2;
            }
            // The measure factor rides on the first factor, as in the kernel.
            out[0].diag2t /= measure;
            out[0].lambda /= measure;
            Ok(out)
        }
    }
}

/// One diagonal block of `g_t` relative to `g`: `value · I_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorBlock {
    pub dim: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PullbackForm {
    /// `g_t = λ g`.
    Scalar(f64),
    /// Block-diagonal in the product frame, one block per irreducible factor.
    Blocks(Vec<FactorBlock>),
}

impl PullbackForm {
    /// Dense symmetric matrix of `g_t` in the orthonormal frame of `g`.
    pub fn matrix(&self, dim: usize) -> Vec<Vec<f64>> {
        let diag: Vec<f64> = match self {
            PullbackForm::Scalar(l) => vec![*l; dim],
            PullbackForm::Blocks(bs) => bs.iter().flat_map(|b| std::iter::repeat_n(b.value, b.dim)).collect(),
        };
        (0..diag.len())
            .map(|i| (0..diag.len()).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
            .collect()
    }

    fn blocks(&self, dim: usize) -> Vec<FactorBlock> {
        match self {
            PullbackForm::Scalar(l) => vec![FactorBlock { dim, value: *l }],
            PullbackForm::Blocks(bs) => bs.clone(),
        }
    }

    /// `|c g_t − g|_HS / √n`.
    pub fn deviation(&self, dim: usize, c: f64) -> f64 {
        let ss: f64 = self.blocks(dim).iter().map(|b| b.dim as f64 * (c * b.value - 1.0).powi(2)).sum();
        (ss / dim as f64).sqrt()
    }

    /// The `c` making `c g_t` trace-normalized: `n / tr g_t`.
    pub fn trace_normalization(&self, dim: usize) -> f64 {
        let trace: f64 = self.blocks(dim).iter().map(|b| b.dim as f64 * b.value).sum();
        dim as f64 / trace
    }
}

/// `g_t` at one point, relative to `g`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PullbackSample {
    pub t: f64,
    pub point: Point,
    pub form: PullbackForm,
    /// Relative error bound on every entry.
    pub rel_error: f64,
}

fn blocks_at(space: &ModelSpace, t: f64, rel: f64) -> Result<(Vec<FactorBlock>, f64, usize)> {
    let fs = factors(space, t, rel)?;
    let mut worst = 0.0f64;
    let blocks = fs
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let others: f64 = fs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, g)| g.diag2t).product();
            let r: f64 = fs.iter().map(|g| g.rel).sum::<f64>() + f64::EPSILON * fs.len() as f64;
            worst = worst.max(r);
            FactorBlock { dim: f.dim, value: f.lambda * others }
        })
        .collect();
    Ok((blocks, worst, fs.iter().map(|f| f.terms).sum()))
}

/// `g_t` at `point` as factor blocks `λ_i(t) Π_{j≠i} ρ_{2t}^{(j)}`.
///
/// Fails with [`Error::HypothesisViolated`] when a factor's diagonal
/// `ρ_{2t}` is not constant (half-spaces, cones over short circles).
pub fn pullback_matrix(space: &ModelSpace, t: f64, point: &Point, tol: f64) -> Result<PullbackSample> {
    check_time(t)?;
    check_tol(tol)?;
    space.check_point(point)?;
    let (blocks, rel, _) = blocks_at(space, t, tol.min(FACTOR_REL))?;
    Ok(PullbackSample { t, point: point.clone(), form: PullbackForm::Blocks(blocks), rel_error: rel })
}

/// `λ(t)` with `g_t = λ(t) g` on a homogeneous space, within relative
/// tolerance `tol`.
pub fn pullback_scalar(space: &ModelSpace, t: f64, tol: f64) -> Result<Certified> {
    check_time(t)?;
    check_tol(tol)?;
    let unsupported = || Error::Unsupported { op: "pullback_scalar", space: space.to_string() };
    let (blocks, rel, terms) = blocks_at(space, t, tol.min(FACTOR_REL)).map_err(|e| match e {
        Error::HypothesisViolated(_) => unsupported(),
        e => e,
    })?;
    let first = blocks[0].value;
    if blocks.iter().any(|b| (b.value - first).abs() > 1e-10 * first) {
        return Err(unsupported());
    }
    Ok(Certified { value: first, cert: TruncationCertificate { terms_used: terms, tail_bound: rel * first, target_tol: tol * first } })
}

/// `c(t) = n·vol / Σ_l m_l μ_l e^{−2μ_l t}` on a compact space, within
/// relative tolerance `tol`.
pub fn c_of_t(space: &ModelSpace, t: f64, tol: f64) -> Result<Certified> {
    check_time(t)?;
    check_tol(tol)?;
    let vol = volume(space)?;
    let s = slope_sum(space, t, tol.min(0.5))?;
    let value = space.dim() as f64 * vol / s.value;
    let rel = s.rel / (1.0 - s.rel) + f64::EPSILON;
    Ok(Certified {
        value,
        cert: TruncationCertificate { terms_used: s.terms, tail_bound: rel * value, target_tol: tol * value },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "IHKI-consistent")]
    IhkiConsistent,
    #[serde(rename = "single-time-only")]
    SingleTimeOnly,
    #[serde(rename = "fails")]
    Fails,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::IhkiConsistent => "IHKI-consistent",
            Verdict::SingleTimeOnly => "single-time-only",
            Verdict::Fails => "fails",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub t: f64,
    pub point: Point,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImmersionReport {
    pub t_grid: Vec<f64>,
    pub c_values: Vec<f64>,
    /// `|c(t) g_t − g|_HS / √n` at each grid time.
    pub deviations: Vec<f64>,
    pub sup_deviation: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    /// Largest deviation on the grid when some time fails.
    pub witness: Option<Witness>,
}

/// `n` log-spaced times from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
        }
    }
}

/// Samples `c(t) g_t − g` over `t_grid`, with `c(t) = n / tr g_t`.
///
/// Because every supported space is homogeneous factor by factor, `g_t`
/// relative to `g` does not depend on the point; the report uses the base
/// point as the sample point.
pub fn ihki_check(space: &ModelSpace, t_grid: &[f64], threshold: f64) -> Result<ImmersionReport> {
    if t_grid.is_empty() {
        return Err(Error::Domain("t_grid must be nonempty".into()));
    }
    if t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain("t_grid must be strictly ascending".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Domain(format!("threshold must be > 0, got {threshold}")));
    }
    let n = space.dim();
    let rows: Vec<(f64, f64)> = t_grid
        .par_iter()
        .map(|&t| {
            check_time(t)?;
            let (blocks, _, _) = blocks_at(space, t, FACTOR_REL)?;
            let form = PullbackForm::Blocks(blocks);
            let c = form.trace_normalization(n);
            Ok((c, form.deviation(n, c)))
        })
        .collect::<Result<_>>()?;
    let (c_values, deviations): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let passing = deviations.iter().filter(|&&d| d <= threshold).count();
    let verdict = match passing {
        p if p == deviations.len() => Verdict::IhkiConsistent,
        0 => Verdict::Fails,
        _ => Verdict::SingleTimeOnly,
    };
    let (worst, sup_deviation) =
        deviations.iter().copied().enumerate().fold((0, 0.0f64), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    let witness = (verdict != Verdict::IhkiConsistent).then(|| Witness {
        t: t_grid[worst],
        point: space.base_point(),
        deviation: sup_deviation,
    });
    Ok(ImmersionReport { t_grid: t_grid.to_vec(), c_values, deviations, sup_deviation, threshold, verdict, witness })
}

/// Relative gap `|ρ_A^{dim B} − ρ_B^{dim A}| / max` between the diagonals of two
/// compact spaces at time `t`. It vanishes whenever `A × B` is IHKI.
pub fn diagonal_power_defect(a: &ModelSpace, b: &ModelSpace, t: f64) -> Result<f64> {
    check_time(t)?;
    let da = compact_diagonal(a, t, FACTOR_REL)?.value;
    let db = compact_diagonal(b, t, FACTOR_REL)?.value;
    // Compare in log space; the powers overflow for small t.
    let la = b.dim() as f64 * da.ln();
    let lb = a.dim() as f64 * db.ln();
    Ok(-(-(la - lb).abs()).exp_m1())
}

/// `t / (c(t) ρ_{2t})` on a compact space.
pub fn decay_ratio(space: &ModelSpace, t: f64) -> Result<f64> {
    check_time(t)?;
    let c = c_of_t(space, t, FACTOR_REL)?.value;
    let rho = compact_diagonal(space, 2.0 * t, FACTOR_REL)?.value;
    Ok(t / (c * rho))
}

/// Defect `|(ρ_{2(t+h)} − ρ_{2(t−h)})/2h + 2n/c(t)|` of the trace-derivative
/// identity. Central differences leave an `O(h²)` error.
pub fn trace_derivative_check(space: &ModelSpace, t: f64, h: f64) -> Result<f64> {
    check_time(t)?;
    if !(h > 0.0 && h < t) {
        return Err(Error::Domain(format!("step must satisfy 0 < h < t, got h = {h}, t = {t}")));
    }
    let rho = |s: f64| compact_diagonal(space, 2.0 * s, FACTOR_REL).map(|p| p.value);
    let derivative = (rho(t + h)? - rho(t - h)?) / (2.0 * h);
    let c = c_of_t(space, t, FACTOR_REL)?.value;
    Ok((derivative + 2.0 * space.dim() as f64 / c).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenspaceImmersion {
    pub level: usize,
    pub multiplicity: u64,
    /// `μ_l`, the factor in `n Φ*g_{ℝ^m} = λ g`.
    pub lambda: f64,
    /// `sup |‖Φ(x)‖² − 1|` over the sample points.
    pub on_sphere_deviation: f64,
    /// `|n Φ*g − μ_l g|` in operator norm.
    pub metric_deviation: f64,
}

/// Deterministic sample points of a circle or round sphere (or a rescaling).
pub fn sample_points(space: &ModelSpace, count: usize) -> Vec<Point> {
    match space {
        ModelSpace::Circle { .. } => (0..count).map(|i| Point::Angle(2.0 * PI * i as f64 / count as f64 + 0.1)).collect(),
        ModelSpace::Sphere { dim, radius } => (0..count)
            .map(|i| {
                let v: Vec<f64> = (0..=*dim).map(|k| ((i * (k + 1)) as f64 * 0.7 + k as f64 + 0.3).sin()).collect();
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                Point::Ambient(v.iter().map(|c| c * radius / norm).collect())
            })
            .collect(),
        ModelSpace::Rescaled { base, .. } => sample_points(base, count),
        ModelSpace::Product(a, b) => {
            sample_points(a, count).into_iter().zip(sample_points(b, count)).map(|(x, y)| Point::pair(x, y)).collect()
        }
        other => vec![other.base_point(); count],
    }
}

/// The Takahashi map `Φ = √(vol/m_l)(φ₁, …, φ_{m_l})` of level `l`.
///
/// `‖Φ(x)‖²` is read off the addition kernel on the diagonal. The metric
/// uses the derivative of the normalized addition kernel at coincidence:
/// `Σ_level dφ_i ⊗ dφ_i = (m_l/vol) P_l'(1) R⁻² g` with `P_l'(1) = l²` on a
/// circle and `2λ C_{l−1}^{λ+1}(1)/C_l^λ(1)` on a sphere of radius `R`.
pub fn eigenspace_immersion(space: &ModelSpace, level: usize) -> Result<EigenspaceImmersion> {
    if level == 0 {
        return Err(Error::Domain("eigenspace immersions need level ≥ 1".into()));
    }
    let leaf = single_leaf(space, "eigenspace_immersion")?;
    let n = leaf.dim() as f64;
    let m = leaf.mult(level);
    let vol = leaf.volume();
    let radius = leaf.round.radius() * leaf.dist;
    let mut on_sphere = 0.0f64;
    for x in sample_points(space, 16) {
        let norm2 = vol / m * eigenspace_sum(space, level, &x, &x)?;
        on_sphere = on_sphere.max((norm2 - 1.0).abs());
    }
    let slope_at_one = match leaf.round {
        Round::Circle { .. } => (level * level) as f64,
        Round::Sphere { dim, .. } => {
            let lam = 0.5 * (dim as f64 - 1.0);
            2.0 * lam * gegenbauer_at_one(level - 1, lam + 1.0)? / gegenbauer_at_one(level, lam)?
        }
    };
    let mu = leaf.mu(level);
    let pulled = n * slope_at_one / (radius * radius);
    Ok(EigenspaceImmersion {
        level,
        multiplicity: leaf.round.multiplicity(level),
        lambda: mu,
        on_sphere_deviation: on_sphere,
        metric_deviation: (pulled - mu).abs(),
    })
}

/// Relative defect of `Σ_level |dφ_i(v)|² = μ_l m_l/(n·vol)` for a unit
/// vector `v`, using a central second difference of the addition kernel
/// along a geodesic with arc step `step·R`.
pub fn takahashi_defect(space: &ModelSpace, level: usize, step: f64) -> Result<f64> {
    let leaf = single_leaf(space, "takahashi_defect")?;
    let radius = leaf.round.radius() * leaf.dist;
    let x = space.base_point();
    let y = match (&x, leaf.round) {
        (Point::Angle(a), _) => Point::Angle(a + step),
        (Point::Ambient(v), Round::Sphere { radius: r, .. }) => {
            let mut w = vec![0.0; v.len()];
            w[0] = r * step.sin();
            w[v.len() - 1] = r * step.cos();
            Point::Ambient(w)
        }
        _ => unreachable!("single leaves are circles or spheres"),
    };
    let e0 = eigenspace_sum(space, level, &x, &x)?;
    let eh = eigenspace_sum(space, level, &x, &y)?;
    let arc = step * radius;
    let fd = 2.0 * (e0 - eh) / (arc * arc);
    let exact = leaf.mu(level) * leaf.mult(level) / (leaf.dim() as f64 * leaf.volume());
    Ok((fd - exact).abs() / exact)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticFit {
    pub constant: f64,
    pub slope: f64,
    pub times: Vec<f64>,
    /// `F(t) = 4(8π)^{n/2} t^{(n+2)/2} λ(t)` at each time.
    pub values: Vec<f64>,
}

/// Least-squares line through `F(t) = 4(8π)^{n/2} t^{(n+2)/2} λ(t)` at
/// `fit_points` equally spaced times in `[lo, hi]`.
pub fn small_t_asymptotics(space: &ModelSpace, window: (f64, f64), fit_points: usize) -> Result<AsymptoticFit> {
    let (lo, hi) = window;
    if fit_points < 4 {
        return Err(Error::Domain(format!("need at least 4 fit points, got {fit_points}")));
    }
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::Domain(format!("bad time window [{lo}, {hi}]")));
    }
    let n = space.dim();
    let times: Vec<f64> = (0..fit_points).map(|i| lo + (hi - lo) * i as f64 / (fit_points - 1) as f64).collect();
    let values: Vec<f64> = times
        .par_iter()
        .map(|&t| Ok(pullback_scalar(space, t, FACTOR_REL)?.value / flat_pullback_scalar(n, t)))
        .collect::<Result<_>>()?;
    let (constant, slope) = linear_fit(&times, &values);
    Ok(AsymptoticFit { constant, slope, times, values })
}

/// Ordinary least squares `y ≈ a + b x`, returning `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}
