//! Scripted reproductions: the single-time immersion of `S¹(r) × S²(s)`, the
//! torus/sphere heat-trace table, and the scenario runner behind the CLI.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::constructions::{halfspace_gt_normal, halfspace_gt_normal_quadrature};
use crate::error::{Error, Result};
use crate::heat_kernel::{compact_diagonal, evaluate, max_levels};
use crate::model_spaces::{single_leaf, ModelSpace, Point};
use crate::pullback::{
    c_of_t, diagonal_power_defect, eigenspace_immersion, flat_constant, ihki_check, log_grid, pullback_matrix,
    pullback_scalar, small_t_asymptotics, takahashi_defect, trace_derivative_check, PullbackForm, Verdict,
    DEFAULT_GRID_POINTS, DEFAULT_THRESHOLD,
};
use crate::quadrature::{integrate_circle, integrate_panels};
use crate::TruncationCertificate;

/// Names accepted by [`run_scenario`].
pub const SCENARIOS: [&str; 10] = [
    "ihki-sphere",
    "ihki-product",
    "example-4-5",
    "cone-flatness",
    "asymptotics",
    "trace-identity",
    "takahashi",
    "halfspace",
    "theta-table",
    "s1xr",
];

/// Probe multipliers for the diagonal-power witness search.
const PROBES: [f64; 4] = [0.25, 0.5, 2.0, 4.0];

/// Times at which `S¹(r) × S²(s)` is checked after calibration.
pub const EXAMPLE_GRID: [f64; 3] = [0.5, 1.0, 2.0];

const SCAN_POINTS: usize = 64;

/// Sum of a positive series `Σ_{l≥first} term(l)` whose terms eventually
/// decay geometrically; stops once the geometric tail is below `1e-17` of the sum.
fn positive_series(first: usize, term: impl Fn(usize) -> f64) -> Result<f64> {
    let mut sum = 0.0;
    for l in first..first + max_levels() {
        sum += term(l);
        let (b1, b2) = (term(l + 1), term(l + 2));
        if b1 == 0.0 || (b2 < b1 && b1 / (1.0 - b2 / b1) <= 1e-17 * sum) {
            return Ok(sum);
        }
    }
    Err(Error::BudgetExceeded {
        best: TruncationCertificate { terms_used: max_levels(), tail_bound: f64::INFINITY, target_tol: 1e-17 * sum },
    })
}

/// `ln(c(t) ρ_{2t}) = ln(n Z(2t) / S(t))` on a circle or round sphere.
///
/// Both sums are shifted by the first nonzero eigenvalue, so the value stays
/// finite when `e^{−2μ₁t}` underflows.
pub fn log_c_rho(space: &ModelSpace, t: f64) -> Result<f64> {
    let leaf = single_leaf(space, "log_c_rho")?;
    let mu1 = leaf.mu(1);
    let z_rest = positive_series(1, |l| leaf.mult(l) * (-2.0 * leaf.mu(l) * t).exp())?;
    let s_shift = positive_series(1, |l| leaf.mult(l) * leaf.mu(l) * (-2.0 * (leaf.mu(l) - mu1) * t).exp())?;
    Ok((leaf.dim() as f64).ln() + z_rest.ln_1p() + 2.0 * mu1 * t - s_shift.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleTimeResult {
    pub r: f64,
    /// Calibrated radius of the 2-sphere.
    pub s: f64,
    /// `c^{S¹(r)}(1) ρ^{S¹(r)}_2`, the calibration target.
    pub target: f64,
    /// `|G(s)| / target`.
    pub calibration_residual: f64,
    pub t_star: f64,
    /// `|c g_1 − g|_HS / √3` on the product with `c = (ρ^{S¹(r)}_2 λ_{S²(s)}(1))⁻¹`.
    pub product_deviation_at_t_star: f64,
    pub witness_t: f64,
    /// Relative gap between `ρ^{S²(s)}_t` and `(ρ^{S¹(r)}_t)²` at `witness_t`.
    pub witness_defect: f64,
    /// `(t, defect)` at every probed time.
    pub probes: Vec<(f64, f64)>,
    /// The same defect for `S²(1) × S²(1)`, maximized over the probes.
    pub control_defect: f64,
    pub verdict_at_t_star: Verdict,
    /// Verdict over [`EXAMPLE_GRID`].
    pub verdict: Verdict,
    pub deviations: Vec<f64>,
}

/// Finds `s` with `c^{S²(s)}(1) ρ^{S²(s)}_2 = c^{S¹(r)}(1) ρ^{S¹(r)}_2`: a scan over
/// 64 log-spaced radii in `[r/10, 10r]` brackets a sign change, then bisection
/// runs until the relative residual is at most `tol` or the bracket collapses.
///
/// Returns `(s, residual, target)`.
pub fn calibrate(r: f64, tol: f64) -> Result<(f64, f64, f64)> {
    let log_target = log_c_rho(&ModelSpace::circle(r)?, 1.0)?;
    let g = |s: f64| -> Result<f64> { Ok(log_c_rho(&ModelSpace::sphere(2, s)?, 1.0)? - log_target) };
    let radii = log_grid(0.1 * r, 10.0 * r, SCAN_POINTS);
    let values: Vec<f64> = radii.iter().map(|&s| g(s)).collect::<Result<_>>()?;
    let bracket = values.windows(2).position(|w| w[0].signum() != w[1].signum() || w[0] == 0.0);
    let Some(i) = bracket else {
        return Err(Error::CalibrationFailed {
            scan: radii.iter().zip(&values).map(|(&s, &v)| (s, v.exp_m1())).collect(),
        });
    };
    let (mut lo, mut hi) = (radii[i], radii[i + 1]);
    let (mut g_lo, mut g_hi) = (values[i], values[i + 1]);
    loop {
        let (s, gs) = if g_lo.abs() <= g_hi.abs() { (lo, g_lo) } else { (hi, g_hi) };
        let residual = gs.exp_m1().abs();
        if residual <= tol || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok((s, residual, log_target.exp()));
        }
        let mid = 0.5 * (lo + hi);
        let gm = g(mid)?;
        if gm == 0.0 {
            return Ok((mid, 0.0, log_target.exp()));
        }
        if gm.signum() == g_lo.signum() {
            (lo, g_lo) = (mid, gm);
        } else {
            (hi, g_hi) = (mid, gm);
        }
    }
}

/// Calibrates `S¹(r) × S²(s)` to be isometrically immersed at `t = 1`, then
/// checks it over [`EXAMPLE_GRID`] and searches the probe times
/// `{¼, ½, 2, 4}·r² ∪ {¼, ½, 2, 4}` for a gap in `ρ^{S²(s)}_t = (ρ^{S¹(r)}_t)²`.
pub fn single_time_example(r: f64, tol: f64) -> Result<SingleTimeResult> {
    if !(r > 0.0 && r <= 0.8) {
        return Err(Error::Domain(format!("r must lie in (0, 0.8], got {r}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
    }
    let (s, residual, target) = calibrate(r, tol)?;
    let circle = ModelSpace::circle(r)?;
    let sphere = ModelSpace::sphere(2, s)?;
    let product = ModelSpace::product(circle.clone(), sphere.clone())?;
    let t_star = 1.0;

    let rho_circle = compact_diagonal(&circle, 2.0 * t_star, 1e-13)?.value;
    let lambda_sphere = pullback_scalar(&sphere, t_star, 1e-13)?.value;
    let c = 1.0 / (rho_circle * lambda_sphere);
    let sample = pullback_matrix(&product, t_star, &product.base_point(), 1e-13)?;
    let product_deviation = sample.form.deviation(product.dim(), c);

    let times: Vec<f64> = PROBES.iter().map(|p| p * r * r).chain(PROBES).collect();
    let probes: Vec<(f64, f64)> =
        times.par_iter().map(|&t| Ok((t, diagonal_power_defect(&circle, &sphere, t)?))).collect::<Result<_>>()?;
    let (witness_t, witness_defect) = probes.iter().copied().fold((times[0], -1.0), |a, b| if b.1 > a.1 { b } else { a });
    let unit = ModelSpace::sphere(2, 1.0)?;
    let control_defect =
        times.iter().map(|&t| diagonal_power_defect(&unit, &unit, t)).collect::<Result<Vec<f64>>>()?.into_iter().fold(0.0, f64::max);

    let at_star = ihki_check(&product, &[t_star], DEFAULT_THRESHOLD)?;
    let full = ihki_check(&product, &EXAMPLE_GRID, DEFAULT_THRESHOLD)?;
    Ok(SingleTimeResult {
        r,
        s,
        target,
        calibration_residual: residual,
        t_star,
        product_deviation_at_t_star: product_deviation,
        witness_t,
        witness_defect,
        probes,
        control_defect,
        verdict_at_t_star: at_star.verdict,
        verdict: full.verdict,
        deviations: full.deviations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaRow {
    pub t: f64,
    /// `u = t/r²`.
    pub u: f64,
    /// `Σ_{μ>0} e^{−μt}` on `S¹(r) × S¹(r)`.
    pub torus_sum: f64,
    /// `Σ_{μ>0} e^{−μt}` on `S²(r)`.
    pub sphere_sum: f64,
    pub torus_scaled: f64,
    pub sphere_scaled: f64,
    /// `Z(t)/vol` on the torus.
    pub torus_diagonal: f64,
    /// `Z(t)/vol` on `S²(r)`.
    pub sphere_diagonal: f64,
    /// `Σ_{μ>0} e^{−μt}` on `S²(√π r)`, which has the torus's area.
    pub matched_sphere_sum: f64,
}

fn nonzero_trace(space: &ModelSpace, t: f64) -> Result<f64> {
    let leaf = single_leaf(space, "nonzero_trace")?;
    positive_series(1, |l| leaf.mult(l) * (-leaf.mu(l) * t).exp())
}

/// Nonzero-eigenvalue heat traces of the torus `S¹(r) × S¹(r)` and the sphere
/// `S²(r)`, raw and multiplied by `e^{2t/r²}`.
pub fn torus_vs_sphere_theta(r: f64, t_list: &[f64]) -> Result<Vec<ThetaRow>> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("radius must be > 0, got {r}")));
    }
    let circle = ModelSpace::circle(r)?;
    let sphere = ModelSpace::sphere(2, r)?;
    let matched = ModelSpace::sphere(2, PI.sqrt() * r)?;
    t_list
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(Error::Domain(format!("time must be > 0, got {t}")));
            }
            let u = t / (r * r);
            let a = nonzero_trace(&circle, t)?;
            let torus_sum = 2.0 * a + a * a;
            let sphere_sum = nonzero_trace(&sphere, t)?;
            let scale = (2.0 * u).exp();
            Ok(ThetaRow {
                t,
                u,
                torus_sum,
                sphere_sum,
                torus_scaled: scale * torus_sum,
                sphere_scaled: scale * sphere_sum,
                torus_diagonal: (1.0 + torus_sum) / (2.0 * PI * r).powi(2),
                sphere_diagonal: (1.0 + sphere_sum) / (4.0 * PI * r * r),
                matched_sphere_sum: nonzero_trace(&matched, t)?,
            })
        })
        .collect()
}

/// Time grid: `lo:hi:n` (log-spaced), `lo:hi:n:lin`, or a comma list.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeGrid {
    Log { lo: f64, hi: f64, n: usize },
    Linear { lo: f64, hi: f64, n: usize },
    List(Vec<f64>),
}

impl TimeGrid {
    pub fn points(&self) -> Vec<f64> {
        match self {
            TimeGrid::Log { lo, hi, n } => log_grid(*lo, *hi, *n),
            TimeGrid::Linear { lo, hi, n } => match n {
                0 => vec![],
                1 => vec![*lo],
                _ => (0..*n).map(|i| lo + (hi - lo) * i as f64 / (*n - 1) as f64).collect(),
            },
            TimeGrid::List(v) => v.clone(),
        }
    }

    fn bounds(&self) -> (f64, f64, usize) {
        let p = self.points();
        (p[0], p[p.len() - 1], p.len())
    }
}

impl FromStr for TimeGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse { pos: 0, msg: format!("grid `{s}`: {msg}") };
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad("bad number"));
        let grid = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            if !(3..=4).contains(&parts.len()) {
                return Err(bad("expected lo:hi:n or lo:hi:n:lin"));
            }
            let (lo, hi) = (num(parts[0])?, num(parts[1])?);
            let n: usize = parts[2].trim().parse().map_err(|_| bad("bad point count"))?;
            if n == 0 || !(lo > 0.0) || !(hi >= lo) {
                return Err(bad("need 0 < lo ≤ hi and n ≥ 1"));
            }
            match parts.get(3).map(|m| m.trim()) {
                None | Some("log") => TimeGrid::Log { lo, hi, n },
                Some("lin") => TimeGrid::Linear { lo, hi, n },
                Some(_) => return Err(bad("spacing must be `log` or `lin`")),
            }
        } else {
            let v: Vec<f64> = s.split(',').map(num).collect::<Result<_>>()?;
            if v.iter().any(|t| !(*t > 0.0)) {
                return Err(bad("times must be > 0"));
            }
            TimeGrid::List(v)
        };
        Ok(grid)
    }
}

impl fmt::Display for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeGrid::Log { lo, hi, n } => write!(f, "{lo:?}:{hi:?}:{n}"),
            TimeGrid::Linear { lo, hi, n } => write!(f, "{lo:?}:{hi:?}:{n}:lin"),
            TimeGrid::List(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// Optional scenario inputs; each scenario fills in its own defaults.
#[derive(Debug, Clone, Default)]
pub struct ScenarioParams {
    pub space: Option<ModelSpace>,
    pub grid: Option<TimeGrid>,
    pub tol: Option<f64>,
    pub r: Option<f64>,
    pub n: Option<usize>,
    pub t: Option<f64>,
    pub levels: Option<usize>,
    pub seed: Option<u64>,
}

/// A float serialized with 17 significant digits; non-finite values become `null`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sig17(pub f64);

impl Sig17 {
    pub fn text(self) -> String {
        format!("{:.16e}", self.0)
    }
}

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            RawValue::from_string(self.text()).map_err(serde::ser::Error::custom)?.serialize(s)
        } else {
            s.serialize_none()
        }
    }
}

fn sig(v: &[f64]) -> Vec<Sig17> {
    v.iter().copied().map(Sig17).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ReportValue {
    Number(Sig17),
    Series(Vec<Sig17>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateRecord {
    pub label: String,
    pub terms_used: usize,
    pub tail_bound: Sig17,
    pub target_tol: Sig17,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">")]
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invariant {
    pub name: String,
    pub relation: Relation,
    pub bound: Sig17,
    pub observed: Sig17,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub params: BTreeMap<String, String>,
    pub grids: BTreeMap<String, Vec<Sig17>>,
    pub values: BTreeMap<String, ReportValue>,
    pub certificates: Vec<CertificateRecord>,
    pub invariants: Vec<Invariant>,
    pub verdict: String,
    /// First failing invariant.
    pub witness: Option<Invariant>,
    /// Sampled grid written as CSV, column by column.
    #[serde(skip)]
    pub table: Vec<(String, Vec<f64>)>,
}

impl Report {
    fn new(scenario: &str) -> Self {
        Report {
            scenario: scenario.to_string(),
            params: BTreeMap::new(),
            grids: BTreeMap::new(),
            values: BTreeMap::new(),
            certificates: Vec::new(),
            invariants: Vec::new(),
            verdict: String::new(),
            witness: None,
            table: Vec::new(),
        }
    }

    fn param(&mut self, name: &str, value: impl fmt::Display) {
        self.params.insert(name.to_string(), value.to_string());
    }

    fn grid(&mut self, name: &str, v: &[f64]) {
        self.grids.insert(name.to_string(), sig(v));
        self.table.push((name.to_string(), v.to_vec()));
    }

    fn column(&mut self, name: &str, v: &[f64]) {
        self.values.insert(name.to_string(), ReportValue::Series(sig(v)));
        self.table.push((name.to_string(), v.to_vec()));
    }

    fn number(&mut self, name: &str, x: f64) {
        self.values.insert(name.to_string(), ReportValue::Number(Sig17(x)));
    }

    fn text(&mut self, name: &str, s: impl fmt::Display) {
        self.values.insert(name.to_string(), ReportValue::Text(s.to_string()));
    }

    fn certificate(&mut self, label: &str, cert: &TruncationCertificate) {
        self.certificates.push(CertificateRecord {
            label: label.to_string(),
            terms_used: cert.terms_used,
            tail_bound: Sig17(cert.tail_bound),
            target_tol: Sig17(cert.target_tol),
        });
    }

    fn check(&mut self, name: &str, relation: Relation, observed: f64, bound: f64) {
        let pass = match relation {
            Relation::AtMost => observed <= bound,
            Relation::Above => observed > bound,
        };
        self.invariants.push(Invariant { name: name.to_string(), relation, bound: Sig17(bound), observed: Sig17(observed), pass });
    }

    fn at_most(&mut self, name: &str, observed: f64, bound: f64) {
        self.check(name, Relation::AtMost, observed, bound)
    }

    fn above(&mut self, name: &str, observed: f64, bound: f64) {
        self.check(name, Relation::Above, observed, bound)
    }

    /// `observed` flags a boolean condition as `0` (holds) or `1` (fails).
    fn holds(&mut self, name: &str, ok: bool) {
        self.at_most(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }

    fn finish(mut self, verdict: Option<String>) -> Self {
        self.witness = self.invariants.iter().find(|i| !i.pass).cloned();
        self.verdict = verdict.unwrap_or_else(|| if self.passed() { "pass".into() } else { "fail".into() });
        self
    }

    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|i| i.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// The sampled grid as CSV, every float with 17 significant digits.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(self.table.iter().map(|(name, _)| name.as_str())).map_err(io)?;
        let rows = self.table.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
        for i in 0..rows {
            w.write_record(self.table.iter().map(|(_, c)| c.get(i).map(|x| Sig17(*x).text()).unwrap_or_default()))
                .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()? + "\n")?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv()?)?)
    }
}

/// Runs a named scenario and collects its report. Invariant failures are
/// recorded in the report, not returned as errors.
pub fn run_scenario(name: &str, params: &ScenarioParams) -> Result<Report> {
    let mut report = Report::new(name);
    let verdict = match name {
        "ihki-sphere" => scenario_ihki(params, &mut report, "sphere(2,1.0)")?,
        "ihki-product" => scenario_ihki(params, &mut report, "product(sphere(2,1.0),sphere(2,1.0))")?,
        "example-4-5" => scenario_example(params, &mut report)?,
        "cone-flatness" => scenario_cone(params, &mut report)?,
        "asymptotics" => scenario_asymptotics(params, &mut report)?,
        "trace-identity" => scenario_trace(params, &mut report)?,
        "takahashi" => scenario_takahashi(params, &mut report)?,
        "halfspace" => scenario_halfspace(params, &mut report)?,
        "theta-table" => scenario_theta(params, &mut report)?,
        "s1xr" => scenario_s1xr(params, &mut report)?,
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    Ok(report.finish(verdict))
}

/// Runs a scenario and writes its JSON report and, if requested, its CSV.
pub fn run_scenario_to(name: &str, params: &ScenarioParams, json: &Path, csv: Option<&Path>) -> Result<Report> {
    let report = run_scenario(name, params)?;
    report.write_json(json)?;
    if let Some(path) = csv {
        report.write_csv(path)?;
    }
    Ok(report)
}

fn space_or(params: &ScenarioParams, default: &str) -> Result<ModelSpace> {
    match &params.space {
        Some(s) => Ok(s.clone()),
        None => default.parse(),
    }
}

fn scenario_ihki(p: &ScenarioParams, rep: &mut Report, default: &str) -> Result<Option<String>> {
    let space = space_or(p, default)?;
    let grid = p.grid.clone().unwrap_or(TimeGrid::Log { lo: 0.05, hi: 20.0, n: DEFAULT_GRID_POINTS });
    let threshold = p.tol.unwrap_or(DEFAULT_THRESHOLD);
    rep.param("space", &space);
    rep.param("t_grid", &grid);
    rep.param("threshold", Sig17(threshold).text());
    let times = grid.points();
    let out = ihki_check(&space, &times, threshold)?;
    rep.grid("t", &times);
    rep.column("c", &out.c_values);
    rep.column("deviation", &out.deviations);
    rep.number("sup_deviation", out.sup_deviation);
    rep.text("ihki_verdict", out.verdict);
    rep.at_most("sup deviation of c(t) g_t from g", out.sup_deviation, threshold);
    if let Some(w) = &out.witness {
        rep.number("witness_t", w.t);
        rep.number("witness_deviation", w.deviation);
    }
    if let ModelSpace::Product(a, b) = &space {
        if a.is_compact() && b.is_compact() && out.verdict == Verdict::IhkiConsistent {
            let defects: Vec<f64> = times.par_iter().map(|&t| diagonal_power_defect(a, b, t)).collect::<Result<_>>()?;
            let worst = defects.iter().copied().fold(0.0, f64::max);
            rep.column("diagonal_power_defect", &defects);
            rep.at_most("IHKI product forces (ρ_A)^dim B = (ρ_B)^dim A", worst, 1e-8);
        }
    }
    if space.is_compact() {
        let t_mid = times[times.len() / 2];
        if let Ok(c) = c_of_t(&space, t_mid, 1e-12) {
            rep.certificate(&format!("c(t) at t = {t_mid:?}"), &c.cert);
        }
    }
    Ok(Some(out.verdict.to_string()))
}

fn scenario_example(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let r = p.r.unwrap_or(0.5);
    let tol = p.tol.unwrap_or(1e-12);
    rep.param("r", Sig17(r).text());
    rep.param("tol", Sig17(tol).text());
    let res = single_time_example(r, tol)?;
    let (t, d): (Vec<f64>, Vec<f64>) = res.probes.iter().copied().unzip();
    rep.grid("t", &t);
    rep.column("defect", &d);
    rep.number("s", res.s);
    rep.number("target", res.target);
    rep.number("calibration_residual", res.calibration_residual);
    rep.number("t_star", res.t_star);
    rep.number("product_deviation_at_t_star", res.product_deviation_at_t_star);
    rep.number("witness_t", res.witness_t);
    rep.number("witness_defect", res.witness_defect);
    rep.number("control_defect", res.control_defect);
    rep.number("volume_matched_radius", PI.sqrt() * r);
    rep.grids.insert("ihki_grid".into(), sig(&EXAMPLE_GRID));
    rep.values.insert("ihki_deviation".into(), ReportValue::Series(sig(&res.deviations)));
    rep.text("verdict_at_t_star", res.verdict_at_t_star);
    let product = ModelSpace::product(ModelSpace::circle(r)?, ModelSpace::sphere(2, res.s)?)?;
    rep.certificate("c(1) on the product", &c_of_t(&product, res.t_star, 1e-12)?.cert);
    rep.at_most("calibration residual", res.calibration_residual, tol);
    rep.at_most("product deviation at t = 1", res.product_deviation_at_t_star, 1e-8);
    rep.above("largest diagonal-power defect", res.witness_defect, 1e-3);
    rep.at_most("equal-spheres control defect", res.control_defect, 1e-10);
    rep.holds("immersion at t = 1 alone", res.verdict_at_t_star == Verdict::IhkiConsistent);
    rep.holds("verdict over {0.5, 1, 2} is single-time-only", res.verdict == Verdict::SingleTimeOnly);
    Ok(Some(res.verdict.to_string()))
}

fn cone_link(p: &ScenarioParams) -> Result<ModelSpace> {
    match space_or(p, "circle(1.0)")? {
        ModelSpace::Cone(link) => Ok(*link),
        link => Ok(link),
    }
}

/// Maps a cone point over a circle or sphere link into Euclidean space.
fn cone_to_flat(radius: f64, link: &Point) -> Vec<f64> {
    match link {
        Point::Angle(a) => vec![radius * a.cos(), radius * a.sin()],
        Point::Ambient(v) => {
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            v.iter().map(|c| radius * c / norm).collect()
        }
        _ => unreachable!("cone links are circles or spheres"),
    }
}

fn random_link_point(link: &ModelSpace, rng: &mut ChaCha8Rng) -> Point {
    match link {
        ModelSpace::Circle { .. } => Point::Angle(rng.gen_range(0.0..2.0 * PI)),
        ModelSpace::Sphere { dim: 2, radius } => {
            let v: [f64; 3] = UnitSphere.sample(rng);
            Point::Ambient(v.iter().map(|c| c * radius).collect())
        }
        other => other.base_point(),
    }
}

fn scenario_cone(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let link = cone_link(p)?;
    let cone = ModelSpace::cone(link.clone())?;
    let n = cone.dim();
    let flat = ModelSpace::euclidean(n)?;
    let seed = p.seed.unwrap_or(7);
    let pairs = p.levels.unwrap_or(200);
    let tol = p.tol.unwrap_or(1e-10);
    let times = p.grid.as_ref().map(TimeGrid::points).unwrap_or_else(|| vec![0.1, 0.5, 1.0, 2.0]);
    let bound = if n == 2 { 1e-8 } else { 1e-7 };
    rep.param("link", &link);
    rep.param("seed", seed);
    rep.param("pairs", pairs);
    rep.param("tol", Sig17(tol).text());
    rep.param("t_grid", TimeGrid::List(times.clone()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<(Point, Point)> = (0..pairs)
        .map(|_| {
            let r1 = rng.gen_range(0.0..=2.0);
            let x1 = random_link_point(&link, &mut rng);
            let r2 = rng.gen_range(0.0..=2.0);
            let x2 = random_link_point(&link, &mut rng);
            (Point::cone(r1, x1), Point::cone(r2, x2))
        })
        .collect();
    let jobs: Vec<(f64, usize)> = times.iter().flat_map(|&t| (0..pairs).map(move |i| (t, i))).collect();
    let rows: Vec<(f64, f64, f64)> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let (x, y) = &points[i];
            let kc = evaluate(&cone, x, y, t, tol)?;
            let (Point::Cone { radius: r1, link: l1 }, Point::Cone { radius: r2, link: l2 }) = (x, y) else {
                unreachable!()
            };
            let kf = evaluate(&flat, &Point::Coords(cone_to_flat(*r1, l1)), &Point::Coords(cone_to_flat(*r2, l2)), t, tol)?;
            Ok((kc.value, kf.value, kc.cert.tail_bound))
        })
        .collect::<Result<_>>()?;
    let t_col: Vec<f64> = jobs.iter().map(|j| j.0).collect();
    let idx: Vec<f64> = jobs.iter().map(|j| j.1 as f64).collect();
    let radius = |k: usize| -> Vec<f64> {
        jobs.iter()
            .map(|&(_, i)| match (k, &points[i]) {
                (0, (Point::Cone { radius, .. }, _)) | (1, (_, Point::Cone { radius, .. })) => *radius,
                _ => f64::NAN,
            })
            .collect()
    };
    let cone_v: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let flat_v: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| (r.0 - r.1).abs()).collect();
    rep.grid("t", &t_col);
    rep.grid("pair", &idx);
    rep.grid("r1", &radius(0));
    rep.grid("r2", &radius(1));
    rep.column("cone", &cone_v);
    rep.column("flat", &flat_v);
    rep.column("abs_diff", &diff);
    let worst = diff.iter().copied().fold(0.0, f64::max);
    let worst_tail = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    rep.number("max_abs_diff", worst);
    rep.number("max_tail_bound", worst_tail);
    rep.at_most(&format!("max |ρ_cone − ρ_R{n}|"), worst, bound);
    let apex_defect = times
        .iter()
        .map(|&t| {
            let apex = Point::cone(0.0, link.base_point());
            Ok((evaluate(&cone, &apex, &apex, t, tol)?.value * (4.0 * PI * t).powf(0.5 * n as f64) - 1.0).abs())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    rep.at_most("relative apex defect against (4πt)^{-n/2}", apex_defect, 1e-12);
    Ok(None)
}

fn scenario_asymptotics(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let space = space_or(p, "sphere(3,1.0)")?;
    let (k, expected) = match &space {
        ModelSpace::Sphere { dim, radius } => {
            let n = *dim as f64;
            (*radius, Some((n - 1.0) * (n - 2.0) / (3.0 * radius * radius)))
        }
        ModelSpace::Circle { radius } => (*radius, Some(0.0)),
        _ => (1.0, None),
    };
    let grid = p.grid.clone().unwrap_or(TimeGrid::Linear { lo: 1e-3 * k * k, hi: 1e-2 * k * k, n: 10 });
    let (lo, hi, count) = grid.bounds();
    rep.param("space", &space);
    rep.param("t_grid", &grid);
    let fit = small_t_asymptotics(&space, (lo, hi), count)?;
    rep.grid("t", &fit.times);
    rep.column("F", &fit.values);
    rep.number("constant", fit.constant);
    rep.number("slope", fit.slope);
    rep.at_most("|constant − 1|", (fit.constant - 1.0).abs(), 0.01);
    if let Some(e) = expected {
        rep.number("expected_slope", e);
        let bound = if e == 0.0 { 0.05 } else { 0.05 * e.abs() };
        rep.at_most("|slope − (n−1)(n−2)/(3k²)|", (fit.slope - e).abs(), bound);
    }
    Ok(None)
}

fn scenario_trace(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let space = space_or(p, "sphere(2,1.0)")?;
    let times = p.grid.as_ref().map(TimeGrid::points).unwrap_or_else(|| vec![0.5, 1.0, 2.0]);
    let h = 1e-4;
    rep.param("space", &space);
    rep.param("t_grid", TimeGrid::List(times.clone()));
    rep.param("h", Sig17(h).text());
    let defects: Vec<f64> = times.par_iter().map(|&t| trace_derivative_check(&space, t, h)).collect::<Result<_>>()?;
    rep.grid("t", &times);
    rep.column("defect", &defects);
    rep.at_most("max defect of ∂_t ρ_2t = −2n/c(t)", defects.iter().copied().fold(0.0, f64::max), 1e-6);
    Ok(None)
}

fn scenario_takahashi(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let space = space_or(p, "sphere(2,1.0)")?;
    let top = p.levels.unwrap_or(4).max(1);
    rep.param("space", &space);
    rep.param("levels", top);
    let levels: Vec<usize> = (1..=top).collect();
    let rows: Vec<_> = levels
        .par_iter()
        .map(|&l| Ok((eigenspace_immersion(&space, l)?, takahashi_defect(&space, l, 1e-4)?)))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&(crate::pullback::EigenspaceImmersion, f64)) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    rep.grid("level", &levels.iter().map(|&l| l as f64).collect::<Vec<_>>());
    rep.column("lambda", &col(&|r| r.0.lambda));
    rep.column("multiplicity", &col(&|r| r.0.multiplicity as f64));
    rep.column("on_sphere_deviation", &col(&|r| r.0.on_sphere_deviation));
    rep.column("metric_deviation", &col(&|r| r.0.metric_deviation));
    rep.column("finite_difference_defect", &col(&|r| r.1));
    rep.at_most("max on-sphere deviation", col(&|r| r.0.on_sphere_deviation).into_iter().fold(0.0, f64::max), 1e-9);
    rep.at_most(
        "max metric deviation relative to max(1, μ_l)",
        col(&|r| r.0.metric_deviation / r.0.lambda.max(1.0)).into_iter().fold(0.0, f64::max),
        1e-9,
    );
    rep.at_most("max finite-difference defect", col(&|r| r.1).into_iter().fold(0.0, f64::max), 1e-6);
    Ok(None)
}

fn scenario_halfspace(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let n = p.n.unwrap_or(3);
    let t = p.t.unwrap_or(1.0);
    let grid = p.grid.clone().unwrap_or(TimeGrid::Log { lo: 1e-4, hi: 50.0, n: 25 });
    rep.param("n", n);
    rep.param("t", Sig17(t).text());
    rep.param("x_grid", &grid);
    let xs: Vec<f64> = grid.points().iter().map(|x| x * t.sqrt()).collect();
    let rows: Vec<(f64, f64)> = xs
        .par_iter()
        .map(|&x| Ok((halfspace_gt_normal(n, x, t)?.value, halfspace_gt_normal_quadrature(n, x, t)?.value)))
        .collect::<Result<_>>()?;
    let closed: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let quad: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let scale = t.powf(0.5 * (n as f64 + 2.0));
    let interior = flat_constant(n) / scale;
    rep.grid("x_n", &xs);
    rep.column("closed_form", &closed);
    rep.column("quadrature", &quad);
    rep.number("interior", interior);
    rep.text("calibration", "c_n = 2 c_1, fixed by the interior limit");
    let boundary = halfspace_gt_normal(n, 1e-4 * t.sqrt(), t)?.value * scale;
    let far = halfspace_gt_normal(n, 50.0 * t.sqrt(), t)?.value / interior;
    let gap = rows.iter().map(|r| (r.0 - r.1).abs() * scale).fold(0.0, f64::max);
    rep.at_most("t^{(n+2)/2} g_t at x_n = 1e-4 √t", boundary, 1e-7);
    rep.at_most("relative gap to the interior value at x_n = 50 √t", (far - 1.0).abs(), 1e-10);
    rep.at_most("max t^{(n+2)/2} |closed form − quadrature|", gap, 1e-6);
    Ok(None)
}

fn scenario_theta(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let r = p.r.unwrap_or(1.0);
    let times = p.grid.as_ref().map(TimeGrid::points).unwrap_or_else(|| [1e-3, 1e-2, 0.1, 1.0, 5.0].iter().map(|u| u * r * r).collect());
    rep.param("r", Sig17(r).text());
    rep.param("t_grid", TimeGrid::List(times.clone()));
    let rows = torus_vs_sphere_theta(r, &times)?;
    let col = |f: fn(&ThetaRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    rep.grid("t", &times);
    rep.column("u", &col(|x| x.u));
    rep.column("torus_sum", &col(|x| x.torus_sum));
    rep.column("sphere_sum", &col(|x| x.sphere_sum));
    rep.column("torus_scaled", &col(|x| x.torus_scaled));
    rep.column("sphere_scaled", &col(|x| x.sphere_scaled));
    rep.column("torus_diagonal", &col(|x| x.torus_diagonal));
    rep.column("sphere_diagonal", &col(|x| x.sphere_diagonal));
    rep.column("matched_sphere_sum", &col(|x| x.matched_sphere_sum));
    for row in &rows {
        if row.u >= 5.0 {
            rep.at_most(&format!("sphere scaled sum − 3 at u = {:?}", row.u), row.sphere_scaled - 3.0, 1e-6);
            rep.above(&format!("sphere scaled sum − 3 at u = {:?}", row.u), row.sphere_scaled - 3.0, 0.0);
            rep.above(&format!("torus scaled sum over e^u at u = {:?}", row.u), row.torus_scaled / row.u.exp(), 1.0);
        }
        if row.u <= 1e-3 {
            let gap = (row.torus_diagonal / row.sphere_diagonal - 1.0).abs();
            rep.at_most(&format!("relative gap of diagonals at u = {:?}", row.u), gap, 0.03);
        }
    }
    Ok(None)
}

fn scenario_s1xr(p: &ScenarioParams, rep: &mut Report) -> Result<Option<String>> {
    let r = p.r.unwrap_or(1.0);
    let circle = ModelSpace::circle(r)?;
    let space = ModelSpace::product(circle.clone(), ModelSpace::euclidean(1)?)?;
    let grid = p.grid.clone().unwrap_or(TimeGrid::Log { lo: 0.1, hi: 10.0, n: 9 });
    rep.param("space", &space);
    rep.param("t_grid", &grid);
    let times = grid.points();
    let rows: Vec<[f64; 6]> = times
        .par_iter()
        .map(|&t| {
            let sample = pullback_matrix(&space, t, &space.base_point(), 1e-12)?;
            let PullbackForm::Blocks(b) = &sample.form else { unreachable!() };
            let lambda = pullback_scalar(&circle, t, 1e-13)?.value;
            let rho2 = compact_diagonal(&circle, 2.0 * t, 1e-13)?.value;
            let expect_circle = (8.0 * PI * t).powf(-0.5) * lambda;
            let expect_line = rho2 * flat_constant(1) * t.powf(-1.5);
            // Direct quadrature of ∫∫ (∂ρ)² over S¹(r) × ℝ, one direction at a time.
            let k = |a: f64, b: f64| evaluate(&circle, &Point::Angle(a), &Point::Angle(b), t, 1e-13).map(|v| v.value);
            let h = 1e-4;
            let mut err = None;
            let d_circle = integrate_circle(r, |phi| {
                let v = (k(h, phi).and_then(|a| k(-h, phi).map(|b| (a - b) / (2.0 * h * r)))).unwrap_or_else(|e| {
                    err = Some(e);
                    0.0
                });
                v * v
            });
            let sq_circle = integrate_circle(r, |phi| k(0.0, phi).map(|v| v * v).unwrap_or(0.0));
            if let Some(e) = err {
                return Err(e);
            }
            let g = |y: f64| (4.0 * PI * t).powf(-0.5) * (-y * y / (4.0 * t)).exp();
            let reach = 40.0 * t.sqrt();
            let sq_line = integrate_panels(-reach, reach, 16, |y| g(y).powi(2));
            let d_line = integrate_panels(-reach, reach, 16, |y| (y / (2.0 * t) * g(y)).powi(2));
            Ok([b[0].value, b[1].value, expect_circle, expect_line, d_circle * sq_line, d_line * sq_circle])
        })
        .collect::<Result<_>>()?;
    let col = |i: usize| rows.iter().map(|row| row[i]).collect::<Vec<f64>>();
    rep.grid("t", &times);
    rep.column("circle_block", &col(0));
    rep.column("line_block", &col(1));
    rep.column("circle_block_closed_form", &col(2));
    rep.column("line_block_closed_form", &col(3));
    rep.column("circle_block_quadrature", &col(4));
    rep.column("line_block_quadrature", &col(5));
    let rel = |a: usize, b: usize| rows.iter().map(|row| (row[a] / row[b] - 1.0).abs()).fold(0.0, f64::max);
    rep.at_most("blocks against closed forms, relative", rel(0, 2).max(rel(1, 3)), 1e-12);
    rep.at_most("blocks against direct quadrature, relative", rel(0, 4).max(rel(1, 5)), 1e-6);
    let report = ihki_check(&space, &times, DEFAULT_THRESHOLD)?;
    rep.column("ihki_deviation", &report.deviations);
    rep.text("ihki_verdict", report.verdict);
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_at_half() {
        let res = single_time_example(0.5, 1e-12).unwrap();
        assert!(res.calibration_residual <= 1e-10, "{res:?}");
        assert!(res.product_deviation_at_t_star <= 1e-8);
        assert!(res.witness_defect > 1e-3);
        assert!(res.control_defect <= 1e-10);
        assert_eq!(res.verdict_at_t_star, Verdict::IhkiConsistent);
        assert_eq!(res.verdict, Verdict::SingleTimeOnly);
    }

    #[test]
    fn log_c_rho_matches_certified_path() {
        for s in ["circle(0.5)", "sphere(2,0.7)", "sphere(3,1.3)"] {
            let space: ModelSpace = s.parse().unwrap();
            let c = c_of_t(&space, 1.0, 1e-13).unwrap().value;
            let rho = compact_diagonal(&space, 2.0, 1e-13).unwrap().value;
            assert!((log_c_rho(&space, 1.0).unwrap() - (c * rho).ln()).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn c_rho_grows_as_circle_shrinks() {
        let v: Vec<f64> =
            [0.6, 0.5, 0.4].iter().map(|&r| log_c_rho(&ModelSpace::circle(r).unwrap(), 1.0).unwrap()).collect();
        assert!(v[0] < v[1] && v[1] < v[2]);
    }

    #[test]
    fn calibration_failure_reports_scan() {
        // A large circle has no calibrated sphere radius inside [r/10, 10r].
        match calibrate(40.0, 1e-12) {
            Err(Error::CalibrationFailed { scan }) => assert_eq!(scan.len(), SCAN_POINTS),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn theta_rows() {
        let rows = torus_vs_sphere_theta(1.0, &[1e-3, 5.0]).unwrap();
        assert!(rows[1].sphere_scaled > 3.0 && rows[1].sphere_scaled < 3.0 + 1e-6);
        assert!(rows[1].torus_scaled > 5f64.exp());
        assert!((rows[0].torus_diagonal / rows[0].sphere_diagonal - 1.0).abs() < 0.03);
        // Raw sums differ by the area ratio π; the area-matched sphere closes the gap.
        assert!((rows[0].torus_sum / rows[0].sphere_sum - PI).abs() < 0.01);
        assert!((rows[0].torus_sum / rows[0].matched_sphere_sum - 1.0).abs() < 0.01);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!("0.1:10:3".parse::<TimeGrid>().unwrap().points().len(), 3);
        let lin = "1:3:3:lin".parse::<TimeGrid>().unwrap().points();
        assert_eq!(lin, vec![1.0, 2.0, 3.0]);
        assert_eq!("0.5,1,2".parse::<TimeGrid>().unwrap().points(), vec![0.5, 1.0, 2.0]);
        assert!("0:1:3".parse::<TimeGrid>().is_err());
        assert!("1:2".parse::<TimeGrid>().is_err());
        let g = TimeGrid::Log { lo: 0.05, hi: 20.0, n: 33 };
        assert_eq!(g.to_string().parse::<TimeGrid>().unwrap(), g);
    }

    #[test]
    fn sig17_serialization() {
        let s = serde_json::to_string(&vec![Sig17(0.1), Sig17(f64::NAN), Sig17(-2.5e-300)]).unwrap();
        assert_eq!(s, "[1.0000000000000001e-1,null,-2.5000000000000000e-300]");
        let back: Vec<Option<f64>> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0], Some(0.1));
    }

    #[test]
    fn unknown_scenario() {
        assert!(matches!(run_scenario("nope", &ScenarioParams::default()), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn every_scenario_passes_with_defaults() {
        for name in SCENARIOS {
            let rep = run_scenario(name, &ScenarioParams::default()).unwrap();
            assert!(rep.passed(), "{name}: {:?}", rep.witness);
            assert!(!rep.invariants.is_empty(), "{name}");
            let csv = rep.to_csv().unwrap();
            assert_eq!(csv, run_scenario(name, &ScenarioParams::default()).unwrap().to_csv().unwrap(), "{name}");
        }
    }

    #[test]
    fn failing_scenario_has_witness() {
        let params = ScenarioParams { space: Some("product(circle(1.0),sphere(2,1.0))".parse().unwrap()), ..Default::default() };
        let rep = run_scenario("ihki-sphere", &params).unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.verdict, "fails");
        assert!(rep.witness.is_some());
    }
}
