//! Symbolic model spaces with exact geometry and exact Laplace spectra.
//!
//! Eigenspaces are never materialized. Every kernel sum goes through an
//! addition theorem, so a level contributes `Σ_{i in level} φ_i(x) φ_i(y)` as
//! a closed-form function of the distance between `x` and `y`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::specfun::log_gamma;

pub const MAX_DIM: usize = 8;
pub const MAX_PRODUCT_DEPTH: usize = 4;

/// Relative tolerance used to merge product eigenvalues into one level.
pub const LEVEL_MERGE_RTOL: f64 = 1e-12;

const POINT_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpace {
    Circle { radius: f64 },
    Sphere { dim: usize, radius: f64 },
    Euclidean { dim: usize },
    HalfSpace { dim: usize },
    Product(Box<ModelSpace>, Box<ModelSpace>),
    Cone(Box<ModelSpace>),
    /// `(X, a·d, b·m)`: distances scaled by `distance`, measure by `measure`.
    Rescaled { base: Box<ModelSpace>, distance: f64, measure: f64 },
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidSpace(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl ModelSpace {
    pub fn circle(radius: f64) -> Result<Self> {
        Ok(ModelSpace::Circle { radius: positive("circle radius", radius)? })
    }

    /// `Sphere(1, k)` is the circle of radius `k`.
    pub fn sphere(dim: usize, radius: f64) -> Result<Self> {
        let radius = positive("sphere radius", radius)?;
        match dim {
            0 => Err(Error::InvalidSpace("sphere dimension must be ≥ 1".into())),
            1 => Ok(ModelSpace::Circle { radius }),
            d if d > MAX_DIM => Err(Error::InvalidSpace(format!("dimension {d} exceeds {MAX_DIM}"))),
            d => Ok(ModelSpace::Sphere { dim: d, radius }),
        }
    }

    pub fn euclidean(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidSpace(format!("euclidean dimension must be in 1..={MAX_DIM}")));
        }
        Ok(ModelSpace::Euclidean { dim })
    }

    pub fn half_space(dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidSpace(format!("half-space dimension must be in 1..={MAX_DIM}")));
        }
        Ok(ModelSpace::HalfSpace { dim })
    }

    pub fn product(left: ModelSpace, right: ModelSpace) -> Result<Self> {
        let space = ModelSpace::Product(Box::new(left), Box::new(right));
        if space.product_depth() > MAX_PRODUCT_DEPTH {
            return Err(Error::InvalidSpace(format!("product depth exceeds {MAX_PRODUCT_DEPTH}")));
        }
        if space.dim() > MAX_DIM {
            return Err(Error::InvalidSpace(format!("total dimension {} exceeds {MAX_DIM}", space.dim())));
        }
        Ok(space)
    }

    /// Cone over a link of diameter ≤ π with the matching Ricci bound: the
    /// unit sphere `S^{n-1}` or a circle of radius ≤ 1.
    pub fn cone(link: ModelSpace) -> Result<Self> {
        match link {
            ModelSpace::Circle { radius } if radius <= 1.0 => {}
            ModelSpace::Sphere { radius, .. } if (radius - 1.0).abs() <= 1e-12 => {}
            other => {
                return Err(Error::InvalidSpace(format!(
                    "cone link must be circle(r ≤ 1) or a unit sphere, got {other}"
                )))
            }
        }
        if link.dim() + 1 > MAX_DIM {
            return Err(Error::InvalidSpace(format!("cone dimension exceeds {MAX_DIM}")));
        }
        Ok(ModelSpace::Cone(Box::new(link)))
    }

    pub fn rescaled(base: ModelSpace, distance: f64, measure: f64) -> Result<Self> {
        Ok(ModelSpace::Rescaled {
            base: Box::new(base),
            distance: positive("distance factor", distance)?,
            measure: positive("measure factor", measure)?,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpace::Circle { .. } => 1,
            ModelSpace::Sphere { dim, .. } | ModelSpace::Euclidean { dim } | ModelSpace::HalfSpace { dim } => *dim,
            ModelSpace::Product(a, b) => a.dim() + b.dim(),
            ModelSpace::Cone(link) => link.dim() + 1,
            ModelSpace::Rescaled { base, .. } => base.dim(),
        }
    }

    pub fn is_compact(&self) -> bool {
        match self {
            ModelSpace::Circle { .. } | ModelSpace::Sphere { .. } => true,
            ModelSpace::Euclidean { .. } | ModelSpace::HalfSpace { .. } | ModelSpace::Cone(_) => false,
            ModelSpace::Product(a, b) => a.is_compact() && b.is_compact(),
            ModelSpace::Rescaled { base, .. } => base.is_compact(),
        }
    }

    fn product_depth(&self) -> usize {
        match self {
            ModelSpace::Product(a, b) => 1 + a.product_depth().max(b.product_depth()),
            ModelSpace::Cone(l) => l.product_depth(),
            ModelSpace::Rescaled { base, .. } => base.product_depth(),
            _ => 0,
        }
    }

    /// Number of irreducible factors, the unit in which product points split.
    pub fn factor_count(&self) -> usize {
        match self {
            ModelSpace::Product(a, b) => a.factor_count() + b.factor_count(),
            ModelSpace::Rescaled { base, .. } => base.factor_count(),
            _ => 1,
        }
    }

    fn unsupported(&self, op: &'static str) -> Error {
        Error::Unsupported { op, space: self.to_string() }
    }

    pub fn check_point(&self, p: &Point) -> Result<()> {
        let bad = |reason: String| Err(Error::PointMismatch { space: self.to_string(), reason });
        match (self, p) {
            (ModelSpace::Circle { .. }, Point::Angle(a)) if a.is_finite() => Ok(()),
            (ModelSpace::Sphere { dim, radius }, Point::Ambient(v)) => {
                if v.len() != dim + 1 {
                    return bad(format!("expected {} ambient coordinates, got {}", dim + 1, v.len()));
                }
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if (norm - radius).abs() > POINT_RTOL * radius {
                    return bad(format!("ambient norm {norm} differs from radius {radius}"));
                }
                Ok(())
            }
            (ModelSpace::Euclidean { dim }, Point::Coords(v)) if v.len() == *dim => Ok(()),
            (ModelSpace::HalfSpace { dim }, Point::Coords(v)) if v.len() == *dim => {
                if v[dim - 1] > 0.0 {
                    Ok(())
                } else {
                    bad("half-space points need a positive last coordinate".into())
                }
            }
            (ModelSpace::Product(a, b), Point::Pair(x, y)) => {
                a.check_point(x)?;
                b.check_point(y)
            }
            (ModelSpace::Cone(link), Point::Cone { radius, link: lp }) => {
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return bad(format!("cone radial coordinate must be ≥ 0, got {radius}"));
                }
                link.check_point(lp)
            }
            (ModelSpace::Rescaled { base, .. }, p) => base.check_point(p),
            (_, p) => bad(format!("point {p:?} has the wrong kind")),
        }
    }

    /// A deterministic point of the space, used as a default sample.
    pub fn base_point(&self) -> Point {
        match self {
            ModelSpace::Circle { .. } => Point::Angle(0.0),
            ModelSpace::Sphere { dim, radius } => {
                let mut v = vec![0.0; dim + 1];
                v[*dim] = *radius;
                Point::Ambient(v)
            }
            ModelSpace::Euclidean { dim } => Point::Coords(vec![0.0; *dim]),
            ModelSpace::HalfSpace { dim } => {
                let mut v = vec![0.0; *dim];
                v[dim - 1] = 1.0;
                Point::Coords(v)
            }
            ModelSpace::Product(a, b) => Point::Pair(Box::new(a.base_point()), Box::new(b.base_point())),
            ModelSpace::Cone(link) => Point::Cone { radius: 1.0, link: Box::new(link.base_point()) },
            ModelSpace::Rescaled { base, .. } => base.base_point(),
        }
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x:?}")
}

impl fmt::Display for ModelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpace::Circle { radius } => write!(f, "circle({})", fmt_num(*radius)),
            ModelSpace::Sphere { dim, radius } => write!(f, "sphere({dim},{})", fmt_num(*radius)),
            ModelSpace::Euclidean { dim } => write!(f, "euclidean({dim})"),
            ModelSpace::HalfSpace { dim } => write!(f, "halfspace({dim})"),
            ModelSpace::Product(a, b) => write!(f, "product({a},{b})"),
            ModelSpace::Cone(l) => write!(f, "cone({l})"),
            ModelSpace::Rescaled { base, distance, measure } => {
                write!(f, "rescaled({base},{},{})", fmt_num(*distance), fmt_num(*measure))
            }
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += self.src[self.pos..].chars().next().map_or(1, char::len_utf8);
        }
    }

    fn eat(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn token(&mut self, allowed: impl Fn(char) -> bool) -> &'a str {
        self.skip_ws();
        let start = self.pos;
        let len: usize = self.src[start..].chars().take_while(|&c| allowed(c)).map(char::len_utf8).sum();
        self.pos += len;
        &self.src[start..start + len]
    }

    fn number(&mut self) -> Result<f64> {
        let start = self.pos;
        let tok = self.token(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'));
        tok.parse::<f64>().map_err(|_| Error::Parse { pos: start, msg: format!("bad number `{tok}`") })
    }

    fn integer(&mut self) -> Result<usize> {
        let start = self.pos;
        let tok = self.token(|c| c.is_ascii_digit());
        tok.parse::<usize>().map_err(|_| Error::Parse { pos: start, msg: format!("bad integer `{tok}`") })
    }

    fn space(&mut self) -> Result<ModelSpace> {
        let name_pos = self.pos;
        let name = self.token(|c| c.is_ascii_alphabetic() || c == '_' || c == '-').to_ascii_lowercase();
        self.eat('(')?;
        let space = match name.as_str() {
            "circle" => ModelSpace::circle(self.number()?)?,
            "sphere" => {
                let n = self.integer()?;
                self.eat(',')?;
                ModelSpace::sphere(n, self.number()?)?
            }
            "euclidean" | "r" => ModelSpace::euclidean(self.integer()?)?,
            "halfspace" | "half_space" | "half-space" => ModelSpace::half_space(self.integer()?)?,
            "product" => {
                let a = self.space()?;
                self.eat(',')?;
                ModelSpace::product(a, self.space()?)?
            }
            "cone" => ModelSpace::cone(self.space()?)?,
            "rescaled" => {
                let base = self.space()?;
                self.eat(',')?;
                let a = self.number()?;
                self.eat(',')?;
                ModelSpace::rescaled(base, a, self.number()?)?
            }
            other => {
                self.pos = name_pos;
                return self.err(format!("unknown space kind `{other}`"));
            }
        };
        self.eat(')')?;
        Ok(space)
    }
}

impl FromStr for ModelSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Parser { src: s, pos: 0 };
        let space = p.space()?;
        p.skip_ws();
        if p.pos != s.len() {
            return p.err("trailing input");
        }
        Ok(space)
    }
}

/// A point of a [`ModelSpace`]; points of a rescaled space are points of its base.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Point {
    /// Angle in radians on a circle.
    Angle(f64),
    /// Ambient coordinates of a sphere point, with norm equal to the radius.
    Ambient(Vec<f64>),
    /// Cartesian coordinates in `ℝⁿ` or `ℝⁿ₊`.
    Coords(Vec<f64>),
    Pair(Box<Point>, Box<Point>),
    Cone { radius: f64, link: Box<Point> },
}

impl Point {
    pub fn pair(a: Point, b: Point) -> Point {
        Point::Pair(Box::new(a), Box::new(b))
    }

    pub fn cone(radius: f64, link: Point) -> Point {
        Point::Cone { radius, link: Box::new(link) }
    }

    /// Parses the textual point syntax of the CLI for the given space:
    /// `0.3` (circle angle), `0,0,1` (sphere direction, projected onto the
    /// sphere; euclidean coordinates), `a|b` (product factors, one part per
    /// irreducible factor), `r@p` (cone radius and link point).
    pub fn parse(space: &ModelSpace, s: &str) -> Result<Point> {
        let s = s.trim();
        let bad = |msg: String| Error::Parse { pos: 0, msg };
        let list = |s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|_| bad(format!("bad coordinate `{c}`"))))
                .collect()
        };
        let p = match space {
            ModelSpace::Circle { .. } => Point::Angle(s.parse().map_err(|_| bad(format!("bad angle `{s}`")))?),
            ModelSpace::Sphere { radius, .. } => {
                let v = list(s)?;
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(bad("sphere direction must be nonzero".into()));
                }
                Point::Ambient(v.into_iter().map(|c| c * radius / norm).collect())
            }
            ModelSpace::Euclidean { .. } | ModelSpace::HalfSpace { .. } => Point::Coords(list(s)?),
            ModelSpace::Product(a, b) => {
                let parts: Vec<&str> = s.split('|').collect();
                let left = a.factor_count();
                if parts.len() != left + b.factor_count() {
                    return Err(bad(format!(
                        "product point needs {} `|`-separated parts",
                        left + b.factor_count()
                    )));
                }
                Point::pair(Point::parse(a, &parts[..left].join("|"))?, Point::parse(b, &parts[left..].join("|"))?)
            }
            ModelSpace::Cone(link) => {
                let (r, lp) = s.split_once('@').ok_or_else(|| bad("cone point must be `r@link_point`".into()))?;
                let r = r.trim().parse().map_err(|_| bad(format!("bad cone radius `{r}`")))?;
                Point::cone(r, Point::parse(link, lp)?)
            }
            ModelSpace::Rescaled { base, .. } => Point::parse(base, s)?,
        };
        space.check_point(&p)?;
        Ok(p)
    }
}

/// One Laplace eigenvalue with its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralLevel {
    pub mu: f64,
    pub multiplicity: u64,
    pub level: usize,
}

/// Round factor: a circle or a round sphere of dimension ≥ 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Round {
    Circle { radius: f64 },
    Sphere { dim: usize, radius: f64 },
}

fn binom_u128(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

impl Round {
    pub(crate) fn dim(&self) -> usize {
        match self {
            Round::Circle { .. } => 1,
            Round::Sphere { dim, .. } => *dim,
        }
    }

    pub(crate) fn radius(&self) -> f64 {
        match self {
            Round::Circle { radius } | Round::Sphere { radius, .. } => *radius,
        }
    }

    pub(crate) fn mu(&self, l: usize) -> f64 {
        let lf = l as f64;
        match self {
            Round::Circle { radius } => lf * lf / (radius * radius),
            Round::Sphere { dim, radius } => lf * (lf + *dim as f64 - 1.0) / (radius * radius),
        }
    }

    pub(crate) fn multiplicity(&self, l: usize) -> u64 {
        match self {
            Round::Circle { .. } => {
                if l == 0 {
                    1
                } else {
                    2
                }
            }
            Round::Sphere { dim, .. } => {
                let (n, l) = (*dim as u128, l as u128);
                let lower = if l >= 2 { binom_u128(n + l - 2, n) } else { 0 };
                (binom_u128(n + l, n) - lower) as u64
            }
        }
    }

    /// Multiplicity as a float, `(2l+n-1)/(n-1) · Π_{i=1}^{n-2} (l+i)/i`.
    pub(crate) fn multiplicity_f(&self, l: usize) -> f64 {
        match self {
            Round::Circle { .. } => {
                if l == 0 {
                    1.0
                } else {
                    2.0
                }
            }
            Round::Sphere { dim, .. } => {
                let (n, lf) = (*dim as f64, l as f64);
                let mut m = (2.0 * lf + n - 1.0) / (n - 1.0);
                for i in 1..dim - 1 {
                    m *= (lf + i as f64) / i as f64;
                }
                m
            }
        }
    }

    pub(crate) fn volume(&self) -> f64 {
        match self {
            Round::Circle { radius } => 2.0 * PI * radius,
            Round::Sphere { dim, radius } => {
                let n = *dim as f64;
                radius.powi(*dim as i32)
                    * 2.0
                    * PI.powf(0.5 * (n + 1.0))
                    * (-log_gamma(0.5 * (n + 1.0)).expect("positive argument")).exp()
            }
        }
    }

    /// Geodesic angle between two points of the model, in `[0, π]`.
    pub(crate) fn angle(&self, x: &Point, y: &Point) -> f64 {
        match (self, x, y) {
            (Round::Circle { .. }, Point::Angle(a), Point::Angle(b)) => {
                let d = (a - b).rem_euclid(2.0 * PI);
                d.min(2.0 * PI - d)
            }
            (Round::Sphere { .. }, Point::Ambient(u), Point::Ambient(v)) => {
                let diff = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let sum = u.iter().zip(v).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
                2.0 * diff.atan2(sum)
            }
            _ => unreachable!("points are checked before reaching the round model"),
        }
    }
}

/// A round factor after rescaling: distances by `dist`, measure by `measure`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Leaf {
    pub round: Round,
    pub dist: f64,
    pub measure: f64,
}

impl Leaf {
    pub(crate) fn dim(&self) -> usize {
        self.round.dim()
    }

    pub(crate) fn mu(&self, l: usize) -> f64 {
        self.round.mu(l) / (self.dist * self.dist)
    }

    pub(crate) fn mult(&self, l: usize) -> f64 {
        self.round.multiplicity_f(l)
    }

    pub(crate) fn volume(&self) -> f64 {
        self.round.volume() * self.measure
    }

    /// Addition kernels `E_l(x, y)` for `l = 0, 1, …` at a fixed geodesic angle.
    pub(crate) fn addition_kernels(&self, angle: f64) -> AdditionKernels {
        AdditionKernels::new(*self, angle)
    }
}

/// Streams `Σ_{i in level l} φ_i(x)φ_i(y)` for increasing `l` at a fixed
/// angle: cosines on a circle, normalized Gegenbauer polynomials on a sphere.
pub(crate) struct AdditionKernels {
    leaf: Leaf,
    angle: f64,
    cos: f64,
    lam: f64,
    l: usize,
    // Gegenbauer recurrence state at cos(angle) and at 1.
    c: [f64; 2],
    c1: [f64; 2],
}

impl AdditionKernels {
    fn new(leaf: Leaf, angle: f64) -> Self {
        let cos = angle.cos().clamp(-1.0, 1.0);
        let lam = 0.5 * (leaf.dim() as f64 - 1.0);
        AdditionKernels { leaf, angle, cos, lam, l: 0, c: [0.0; 2], c1: [0.0; 2] }
    }

    fn gegenbauer_step(state: &mut [f64; 2], l: usize, lam: f64, x: f64) -> f64 {
        let v = match l {
            0 => 1.0,
            1 => 2.0 * lam * x,
            _ => {
                let lf = l as f64;
                (2.0 * x * (lf + lam - 1.0) * state[1] - (lf + 2.0 * lam - 2.0) * state[0]) / lf
            }
        };
        *state = [state[1], v];
        v
    }
}

impl Iterator for AdditionKernels {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let l = self.l;
        self.l += 1;
        let vol = self.leaf.volume();
        let e = match self.leaf.round {
            Round::Circle { .. } => {
                if l == 0 {
                    1.0 / vol
                } else {
                    2.0 * (l as f64 * self.angle).cos() / vol
                }
            }
            Round::Sphere { .. } => {
                let c = Self::gegenbauer_step(&mut self.c, l, self.lam, self.cos);
                let c1 = Self::gegenbauer_step(&mut self.c1, l, self.lam, 1.0);
                self.leaf.mult(l) / vol * (c / c1)
            }
        };
        Some(e)
    }
}

/// Splits a compact space into rescaled round factors. The measure factor of
/// a rescaled product is carried by its first factor.
pub(crate) fn compact_leaves(space: &ModelSpace) -> Result<Vec<Leaf>> {
    fn walk(space: &ModelSpace, dist: f64, measure: f64, out: &mut Vec<Leaf>) -> Result<()> {
        match space {
            ModelSpace::Circle { radius } => out.push(Leaf { round: Round::Circle { radius: *radius }, dist, measure }),
            ModelSpace::Sphere { dim, radius } => {
                out.push(Leaf { round: Round::Sphere { dim: *dim, radius: *radius }, dist, measure })
            }
            ModelSpace::Product(a, b) => {
                walk(a, dist, measure, out)?;
                walk(b, dist, 1.0, out)?;
            }
            ModelSpace::Rescaled { base, distance, measure: m } => walk(base, dist * distance, measure * m, out)?,
            other => return Err(other.unsupported("compact-only operation")),
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(space, 1.0, 1.0, &mut out)?;
    Ok(out)
}

/// The single rescaled round factor of a homogeneous irreducible space.
pub(crate) fn single_leaf(space: &ModelSpace, op: &'static str) -> Result<Leaf> {
    let leaves = compact_leaves(space).map_err(|_| space.unsupported(op))?;
    match leaves.as_slice() {
        [leaf] => Ok(*leaf),
        _ => Err(space.unsupported(op)),
    }
}

fn leaf_spectrum(leaf: &Leaf, max_level: usize) -> Vec<SpectralLevel> {
    (0..=max_level)
        .map(|l| SpectralLevel { mu: leaf.mu(l), multiplicity: leaf.round.multiplicity(l), level: l })
        .collect()
}

fn merge_levels(mut pairs: Vec<(f64, u64)>) -> Vec<SpectralLevel> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<SpectralLevel> = Vec::new();
    for (mu, m) in pairs {
        match out.last_mut() {
            Some(last) if (mu - last.mu).abs() <= LEVEL_MERGE_RTOL * mu.abs().max(last.mu.abs()) => {
                last.multiplicity += m
            }
            _ => out.push(SpectralLevel { mu, multiplicity: m, level: out.len() }),
        }
    }
    out
}

fn spectrum_tree(space: &ModelSpace, max_level: usize) -> Result<Vec<SpectralLevel>> {
    match space {
        ModelSpace::Circle { radius } => {
            Ok(leaf_spectrum(&Leaf { round: Round::Circle { radius: *radius }, dist: 1.0, measure: 1.0 }, max_level))
        }
        ModelSpace::Sphere { dim, radius } => Ok(leaf_spectrum(
            &Leaf { round: Round::Sphere { dim: *dim, radius: *radius }, dist: 1.0, measure: 1.0 },
            max_level,
        )),
        ModelSpace::Rescaled { base, distance, .. } => Ok(spectrum_tree(base, max_level)?
            .into_iter()
            .map(|s| SpectralLevel { mu: s.mu / (distance * distance), ..s })
            .collect()),
        ModelSpace::Product(a, b) => {
            let mut n = max_level + 1;
            loop {
                let sa = spectrum_tree(a, n)?;
                let sb = spectrum_tree(b, n)?;
                // Every eigenvalue ≤ `complete` is a sum of enumerated factor levels.
                let complete = sa.last().unwrap().mu.min(sb.last().unwrap().mu);
                let pairs: Vec<(f64, u64)> = sa
                    .iter()
                    .flat_map(|x| sb.iter().map(move |y| (x.mu + y.mu, x.multiplicity * y.multiplicity)))
                    .filter(|(mu, _)| *mu <= complete * (1.0 + LEVEL_MERGE_RTOL))
                    .collect();
                let merged = merge_levels(pairs);
                if merged.len() > max_level {
                    return Ok(merged.into_iter().take(max_level + 1).collect());
                }
                n *= 2;
            }
        }
        other => Err(other.unsupported("spectrum")),
    }
}

/// The first `max_level + 1` distinct Laplace eigenvalues with multiplicities.
pub fn spectrum(space: &ModelSpace, max_level: usize) -> Result<Vec<SpectralLevel>> {
    spectrum_tree(space, max_level)
}

pub fn volume(space: &ModelSpace) -> Result<f64> {
    match space {
        ModelSpace::Circle { radius } => Ok(Round::Circle { radius: *radius }.volume()),
        ModelSpace::Sphere { dim, radius } => Ok(Round::Sphere { dim: *dim, radius: *radius }.volume()),
        ModelSpace::Product(a, b) => Ok(volume(a)? * volume(b)?),
        ModelSpace::Rescaled { base, measure, .. } => Ok(volume(base)? * measure),
        other => Err(other.unsupported("volume")),
    }
}

pub fn distance(space: &ModelSpace, x: &Point, y: &Point) -> Result<f64> {
    space.check_point(x)?;
    space.check_point(y)?;
    Ok(distance_unchecked(space, x, y))
}

pub(crate) fn distance_unchecked(space: &ModelSpace, x: &Point, y: &Point) -> f64 {
    match (space, x, y) {
        (ModelSpace::Circle { radius }, _, _) => Round::Circle { radius: *radius }.angle(x, y) * radius,
        (ModelSpace::Sphere { dim, radius }, _, _) => Round::Sphere { dim: *dim, radius: *radius }.angle(x, y) * radius,
        (ModelSpace::Euclidean { .. } | ModelSpace::HalfSpace { .. }, Point::Coords(u), Point::Coords(v)) => {
            u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        }
        (ModelSpace::Product(a, b), Point::Pair(x1, x2), Point::Pair(y1, y2)) => {
            distance_unchecked(a, x1, y1).hypot(distance_unchecked(b, x2, y2))
        }
        (ModelSpace::Cone(link), Point::Cone { radius: r, link: x }, Point::Cone { radius: s, link: y }) => {
            let theta = distance_unchecked(link, x, y).min(PI);
            // r² + s² − 2rs cos θ, written without cancellation.
            ((r - s) * (r - s) + 4.0 * r * s * (0.5 * theta).sin().powi(2)).sqrt()
        }
        (ModelSpace::Rescaled { base, distance, .. }, _, _) => distance * distance_unchecked(base, x, y),
        _ => unreachable!("points are checked before dispatch"),
    }
}

/// `Σ_{i in level l} φ_i(x)φ_i(y)` on a circle or round sphere (or a
/// rescaling of one), by the addition theorem.
pub fn eigenspace_sum(space: &ModelSpace, l: usize, x: &Point, y: &Point) -> Result<f64> {
    let leaf = single_leaf(space, "eigenspace_sum")?;
    space.check_point(x)?;
    space.check_point(y)?;
    let angle = leaf.round.angle(x, y);
    Ok(leaf.addition_kernels(angle).nth(l).expect("infinite stream"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature;

    fn sp(s: &str) -> ModelSpace {
        s.parse().unwrap()
    }

    #[test]
    fn parse_and_display_round_trip() {
        for s in [
            "sphere(2,1.0)",
            "product(circle(0.5),sphere(2,0.5))",
            "cone(circle(1.0))",
            "rescaled(sphere(3,1.0),2.0,0.5)",
            "product(euclidean(2),halfspace(3))",
        ] {
            assert_eq!(sp(s).to_string(), s);
        }
        assert_eq!(sp(" sphere( 1 , 2 ) "), ModelSpace::Circle { radius: 2.0 });
        assert!("torus(1)".parse::<ModelSpace>().is_err());
        assert!("circle(-1)".parse::<ModelSpace>().is_err());
        assert!("cone(circle(2.0))".parse::<ModelSpace>().is_err());
        assert!("cone(sphere(2,0.5))".parse::<ModelSpace>().is_err());
        assert!("circle(1.0) x".parse::<ModelSpace>().is_err());
        assert!("product(sphere(4,1),sphere(5,1))".parse::<ModelSpace>().is_err());
    }

    #[test]
    fn product_depth_is_bounded() {
        let mut s = sp("circle(1)");
        for _ in 0..4 {
            s = ModelSpace::product(s, sp("circle(1)")).unwrap();
        }
        assert!(ModelSpace::product(s, sp("circle(1)")).is_err());
    }

    #[test]
    fn sphere_spectrum_first_levels() {
        let s = spectrum(&sp("sphere(2,1)"), 1).unwrap();
        assert_eq!((s[1].mu, s[1].multiplicity), (2.0, 3));
        let s = spectrum(&sp("sphere(3,1)"), 3).unwrap();
        let got: Vec<_> = s.iter().map(|l| (l.mu, l.multiplicity)).collect();
        assert_eq!(got, vec![(0.0, 1), (3.0, 4), (8.0, 9), (15.0, 16)]);
        for l in 0..50 {
            let r = Round::Sphere { dim: 5, radius: 1.0 };
            assert_eq!(r.multiplicity(l) as f64, r.multiplicity_f(l).round());
        }
    }

    #[test]
    fn circle_spectrum_enumeration() {
        let s = spectrum(&sp("circle(1)"), 2).unwrap();
        let got: Vec<_> = s.iter().map(|l| (l.mu, l.multiplicity)).collect();
        assert_eq!(got, vec![(0.0, 1), (1.0, 2), (4.0, 2)]);
    }

    #[test]
    fn torus_spectrum_against_lattice_count() {
        let s = spectrum(&sp("product(circle(1),circle(1))"), 1).unwrap();
        assert_eq!((s[1].mu, s[1].multiplicity), (1.0, 4));

        let levels = spectrum(&sp("product(circle(1),circle(1))"), 40).unwrap();
        let total: u64 = levels.iter().filter(|l| l.mu <= 25.0).map(|l| l.multiplicity).sum();
        let mut brute = 0u64;
        for j in -6i64..=6 {
            for k in -6i64..=6 {
                if j * j + k * k <= 25 {
                    brute += 1;
                }
            }
        }
        assert_eq!(total, brute);
        assert!(levels.last().unwrap().mu > 25.0);
    }

    #[test]
    fn rescaled_spectrum_divides_by_square() {
        let base = spectrum(&sp("sphere(2,1)"), 10).unwrap();
        let res = spectrum(&sp("rescaled(sphere(2,1),3.0,7.0)"), 10).unwrap();
        for (b, r) in base.iter().zip(&res) {
            assert_eq!(r.mu, b.mu / 9.0);
            assert_eq!(r.multiplicity, b.multiplicity);
        }
    }

    #[test]
    fn noncompact_spectrum_rejected() {
        assert!(matches!(spectrum(&sp("euclidean(2)"), 2), Err(Error::Unsupported { .. })));
        assert!(matches!(volume(&sp("cone(circle(1))")), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn volumes() {
        assert!((volume(&sp("circle(1)")).unwrap() - 2.0 * PI).abs() < 1e-15);
        assert!((volume(&sp("sphere(2,1)")).unwrap() - 4.0 * PI).abs() < 1e-14);
        assert!((volume(&sp("sphere(3,1)")).unwrap() - 2.0 * PI * PI).abs() < 1e-13);
        assert!((volume(&sp("product(circle(1),circle(1))")).unwrap() - 4.0 * PI * PI).abs() < 1e-13);
        // Quadrature of the round metric, sin θ dθ dφ.
        let area = quadrature::integrate(0.0, PI, |th| 2.0 * PI * th.sin());
        assert!((volume(&sp("sphere(2,1)")).unwrap() - area).abs() < 1e-12);
    }

    #[test]
    fn distances() {
        let cone = sp("cone(circle(1.0))");
        let d = distance(&cone, &Point::cone(1.0, Point::Angle(0.0)), &Point::cone(1.0, Point::Angle(PI))).unwrap();
        assert!((d - 2.0).abs() < 1e-15);

        let s2 = sp("sphere(2,1)");
        let n = Point::Ambient(vec![0.0, 0.0, 1.0]);
        let e = Point::Ambient(vec![1.0, 0.0, 0.0]);
        assert!((distance(&s2, &n, &e).unwrap() - PI / 2.0).abs() < 1e-15);

        let t2 = sp("product(circle(1),circle(1))");
        let a = Point::pair(Point::Angle(0.0), Point::Angle(0.0));
        let b = Point::pair(Point::Angle(PI), Point::Angle(PI));
        assert!((distance(&t2, &a, &b).unwrap() - PI * 2f64.sqrt()).abs() < 1e-14);

        assert!(matches!(distance(&s2, &n, &Point::Angle(0.0)), Err(Error::PointMismatch { .. })));
        let half = sp("halfspace(2)");
        assert!(half.check_point(&Point::Coords(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn eigenspace_sum_examples() {
        let c = sp("circle(1)");
        let v = eigenspace_sum(&c, 0, &Point::Angle(0.3), &Point::Angle(2.0)).unwrap();
        assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let v = eigenspace_sum(&c, 1, &Point::Angle(0.0), &Point::Angle(PI)).unwrap();
        // cos θ cos θ' + sin θ sin θ' over π
        let oracle = (0f64.cos() * PI.cos() + 0f64.sin() * PI.sin()) / PI;
        assert!((v - oracle).abs() < 1e-15 && (v + 1.0 / PI).abs() < 1e-15);

        let s2 = sp("sphere(2,1)");
        let x = Point::Ambient(vec![0.6, 0.0, 0.8]);
        let v = eigenspace_sum(&s2, 1, &x, &x).unwrap();
        // Explicit harmonics √(3/4π)(x, y, z).
        let explicit: f64 = [0.6f64, 0.0, 0.8].iter().map(|c| 3.0 / (4.0 * PI) * c * c).sum();
        assert!((v - explicit).abs() < 1e-15);

        assert!(matches!(
            eigenspace_sum(&sp("product(circle(1),circle(1))"), 1, &Point::Angle(0.0), &Point::Angle(0.0)),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn projection_idempotence_on_circle() {
        let c = sp("circle(1)");
        let (x, z) = (Point::Angle(0.4), Point::Angle(-1.3));
        for l in 0..4 {
            for lp in 0..4 {
                let integral = quadrature::integrate_circle(1.0, |th| {
                    let y = Point::Angle(th);
                    eigenspace_sum(&c, l, &x, &y).unwrap() * eigenspace_sum(&c, lp, &y, &z).unwrap()
                });
                let expect = if l == lp { eigenspace_sum(&c, l, &x, &z).unwrap() } else { 0.0 };
                assert!((integral - expect).abs() < 1e-8, "l={l} l'={lp}");
            }
        }
    }

    #[test]
    fn projection_idempotence_on_sphere() {
        let s = sp("sphere(2,0.7)");
        let x = Point::Ambient(vec![0.0, 0.0, 0.7]);
        let z = Point::Ambient(vec![0.7 * 0.6, 0.0, 0.7 * 0.8]);
        for l in 0..3 {
            for lp in 0..3 {
                let integral = quadrature::integrate_sphere2(0.7, |y| {
                    eigenspace_sum(&s, l, &x, &y).unwrap() * eigenspace_sum(&s, lp, &y, &z).unwrap()
                });
                let expect = if l == lp { eigenspace_sum(&s, l, &x, &z).unwrap() } else { 0.0 };
                assert!((integral - expect).abs() < 1e-8, "l={l} l'={lp}");
            }
        }
    }

    #[test]
    fn point_parsing() {
        let s = sp("product(circle(1),product(sphere(2,2.0),cone(circle(0.5))))");
        let p = Point::parse(&s, "0.5|0,0,3|1.5@0.2").unwrap();
        assert_eq!(
            p,
            Point::pair(
                Point::Angle(0.5),
                Point::pair(Point::Ambient(vec![0.0, 0.0, 2.0]), Point::cone(1.5, Point::Angle(0.2)))
            )
        );
        assert!(Point::parse(&s, "0.5|0,0,3").is_err());
        assert!(Point::parse(&sp("halfspace(2)"), "1,-1").is_err());
    }
}
