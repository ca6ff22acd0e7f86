//! Gauss–Legendre rules on intervals, circles and 2-spheres.

use std::f64::consts::PI;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;

use crate::model_spaces::Point;

/// Node count of the rules used on circles and spheres.
pub const NODES: usize = 256;

const PANEL_NODES: usize = 64;

fn rule(n: usize) -> &'static GaussLegendre {
    static R256: OnceLock<GaussLegendre> = OnceLock::new();
    static R64: OnceLock<GaussLegendre> = OnceLock::new();
    let cell = match n {
        NODES => &R256,
        PANEL_NODES => &R64,
        _ => unreachable!("only the two cached rules are used"),
    };
    cell.get_or_init(|| GaussLegendre::new(n.try_into().expect("nonzero")))
}

/// Composite Gauss–Legendre over `[a, b]` split into `panels` equal pieces.
pub fn integrate_panels<F: FnMut(f64) -> f64>(a: f64, b: f64, panels: usize, mut f: F) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * h;
            rule(PANEL_NODES).integrate(lo, lo + h, &mut f)
        })
        .sum()
}

/// Sixteen 64-node panels; ample for the smooth integrands used here.
pub fn integrate<F: FnMut(f64) -> f64>(a: f64, b: f64, f: F) -> f64 {
    integrate_panels(a, b, 16, f)
}

/// `∫_{S¹(r)} f ds` with `f` given as a function of the angle; 256 nodes.
pub fn integrate_circle<F: FnMut(f64) -> f64>(radius: f64, f: F) -> f64 {
    radius * rule(NODES).integrate(0.0, 2.0 * PI, f)
}

/// `∫_{S²(k)} f dA` over a 256 × 256 product rule in `(cos θ, φ)`.
pub fn integrate_sphere2<F: FnMut(Point) -> f64>(radius: f64, mut f: F) -> f64 {
    let r = rule(NODES);
    radius
        * radius
        * r.integrate(-1.0, 1.0, |c| {
            let s = (1.0 - c * c).max(0.0).sqrt();
            r.integrate(0.0, 2.0 * PI, |phi| {
                f(Point::Ambient(vec![radius * s * phi.cos(), radius * s * phi.sin(), radius * c]))
            })
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_gaussian() {
        let v = integrate(-1.0, 2.0, |x| x.powi(5) - 3.0 * x * x);
        assert!((v - (64.0 / 6.0 - 1.0 / 6.0 - 9.0)).abs() < 1e-13);
        let g = integrate_panels(-12.0, 12.0, 24, |x| (-0.5 * x * x).exp());
        assert!((g - (2.0 * PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn sphere_area() {
        let a = integrate_sphere2(2.0, |_| 1.0);
        assert!((a - 16.0 * PI).abs() < 1e-11);
        let z2 = integrate_sphere2(1.0, |p| match p {
            Point::Ambient(v) => v[2] * v[2],
            _ => unreachable!(),
        });
        assert!((z2 - 4.0 * PI / 3.0).abs() < 1e-12);
    }
}
