//! Dimer surface tension as the Legendre transform of the Ronkin function
//! `R(B) = mean over |z| = e^B1, |w| = e^B2 of log|P(z, w)|`.
//!
//! Two routes are provided and checked against each other:
//!
//! * the Legendre route, `sigma(rho) = sup_B [s(rho).B - R(B)]`, maximised
//!   numerically with finite-difference derivatives of `R`;
//! * the z-map route, which uses the fact that the maximiser is
//!   `B* = (log|z|, log|w|)` at the point of the spectral curve carrying the
//!   slope `rho`. It gives the gradient and Hessian of `sigma` in closed form.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dimer::{DimerModel, Slope, DEFAULT_MARGIN};
use crate::error::{Error, Result};
use crate::fd::{self, Mat2};
use crate::quadrature::GaussLegendre;

const NEAR_ZERO: f64 = 1e-10;
const MAX_REFINE: usize = 3;
const KINK_SCAN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Quadrature {
    /// `n x n` trapezoidal rule on the torus, with dyadic refinement around
    /// nodes where `|P|` is tiny.
    Torus { n: usize },
    /// Inner contour integral done exactly by Jensen's formula; the outer
    /// one by Gauss-Legendre on the arcs between the points where `P`
    /// vanishes on the torus.
    Jensen { nodes: usize },
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::Jensen { nodes: 64 }
    }
}

impl Quadrature {
    pub fn order(&self) -> usize {
        match *self {
            Quadrature::Torus { n } => n,
            Quadrature::Jensen { nodes } => nodes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RonkinEvaluation {
    pub b: [f64; 2],
    pub value: f64,
    pub quadrature_order: usize,
}

pub fn ronkin(model: &DimerModel, b: [f64; 2], quadrature: Quadrature) -> Result<RonkinEvaluation> {
    let value = match quadrature {
        Quadrature::Torus { n } => ronkin_torus(model, b, n)?,
        Quadrature::Jensen { nodes } => ronkin_jensen(model, b, nodes, None)?,
    };
    Ok(RonkinEvaluation {
        b,
        value,
        quadrature_order: quadrature.order(),
    })
}

fn ronkin_torus(model: &DimerModel, b: [f64; 2], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument("torus quadrature needs n >= 2".into()));
    }
    let (r1, r2) = (b[0].exp(), b[1].exp());
    let step = 2.0 * PI / n as f64;
    let log_abs = |theta: f64, phi: f64| -> Result<f64> {
        let z = Complex64::from_polar(r1, theta);
        let w = Complex64::from_polar(r2, phi);
        Ok(model.eval_p(z, w)?.norm())
    };
    // Mean of log|P| over a square cell of side `side` centred at (theta, phi),
    // by recursive 2x2 subdivision while the sample sits too close to a zero.
    fn cell(
        f: &dyn Fn(f64, f64) -> Result<f64>,
        theta: f64,
        phi: f64,
        side: f64,
        level: usize,
        b: [f64; 2],
    ) -> Result<f64> {
        let abs = f(theta, phi)?;
        if abs >= NEAR_ZERO {
            return Ok(abs.ln());
        }
        if level == MAX_REFINE {
            return Err(Error::NearZeroOfP {
                b1: b[0],
                b2: b[1],
                min_abs: abs,
            });
        }
        let q = 0.25 * side;
        let mut sum = 0.0;
        for (dt, dp) in [(-q, -q), (-q, q), (q, -q), (q, q)] {
            sum += cell(f, theta + dt, phi + dp, 0.5 * side, level + 1, b)?;
        }
        Ok(0.25 * sum)
    }
    let mut total = 0.0;
    for j in 0..n {
        let theta = j as f64 * step;
        let mut row = 0.0;
        for k in 0..n {
            row += cell(&log_abs, theta, k as f64 * step, step, 0, b)?;
        }
        total += row;
    }
    Ok(total / (n * n) as f64)
}

/// `kink` optionally gives the single angle in `(0, pi)` where `P` vanishes
/// on the torus, skipping the scan.
pub(crate) fn ronkin_jensen(
    model: &DimerModel,
    b: [f64; 2],
    nodes: usize,
    kink: Option<f64>,
) -> Result<f64> {
    let r1 = b[0].exp();
    let k = model.w_exponent_min() as f64;
    // log|c_lo| - log|c_hi| - B2: positive where the root in w lies outside |w| = e^B2.
    let indicator = |theta: f64| {
        let (lo, hi) = model.w_coefficients(Complex64::from_polar(r1, theta));
        lo.norm().ln() - hi.norm().ln() - b[1]
    };
    let integrand = |theta: f64| {
        let (lo, hi) = model.w_coefficients(Complex64::from_polar(r1, theta));
        let outside = lo.norm().ln() - hi.norm().ln() - b[1] >= 0.0;
        k * b[1]
            + if outside {
                lo.norm().ln()
            } else {
                hi.norm().ln() + b[1]
            }
    };

    let mut breaks = vec![0.0];
    match kink {
        Some(theta) if theta > 0.0 && theta < PI => breaks.push(theta),
        _ => {
            let mut prev_theta = 0.0;
            let mut prev = indicator(0.0);
            for j in 1..=KINK_SCAN {
                let theta = PI * j as f64 / KINK_SCAN as f64;
                let cur = indicator(theta);
                if (prev >= 0.0) != (cur >= 0.0) {
                    breaks.push(bisect(&indicator, prev_theta, theta));
                }
                prev_theta = theta;
                prev = cur;
            }
        }
    }
    breaks.push(PI);

    let owned;
    let rule = if nodes == 64 {
        GaussLegendre::default_rule()
    } else {
        owned = GaussLegendre::new(nodes);
        &owned
    };
    let total: f64 = breaks
        .windows(2)
        .map(|w| rule.integrate(w[0], w[1], integrand))
        .sum();
    let value = total / PI;
    if !value.is_finite() {
        return Err(Error::NearZeroOfP {
            b1: b[0],
            b2: b[1],
            min_abs: 0.0,
        });
    }
    Ok(value)
}

fn bisect<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64) -> f64 {
    let positive_lo = f(lo) >= 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) >= 0.0) == positive_lo {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaOptions {
    pub quadrature: Quadrature,
    /// Step for finite differences of the Ronkin function.
    pub ronkin_step: f64,
    /// Stop when `|s(rho) - grad R(B)| < tolerance`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub margin: f64,
}

impl Default for SigmaOptions {
    fn default() -> Self {
        SigmaOptions {
            quadrature: Quadrature::default(),
            ronkin_step: 1e-4,
            tolerance: 1e-10,
            max_iterations: 100,
            margin: DEFAULT_MARGIN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEvaluation {
    pub rho: Slope,
    pub value: f64,
    /// Maximising magnetic field.
    pub b_star: [f64; 2],
    pub iterations: usize,
}

/// Surface tension by concave maximisation of `s(rho).B - R(B)`.
pub fn sigma(model: &DimerModel, rho: Slope, opts: &SigmaOptions) -> Result<SigmaEvaluation> {
    if !model.is_liquid(rho, opts.margin) {
        return Err(Error::OutsidePolygon(rho.rho1, rho.rho2));
    }
    let s = model.ronkin_slope(rho);
    let r = |b: [f64; 2]| -> Result<f64> { Ok(ronkin(model, b, opts.quadrature)?.value) };
    let objective = |b: [f64; 2], rb: f64| s[0] * b[0] + s[1] * b[1] - rb;
    let h = opts.ronkin_step;

    let mut b = [0.0, 0.0];
    let mut rb = r(b)?;
    let mut residual = f64::INFINITY;
    for iteration in 0..opts.max_iterations {
        let rpp = r([b[0] + h, b[1] + h])?;
        let rpm = r([b[0] + h, b[1] - h])?;
        let rmp = r([b[0] - h, b[1] + h])?;
        let rmm = r([b[0] - h, b[1] - h])?;
        let r1p = r([b[0] + h, b[1]])?;
        let r1m = r([b[0] - h, b[1]])?;
        let r2p = r([b[0], b[1] + h])?;
        let r2m = r([b[0], b[1] - h])?;
        let grad = [(r1p - r1m) / (2.0 * h), (r2p - r2m) / (2.0 * h)];
        let hess = [
            [(r1p - 2.0 * rb + r1m) / (h * h), (rpp - rpm - rmp + rmm) / (4.0 * h * h)],
            [(rpp - rpm - rmp + rmm) / (4.0 * h * h), (r2p - 2.0 * rb + r2m) / (h * h)],
        ];
        let ascent = [s[0] - grad[0], s[1] - grad[1]];
        residual = ascent[0].hypot(ascent[1]);
        if residual < opts.tolerance {
            return Ok(SigmaEvaluation {
                rho,
                value: objective(b, rb),
                b_star: b,
                iterations: iteration,
            });
        }
        let det = fd::det2(&hess);
        let mut step = if hess[0][0] > 0.0 && det > 1e-12 {
            [
                (hess[1][1] * ascent[0] - hess[0][1] * ascent[1]) / det,
                (hess[0][0] * ascent[1] - hess[1][0] * ascent[0]) / det,
            ]
        } else {
            ascent
        };
        let len = step[0].hypot(step[1]);
        if len > 1.0 {
            step = [step[0] / len, step[1] / len];
        }
        let current = objective(b, rb);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = [b[0] + step[0], b[1] + step[1]];
            let rc = r(cand)?;
            if objective(cand, rc) >= current - 1e-14 * current.abs().max(1.0) {
                b = cand;
                rb = rc;
                accepted = true;
                break;
            }
            step = [0.5 * step[0], 0.5 * step[1]];
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NonConvergence {
        what: "Legendre maximisation",
        iterations: opts.max_iterations,
        residual,
    })
}

/// Second derivatives of the surface tension at a slope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTensionMatrix {
    pub sigma: Mat2,
    pub eigenvalues: [f64; 2],
}

impl SurfaceTensionMatrix {
    pub fn from_matrix(m: Mat2) -> Self {
        let off = 0.5 * (m[0][1] + m[1][0]);
        let sigma = [[m[0][0], off], [off, m[1][1]]];
        SurfaceTensionMatrix {
            sigma,
            eigenvalues: fd::sym_eigenvalues(&sigma),
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        self.eigenvalues[0] > 0.0
    }
}

/// Hessian of the Legendre-route surface tension by central differences
/// with steps `step` and `step / 2`, Richardson-extrapolated.
pub fn sigma_hessian(
    model: &DimerModel,
    rho: Slope,
    step: f64,
    opts: &SigmaOptions,
) -> Result<SurfaceTensionMatrix> {
    if !model.is_liquid(rho, opts.margin.max(2.0 * step)) {
        return Err(Error::OutsidePolygon(rho.rho1, rho.rho2));
    }
    let inner = SigmaOptions {
        margin: opts.margin.min(0.5 * opts.margin.max(2.0 * step) - step).max(1e-9),
        ..*opts
    };
    let failure = RefCell::new(None);
    let m = fd::hessian(
        |p| match sigma(model, Slope::from(p), &inner) {
            Ok(e) => e.value,
            Err(err) => {
                failure.borrow_mut().get_or_insert(err);
                f64::NAN
            }
        },
        rho.as_array(),
        step,
    );
    if let Some(err) = failure.into_inner() {
        return Err(err);
    }
    Ok(SurfaceTensionMatrix::from_matrix(m))
}

/// `B* = (log|z|, log|w|)` at the curve point carrying `rho`.
pub fn dual_point(model: &DimerModel, rho: Slope) -> Result<[f64; 2]> {
    let z = model.z_from_slope(rho)?;
    let w = model.solve_w(z)?;
    Ok([z.norm().ln(), w.norm().ln()])
}

/// `sigma(rho) = s(rho).B* - R(B*)` with the dual point from the z-map.
pub fn sigma_zmap(model: &DimerModel, rho: Slope) -> Result<f64> {
    let z = model.z_from_slope(rho)?;
    let w = model.solve_w(z)?;
    let b = [z.norm().ln(), w.norm().ln()];
    let kink = (model.branch_offset() == [0, 0]).then(|| z.arg());
    let s = model.ronkin_slope(rho);
    Ok(s[0] * b[0] + s[1] * b[1] - ronkin_jensen(model, b, 64, kink)?)
}

/// Gradient of the surface tension, `chart_sign * B*`.
pub fn sigma_gradient_zmap(model: &DimerModel, rho: Slope) -> Result<[f64; 2]> {
    let b = dual_point(model, rho)?;
    let sign = model.chart_sign();
    Ok([sign[0] * b[0], sign[1] * b[1]])
}

/// Closed-form Hessian of the surface tension from the Jacobian of the z-map:
/// `Sigma = diag(chart_sign) dB*/drho`.
pub fn sigma_hessian_zmap(model: &DimerModel, rho: Slope) -> Result<SurfaceTensionMatrix> {
    let z = model.z_from_slope(rho)?;
    sigma_hessian_at_z(model, z)
}

pub(crate) fn sigma_hessian_at_z(model: &DimerModel, z: Complex64) -> Result<SurfaceTensionMatrix> {
    let w = model.solve_w(z)?;
    let g = model.log_slope(z, w);
    // dB*/du = [[1, 0], [Re g, -Im g]], du/drho = inverse of the slope Jacobian.
    let inv = [[-PI / g.im, -PI * g.re / g.im], [0.0, PI]];
    let jb = [[1.0, 0.0], [g.re, -g.im]];
    let db = fd::mul2(&jb, &inv);
    let sign = model.chart_sign();
    Ok(SurfaceTensionMatrix::from_matrix([
        [sign[0] * db[0][0], sign[0] * db[0][1]],
        [sign[1] * db[1][0], sign[1] * db[1][1]],
    ]))
}

/// How grid operations obtain the surface-tension Hessian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub enum SigmaRoute {
    /// Finite differences of the Legendre transform (slow, independent).
    Legendre { step: f64 },
    /// Closed form through the z-map (fast).
    #[default]
    ZMap,
}

impl SigmaRoute {
    pub fn hessian(&self, model: &DimerModel, rho: Slope) -> Result<SurfaceTensionMatrix> {
        match *self {
            SigmaRoute::Legendre { step } => {
                sigma_hessian(model, rho, step, &SigmaOptions { margin: 1e-6, ..Default::default() })
            }
            SigmaRoute::ZMap => sigma_hessian_zmap(model, rho),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn honeycomb_asymptotics() {
        let hc = DimerModel::honeycomb();
        for t in [8.0, 12.0] {
            let v = ronkin(&hc, [t, t], Quadrature::default()).unwrap().value;
            assert!((v - t).abs() < 1e-3, "t = {t}: {v}");
        }
        let v = ronkin(&hc, [-10.0, -10.0], Quadrature::default()).unwrap().value;
        assert!(v.abs() < 1e-4, "{v}");
        let v = ronkin(&hc, [-10.0, -10.0], Quadrature::Torus { n: 64 }).unwrap().value;
        assert!(v.abs() < 1e-4, "{v}");
    }

    #[test]
    fn jensen_matches_torus_away_from_the_amoeba() {
        // Outside the amoeba log|P| is smooth on the torus and the
        // trapezoidal rule is spectrally accurate.
        for model in [DimerModel::honeycomb(), DimerModel::square()] {
            for b in [[1.5, -1.0], [-2.0, 0.7], [2.5, 2.0]] {
                let torus = ronkin(&model, b, Quadrature::Torus { n: 128 }).unwrap().value;
                let jensen = ronkin(&model, b, Quadrature::default()).unwrap().value;
                assert!((torus - jensen).abs() < 1e-12, "{} {b:?}: {torus} vs {jensen}", model.name());
            }
        }
    }

    #[test]
    fn refinement_handles_zeros_on_the_nodes() {
        // At B = 0 the honeycomb curve meets the torus at angles +-pi/3, which
        // are quadrature nodes whenever 6 divides n.
        let hc = DimerModel::honeycomb();
        let exact = ronkin(&hc, [0.0, 0.0], Quadrature::default()).unwrap().value;
        for n in [6, 60, 600] {
            let v = ronkin(&hc, [0.0, 0.0], Quadrature::Torus { n }).unwrap().value;
            assert!(v.is_finite());
            assert!((v - exact).abs() < 2.0 / (n * n) as f64, "n = {n}: {v} vs {exact}");
        }
        assert!(matches!(
            ronkin(&hc, [0.0, 0.0], Quadrature::Torus { n: 1 }),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn legendre_and_zmap_sigma_agree() {
        let opts = SigmaOptions::default();
        for model in [DimerModel::honeycomb(), DimerModel::square()] {
            for rho in [[0.2, 0.3], [0.5, 0.25], [0.1, 0.1]] {
                let rho = Slope::from(rho);
                if !model.is_liquid(rho, 0.02) {
                    continue;
                }
                let legendre = sigma(&model, rho, &opts).unwrap();
                let zmap = sigma_zmap(&model, rho).unwrap();
                assert!((legendre.value - zmap).abs() < 1e-11, "{rho}: {} vs {zmap}", legendre.value);
                let b = dual_point(&model, rho).unwrap();
                assert!((legendre.b_star[0] - b[0]).abs() < 1e-6);
                assert!((legendre.b_star[1] - b[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn outside_liquid_is_an_error() {
        let hc = DimerModel::honeycomb();
        let opts = SigmaOptions::default();
        assert!(matches!(sigma(&hc, Slope::new(0.0, 0.5), &opts), Err(Error::OutsidePolygon(..))));
        assert!(matches!(sigma(&hc, Slope::new(0.6, 0.6), &opts), Err(Error::OutsidePolygon(..))));
    }

    #[test]
    fn square_symmetric_point() {
        let sq = DimerModel::square();
        let m = sigma_hessian_zmap(&sq, Slope::new(0.5, 0.5)).unwrap();
        assert!(m.sigma[0][1].abs() < 1e-14);
        assert_relative_eq!(m.sigma[0][0], PI, max_relative = 1e-14);
        let fd = sigma_hessian(&sq, Slope::new(0.5, 0.5), 1e-3, &SigmaOptions::default()).unwrap();
        assert!(fd.sigma[0][1].abs() < 1e-6, "{:?}", fd.sigma);
    }

    #[test]
    fn monge_ampere_determinant() {
        for model in [DimerModel::honeycomb(), DimerModel::square()] {
            let m = sigma_hessian_zmap(&model, Slope::new(0.3, 0.2)).unwrap();
            assert_relative_eq!(fd::det2(&m.sigma), PI * PI, max_relative = 1e-12);
        }
    }
}
