//! Dimer models with genus-zero spectral curves: characteristic polynomial,
//! Newton polygon and the bijection between the upper half plane and the
//! liquid slopes.
//!
//! A slope is read off a point `(z, w)` of the spectral curve `P(z, w) = 0` as
//! `rho = (-arg w, arg z) / pi`. On the principal sheet `arg z` lies in
//! `(0, pi)` and `arg w` in `(-pi, 0)`; both shipped models send the upper
//! half plane onto the interior of their Newton polygon with this choice.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default distance from the polygon boundary that counts as safely liquid.
pub const DEFAULT_MARGIN: f64 = 0.02;

const Z_NEWTON_MAX_ITER: usize = 50;
const Z_NEWTON_TOL: f64 = 1e-12;
const POLE_TOL: f64 = 1e-12;

/// A height gradient `(rho1, rho2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub rho1: f64,
    pub rho2: f64,
}

impl Slope {
    pub const fn new(rho1: f64, rho2: f64) -> Self {
        Slope { rho1, rho2 }
    }

    pub fn as_array(self) -> [f64; 2] {
        [self.rho1, self.rho2]
    }
}

impl From<[f64; 2]> for Slope {
    fn from(p: [f64; 2]) -> Self {
        Slope::new(p[0], p[1])
    }
}

impl fmt::Display for Slope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.rho1, self.rho2)
    }
}

/// Convex lattice polygon, vertices counterclockwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonPolygon {
    vertices: Vec<[i32; 2]>,
    margin: f64,
}

impl NewtonPolygon {
    pub fn new(vertices: Vec<[i32; 2]>, margin: f64) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument(
                "a Newton polygon needs at least three vertices".into(),
            ));
        }
        if !(margin > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "interior margin must be positive, got {margin}"
            )));
        }
        let n = vertices.len();
        for k in 0..n {
            let a = vertices[k];
            let b = vertices[(k + 1) % n];
            let c = vertices[(k + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross <= 0 {
                return Err(Error::InvalidArgument(format!(
                    "polygon is not strictly convex and counterclockwise at vertex {b:?}"
                )));
            }
        }
        Ok(NewtonPolygon { vertices, margin })
    }

    pub fn triangle() -> Self {
        NewtonPolygon::new(vec![[0, 0], [1, 0], [0, 1]], DEFAULT_MARGIN).unwrap()
    }

    pub fn unit_square() -> Self {
        NewtonPolygon::new(vec![[0, 0], [1, 0], [1, 1], [0, 1]], DEFAULT_MARGIN).unwrap()
    }

    pub fn vertices(&self) -> &[[i32; 2]] {
        &self.vertices
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Signed distance to the nearest edge line; positive inside.
    pub fn edge_distance(&self, rho: Slope) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|k| {
                let a = self.vertices[k];
                let b = self.vertices[(k + 1) % n];
                let d = [(b[0] - a[0]) as f64, (b[1] - a[1]) as f64];
                let p = [rho.rho1 - a[0] as f64, rho.rho2 - a[1] as f64];
                (d[0] * p[1] - d[1] * p[0]) / d[0].hypot(d[1])
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k] as f64);
                hi[k] = hi[k].max(v[k] as f64);
            }
        }
        (lo, hi)
    }
}

/// Closed-form inverse of the slope map, when one is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClosedForm {
    /// `z = sin(pi rho1) / sin(pi (rho1 + rho2)) * exp(i pi rho2)`.
    Honeycomb,
    /// `z` on the ray `arg z = pi rho2` where the segment `[-1, 1]`
    /// subtends the angle `pi rho1`.
    Square,
    None,
}

/// A periodic planar dimer model whose spectral curve is a single sheet over
/// the `z` plane, i.e. `P(z, w)` has degree one in `w` (or `1/w`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimerModel {
    name: String,
    polygon: NewtonPolygon,
    coefficients: BTreeMap<(i32, i32), f64>,
    /// `s(rho) = chart_sign * rho + chart_offset` maps the slope polygon onto
    /// the polygon of exponents of `P`, the range of the Ronkin gradient.
    chart_sign: [f64; 2],
    chart_offset: [f64; 2],
    /// Adds `(-2 k1, 2 k2)` to the principal-sheet slope.
    branch_offset: [i32; 2],
    closed_form: ClosedForm,
    w_exponent_min: i32,
}

impl DimerModel {
    pub fn new(
        name: impl Into<String>,
        polygon: NewtonPolygon,
        coefficients: BTreeMap<(i32, i32), f64>,
        chart_sign: [f64; 2],
        chart_offset: [f64; 2],
        closed_form: ClosedForm,
    ) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::InvalidArgument("empty characteristic polynomial".into()));
        }
        let kmin = coefficients.keys().map(|k| k.1).min().unwrap();
        let kmax = coefficients.keys().map(|k| k.1).max().unwrap();
        if kmax - kmin != 1 {
            return Err(Error::MultiBranch(kmax - kmin));
        }
        if chart_sign.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::InvalidArgument("chart signs must be +1 or -1".into()));
        }
        Ok(DimerModel {
            name: name.into(),
            polygon,
            coefficients,
            chart_sign,
            chart_offset,
            branch_offset: [0, 0],
            closed_form,
            w_exponent_min: kmin,
        })
    }

    /// Uniform honeycomb lattice, `P(z, w) = z + w - 1`.
    pub fn honeycomb() -> Self {
        let coefficients = BTreeMap::from([((1, 0), 1.0), ((0, 1), 1.0), ((0, 0), -1.0)]);
        DimerModel::new(
            "honeycomb",
            NewtonPolygon::triangle(),
            coefficients,
            [1.0, 1.0],
            [0.0, 0.0],
            ClosedForm::Honeycomb,
        )
        .unwrap()
    }

    /// Uniform square grid, `P(z, w) = -1 + 1/z + 1/w + 1/(zw)`.
    ///
    /// The exponents of `P` span `[-1, 0]^2`, so the Ronkin gradient at the
    /// dual point of `rho` is `-rho`.
    pub fn square() -> Self {
        let coefficients = BTreeMap::from([
            ((0, 0), -1.0),
            ((-1, 0), 1.0),
            ((0, -1), 1.0),
            ((-1, -1), 1.0),
        ]);
        DimerModel::new(
            "square",
            NewtonPolygon::unit_square(),
            coefficients,
            [-1.0, -1.0],
            [0.0, 0.0],
            ClosedForm::Square,
        )
        .unwrap()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "honeycomb" => Ok(DimerModel::honeycomb()),
            "square" => Ok(DimerModel::square()),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }

    pub fn with_branch_offset(mut self, offset: [i32; 2]) -> Self {
        self.branch_offset = offset;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn polygon(&self) -> &NewtonPolygon {
        &self.polygon
    }

    pub fn coefficients(&self) -> &BTreeMap<(i32, i32), f64> {
        &self.coefficients
    }

    pub fn chart_sign(&self) -> [f64; 2] {
        self.chart_sign
    }

    pub fn branch_offset(&self) -> [i32; 2] {
        self.branch_offset
    }

    /// Point of the exponent polygon of `P` that corresponds to `rho`.
    pub fn ronkin_slope(&self, rho: Slope) -> [f64; 2] {
        [
            self.chart_sign[0] * rho.rho1 + self.chart_offset[0],
            self.chart_sign[1] * rho.rho2 + self.chart_offset[1],
        ]
    }

    /// Smallest exponent of `w` in `P`; the largest is one more.
    pub fn w_exponent_min(&self) -> i32 {
        self.w_exponent_min
    }

    /// `(c_lo(z), c_hi(z))` with `P = c_lo w^k + c_hi w^(k+1)`, `k = w_exponent_min`.
    pub fn w_coefficients(&self, z: Complex64) -> (Complex64, Complex64) {
        let mut lo = Complex64::new(0.0, 0.0);
        let mut hi = Complex64::new(0.0, 0.0);
        for (&(a, b), &c) in &self.coefficients {
            let term = z.powi(a) * c;
            if b == self.w_exponent_min {
                lo += term;
            } else {
                hi += term;
            }
        }
        (lo, hi)
    }

    pub fn eval_p(&self, z: Complex64, w: Complex64) -> Result<Complex64> {
        if z == Complex64::new(0.0, 0.0) || w == Complex64::new(0.0, 0.0) {
            return Err(Error::Domain("P is a Laurent polynomial; z and w must be non-zero".into()));
        }
        Ok(self
            .coefficients
            .iter()
            .map(|(&(a, b), &c)| z.powi(a) * w.powi(b) * c)
            .sum())
    }

    /// `(dP/dz, dP/dw)`.
    pub fn grad_p(&self, z: Complex64, w: Complex64) -> (Complex64, Complex64) {
        let mut pz = Complex64::new(0.0, 0.0);
        let mut pw = Complex64::new(0.0, 0.0);
        for (&(a, b), &c) in &self.coefficients {
            if a != 0 {
                pz += z.powi(a - 1) * w.powi(b) * (c * a as f64);
            }
            if b != 0 {
                pw += z.powi(a) * w.powi(b - 1) * (c * b as f64);
            }
        }
        (pz, pw)
    }

    pub fn solve_w(&self, z: Complex64) -> Result<Complex64> {
        let (lo, hi) = self.w_coefficients(z);
        if hi.norm() < POLE_TOL {
            return Err(Error::SingularPoint(format!(
                "leading w-coefficient vanishes at z = {z}"
            )));
        }
        let w = -lo / hi;
        if w.norm() < POLE_TOL {
            return Err(Error::SingularPoint(format!("w = 0 at z = {z}")));
        }
        Ok(w)
    }

    /// `d log w / d log z` along the curve, `-z P_z / (w P_w)`.
    pub fn log_slope(&self, z: Complex64, w: Complex64) -> Complex64 {
        let (pz, pw) = self.grad_p(z, w);
        -(z * pz) / (w * pw)
    }

    pub fn slope_from_z(&self, z: Complex64) -> Result<Slope> {
        if !(z.im > 0.0) {
            return Err(Error::Branch { re: z.re, im: z.im });
        }
        let w = self.solve_w(z)?;
        Ok(self.slope_from_zw(z, w))
    }

    pub(crate) fn slope_from_zw(&self, z: Complex64, w: Complex64) -> Slope {
        let k = self.branch_offset;
        Slope::new(
            -(w.arg() + 2.0 * PI * k[0] as f64) / PI,
            (z.arg() + 2.0 * PI * k[1] as f64) / PI,
        )
    }

    fn principal_slope(&self, rho: Slope) -> Slope {
        let k = self.branch_offset;
        Slope::new(rho.rho1 + 2.0 * k[0] as f64, rho.rho2 - 2.0 * k[1] as f64)
    }

    pub fn z_from_slope(&self, rho: Slope) -> Result<Complex64> {
        if !(self.polygon.edge_distance(rho) > 0.0) {
            return Err(Error::OutsidePolygon(rho.rho1, rho.rho2));
        }
        let p = self.principal_slope(rho);
        match self.closed_form {
            ClosedForm::Honeycomb => {
                let modulus = (PI * p.rho1).sin() / (PI * (p.rho1 + p.rho2)).sin();
                Ok(Complex64::from_polar(modulus, PI * p.rho2))
            }
            ClosedForm::Square => {
                let phi = PI * p.rho2;
                let cot = 1.0 / (PI * p.rho1).tan();
                let c = phi.sin() * cot;
                Ok(Complex64::from_polar(c + (c * c + 1.0).sqrt(), phi))
            }
            ClosedForm::None => self.z_from_slope_newton(rho),
        }
    }

    /// Newton iteration on `u = log z` for the slope equations. Used for
    /// models without a closed form, and as an independent check on the
    /// closed forms.
    pub fn z_from_slope_newton(&self, rho: Slope) -> Result<Complex64> {
        if !(self.polygon.edge_distance(rho) > 0.0) {
            return Err(Error::OutsidePolygon(rho.rho1, rho.rho2));
        }
        let target = rho.as_array();
        let p = self.principal_slope(rho);
        let ansatz = ((PI * p.rho1).sin() / (PI * (p.rho1 + p.rho2)).sin()).abs();
        let mut u = [
            if ansatz.is_finite() && ansatz > 0.0 {
                ansatz.ln().clamp(-5.0, 5.0)
            } else {
                0.0
            },
            (PI * p.rho2).clamp(1e-3, PI - 1e-3),
        ];
        let residual = |u: [f64; 2]| -> Result<[f64; 2]> {
            let s = self.slope_from_z(Complex64::from_polar(u[0].exp(), u[1]))?;
            Ok([s.rho1 - target[0], s.rho2 - target[1]])
        };
        let mut r = residual(u)?;
        for _ in 0..Z_NEWTON_MAX_ITER {
            if r[0].hypot(r[1]) < Z_NEWTON_TOL {
                return Ok(Complex64::from_polar(u[0].exp(), u[1]));
            }
            let z = Complex64::from_polar(u[0].exp(), u[1]);
            let g = self.log_slope(z, self.solve_w(z)?);
            // d rho / d (Re u, Im u) = [[-Im g, -Re g], [0, 1]] / pi
            let a = -g.im / PI;
            let b = -g.re / PI;
            let d = 1.0 / PI;
            if a.abs() < 1e-300 {
                break;
            }
            let du1 = -r[1] / d;
            let du0 = (-r[0] - b * du1) / a;
            let mut step = [du0.clamp(-2.0, 2.0), du1];
            let norm0 = r[0].hypot(r[1]);
            let mut accepted = false;
            for _ in 0..60 {
                let cand = [u[0] + step[0], u[1] + step[1]];
                if cand[1] > 0.0 && cand[1] < PI {
                    if let Ok(rc) = residual(cand) {
                        if rc[0].hypot(rc[1]) < norm0 {
                            u = cand;
                            r = rc;
                            accepted = true;
                            break;
                        }
                    }
                }
                step = [0.5 * step[0], 0.5 * step[1]];
            }
            if !accepted {
                break;
            }
        }
        if r[0].hypot(r[1]) < Z_NEWTON_TOL {
            return Ok(Complex64::from_polar(u[0].exp(), u[1]));
        }
        Err(Error::NonConvergence {
            what: "z_from_slope Newton",
            iterations: Z_NEWTON_MAX_ITER,
            residual: r[0].hypot(r[1]),
        })
    }

    pub fn is_liquid(&self, rho: Slope, margin: f64) -> bool {
        let off_integer = |x: f64| (x - x.round()).abs() >= margin;
        rho.rho1.is_finite()
            && rho.rho2.is_finite()
            && self.polygon.edge_distance(rho) >= margin
            && off_integer(rho.rho1)
            && off_integer(rho.rho2)
    }

    /// Jacobian of `u = log z -> rho`, rows `rho1, rho2`, columns `Re u, Im u`.
    pub fn slope_jacobian(&self, z: Complex64) -> Result<[[f64; 2]; 2]> {
        let g = self.log_slope(z, self.solve_w(z)?);
        Ok([[-g.im / PI, -g.re / PI], [0.0, 1.0 / PI]])
    }

    /// Slope derivatives of `log|z|`, `log|w|` and of the complex logarithms
    /// `log z`, `log w` along the inverse z-map, by central differences.
    pub fn log_derivatives(&self, rho: Slope, step: f64) -> Result<LogDerivatives> {
        let mut out = LogDerivatives::default();
        for k in 0..2 {
            let shifted = |sign: f64| -> Result<(Complex64, Complex64)> {
                let mut r = rho.as_array();
                r[k] += sign * step;
                let z = self.z_from_slope(Slope::from(r))?;
                Ok((z, self.solve_w(z)?))
            };
            let (zp, wp) = shifted(1.0)?;
            let (zm, wm) = shifted(-1.0)?;
            let h2 = 2.0 * step;
            out.dlog_abs_z[k] = (zp.norm().ln() - zm.norm().ln()) / h2;
            out.dlog_abs_w[k] = (wp.norm().ln() - wm.norm().ln()) / h2;
            // The ratio stays near 1, so its principal logarithm follows the branch.
            out.dlog_z[k] = (zp / zm).ln() / h2;
            out.dlog_w[k] = (wp / wm).ln() / h2;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogDerivatives {
    pub dlog_abs_z: [f64; 2],
    pub dlog_abs_w: [f64; 2],
    pub dlog_z: [Complex64; 2],
    pub dlog_w: [Complex64; 2],
}

impl LogDerivatives {
    /// `|d2 log|z| - d1 log|w||`.
    pub fn symmetry_residual(&self) -> f64 {
        (self.dlog_abs_z[1] - self.dlog_abs_w[0]).abs()
    }

    /// Residuals of the four relations between `log|.|` and `log(.)`
    /// derivatives: `d1 log|z| = d1 log z`, `d2 log|z| = d2 log z - i pi`,
    /// `d1 log|w| = d1 log w + i pi`, `d2 log|w| = d2 log w`.
    pub fn branch_residuals(&self) -> [f64; 4] {
        let ipi = Complex64::new(0.0, PI);
        [
            (self.dlog_abs_z[0] - self.dlog_z[0]).norm(),
            (self.dlog_abs_z[1] - (self.dlog_z[1] - ipi)).norm(),
            (self.dlog_abs_w[0] - (self.dlog_w[0] + ipi)).norm(),
            (self.dlog_abs_w[1] - self.dlog_w[1]).norm(),
        ]
    }
}
