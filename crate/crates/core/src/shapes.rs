//! Equilibrium shapes: the Euler-Lagrange residual `L[h]`, a variational
//! minimiser of the discrete surface-tension energy, implicit solutions of
//! the complex Burgers equation, and the residual `Delta = z w_x2 + w z_x1`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dimer::{DimerModel, Slope, DEFAULT_MARGIN};
use crate::error::{Error, Result};
use crate::fd::{self, Mat2};
use crate::grid::{
    central_gradient, central_gradient4, central_hessian, ComplexField, Field, GridGeometry,
    HeightField, RealField,
};
use crate::surface_tension::{sigma_hessian_at_z, sigma_zmap, SigmaRoute};

/// An analytic function with its derivative.
pub trait AnalyticFn: Send + Sync {
    fn value(&self, z: Complex64) -> Complex64;
    fn derivative(&self, z: Complex64) -> Complex64;
}

/// `C(z) = a + b z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineC {
    pub a: Complex64,
    pub b: Complex64,
}

impl AffineC {
    pub fn constant(a: Complex64) -> Self {
        AffineC { a, b: Complex64::new(0.0, 0.0) }
    }

    /// `const-i`, `const:<re>,<im>` or `affine:<a>,<b>` (real `a`, `b`).
    pub fn parse(spec: &str) -> Result<Self> {
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad number `{p}` in C = `{spec}`")))
                })
                .collect()
        };
        if spec == "const-i" {
            return Ok(AffineC::constant(Complex64::new(0.0, 1.0)));
        }
        if let Some(rest) = spec.strip_prefix("const:") {
            if let [re, im] = nums(rest)?[..] {
                return Ok(AffineC::constant(Complex64::new(re, im)));
            }
        }
        if let Some(rest) = spec.strip_prefix("affine:") {
            if let [a, b] = nums(rest)?[..] {
                return Ok(AffineC { a: a.into(), b: b.into() });
            }
        }
        Err(Error::InvalidArgument(format!("unknown C(z) `{spec}`")))
    }
}

impl AnalyticFn for AffineC {
    fn value(&self, z: Complex64) -> Complex64 {
        self.a + self.b * z
    }
    fn derivative(&self, _z: Complex64) -> Complex64 {
        self.b
    }
}

impl fmt::Display for AffineC {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C(z) = ({}) + ({}) z", self.a, self.b)
    }
}

/// `L[h]` and `|D^2 h|_F` at interior nodes; the Burgers residual when known.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualField {
    pub el: RealField,
    pub hessian_norm: RealField,
    pub burgers: Option<ComplexField>,
}

impl ResidualField {
    pub fn max_el(&self) -> f64 {
        self.el.max_abs(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElOptions {
    pub margin: f64,
    pub route: SigmaRoute,
}

impl Default for ElOptions {
    fn default() -> Self {
        ElOptions {
            margin: DEFAULT_MARGIN,
            route: SigmaRoute::ZMap,
        }
    }
}

fn interior_slope(model: &DimerModel, h: &HeightField, i: usize, j: usize, margin: f64) -> Result<Slope> {
    let g = central_gradient(h, i, j);
    let rho = Slope::new(g[0], g[1]);
    if !model.is_liquid(rho, margin) {
        return Err(Error::NonLiquidNode { i, j, rho1: g[0], rho2: g[1] });
    }
    Ok(rho)
}

/// `L[h] = sum sigma_ij(grad h) d_ij h` by central differences, boundary
/// ring excluded.
pub fn el_residual(h: &HeightField, model: &DimerModel, opts: &ElOptions) -> Result<ResidualField> {
    let g = h.geometry;
    let rows: Vec<Result<Vec<(f64, f64, bool)>>> = (0..g.n1)
        .into_par_iter()
        .map(|i| {
            (0..g.n2)
                .map(|j| {
                    if !h.stencil_valid(i, j) {
                        return Ok((0.0, 0.0, false));
                    }
                    let rho = interior_slope(model, h, i, j, opts.margin)?;
                    let sigma = opts.route.hessian(model, rho)?.sigma;
                    let d2 = central_hessian(h, i, j);
                    let l = contract(&sigma, &d2);
                    Ok((l, fd::frobenius2(&d2), true))
                })
                .collect()
        })
        .collect();
    let mut el = Field::filled(g, 0.0);
    let mut norm = Field::filled(g, 0.0);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, (l, n, ok)) in row?.into_iter().enumerate() {
            el.set(i, j, l);
            norm.set(i, j, n);
            if !ok {
                el.mask(i, j);
                norm.mask(i, j);
            }
        }
    }
    Ok(ResidualField { el, hessian_norm: norm, burgers: None })
}

pub(crate) fn contract(a: &Mat2, b: &Mat2) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

pub fn affine_height(geometry: GridGeometry, rho: Slope, offset: f64) -> HeightField {
    Field::from_fn(geometry, |x| offset + rho.rho1 * x[0] + rho.rho2 * x[1])
}

// ---------------------------------------------------------------------------
// Variational construction.

/// One corner triangle of a cell: the gradient is
/// `((h[p1] - h[m1]) / dx1, (h[p2] - h[m2]) / dx2)`.
#[derive(Clone, Copy, Debug)]
struct Corner {
    p1: usize,
    m1: usize,
    p2: usize,
    m2: usize,
}

fn corners(g: &GridGeometry) -> Vec<Corner> {
    let mut out = Vec::with_capacity(4 * (g.n1 - 1) * (g.n2 - 1));
    for i in 0..g.n1 - 1 {
        for j in 0..g.n2 - 1 {
            let a = g.index(i, j);
            let b = g.index(i + 1, j);
            let c = g.index(i, j + 1);
            let d = g.index(i + 1, j + 1);
            out.push(Corner { p1: b, m1: a, p2: c, m2: a });
            out.push(Corner { p1: b, m1: a, p2: d, m2: b });
            out.push(Corner { p1: d, m1: c, p2: c, m2: a });
            out.push(Corner { p1: d, m1: c, p2: d, m2: b });
        }
    }
    out
}

impl Corner {
    fn gradient(&self, h: &[f64], dx: [f64; 2]) -> [f64; 2] {
        [(h[self.p1] - h[self.m1]) / dx[0], (h[self.p2] - h[self.m2]) / dx[1]]
    }

    fn scatter(&self, out: &mut [f64], s: [f64; 2], dx: [f64; 2], weight: f64) {
        out[self.p1] += weight * s[0] / dx[0];
        out[self.m1] -= weight * s[0] / dx[0];
        out[self.p2] += weight * s[1] / dx[1];
        out[self.m2] -= weight * s[1] / dx[1];
    }
}

/// Discrete energy `sum_corners sigma(grad h) dx1 dx2 / 4`; every cell is
/// covered twice by its four corner triangles.
pub fn surface_energy(h: &HeightField, model: &DimerModel) -> Result<f64> {
    let g = h.geometry;
    let weight = 0.25 * g.cell_area();
    corners(&g)
        .par_iter()
        .map(|c| {
            let d = c.gradient(&h.values, g.spacing);
            sigma_zmap(model, Slope::new(d[0], d[1])).map(|s| weight * s)
        })
        .sum()
}

/// `grad sigma` and `D^2 sigma` from the z-map.
fn sigma_derivatives(model: &DimerModel, rho: Slope) -> Result<([f64; 2], Mat2)> {
    let z = model.z_from_slope(rho)?;
    let w = model.solve_w(z)?;
    let sign = model.chart_sign();
    let grad = [sign[0] * z.norm().ln(), sign[1] * w.norm().ln()];
    Ok((grad, sigma_hessian_at_z(model, z)?.sigma))
}

struct Linearization {
    gradient: Vec<f64>,
    sigmas: Vec<Mat2>,
}

fn linearize(
    model: &DimerModel,
    h: &[f64],
    g: &GridGeometry,
    corners: &[Corner],
    margin: f64,
) -> Result<Linearization> {
    let weight = 0.25 * g.cell_area();
    let local: Vec<([f64; 2], Mat2)> = corners
        .par_iter()
        .map(|c| {
            let d = c.gradient(h, g.spacing);
            let rho = Slope::new(d[0], d[1]);
            if !model.is_liquid(rho, margin) {
                let (i, j) = g.coords(c.m1);
                return Err(Error::NonLiquidNode { i, j, rho1: d[0], rho2: d[1] });
            }
            sigma_derivatives(model, rho)
        })
        .collect::<Result<_>>()?;
    let mut gradient = vec![0.0; g.len()];
    let mut sigmas = Vec::with_capacity(local.len());
    for (c, (s, m)) in corners.iter().zip(local) {
        c.scatter(&mut gradient, s, g.spacing, weight);
        sigmas.push(m);
    }
    Ok(Linearization { gradient, sigmas })
}

fn hessian_apply(v: &[f64], g: &GridGeometry, corners: &[Corner], sigmas: &[Mat2], out: &mut [f64]) {
    let weight = 0.25 * g.cell_area();
    out.iter_mut().for_each(|x| *x = 0.0);
    for (c, m) in corners.iter().zip(sigmas) {
        let d = c.gradient(v, g.spacing);
        let s = [m[0][0] * d[0] + m[0][1] * d[1], m[1][0] * d[0] + m[1][1] * d[1]];
        c.scatter(out, s, g.spacing, weight);
    }
}

fn hessian_diagonal(g: &GridGeometry, corners: &[Corner], sigmas: &[Mat2]) -> Vec<f64> {
    let weight = 0.25 * g.cell_area();
    let mut diag = vec![0.0; g.len()];
    for (c, m) in corners.iter().zip(sigmas) {
        for node in [c.p1, c.m1, c.p2, c.m2] {
            let a = (node == c.p1) as i32 - (node == c.m1) as i32;
            let b = (node == c.p2) as i32 - (node == c.m2) as i32;
            let v = [a as f64 / g.spacing[0], b as f64 / g.spacing[1]];
            // Each distinct node is visited once per occurrence; divide by
            // the multiplicity so it is counted once.
            let mult = [c.p1, c.m1, c.p2, c.m2].iter().filter(|&&n| n == node).count() as f64;
            diag[node] += weight
                * (m[0][0] * v[0] * v[0] + 2.0 * m[0][1] * v[0] * v[1] + m[1][1] * v[1] * v[1])
                / mult;
        }
    }
    diag
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    /// Convergence when `|grad E| / (dx1 dx2)` (Euclidean norm over interior
    /// nodes) drops below this; `None` means `1e-8 * interior nodes`.
    pub tolerance: Option<f64>,
    pub max_newton: usize,
    pub max_cg: usize,
    pub margin: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            tolerance: None,
            max_newton: 50,
            max_cg: 5000,
            margin: DEFAULT_MARGIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimized {
    pub field: HeightField,
    pub newton_iterations: usize,
    pub gradient_norm: f64,
}

/// Transfinite (Coons) interpolation of the boundary ring.
pub fn coons_patch(boundary: &HeightField) -> HeightField {
    let g = boundary.geometry;
    let (n1, n2) = (g.n1 - 1, g.n2 - 1);
    let mut h = boundary.clone();
    for i in 1..n1 {
        for j in 1..n2 {
            let s = i as f64 / n1 as f64;
            let t = j as f64 / n2 as f64;
            let b = &boundary;
            let v = (1.0 - s) * b.get(0, j) + s * b.get(n1, j) + (1.0 - t) * b.get(i, 0) + t * b.get(i, n2)
                - (1.0 - s) * (1.0 - t) * b.get(0, 0)
                - s * (1.0 - t) * b.get(n1, 0)
                - (1.0 - s) * t * b.get(0, n2)
                - s * t * b.get(n1, n2);
            h.set(i, j, v);
        }
    }
    h.valid.iter_mut().for_each(|v| *v = true);
    h
}

/// Damped Newton on the interior nodes with the boundary ring of
/// `boundary` held fixed; linear systems by Jacobi-preconditioned CG.
pub fn minimize_surface_tension(
    model: &DimerModel,
    boundary: &HeightField,
    opts: &MinimizeOptions,
) -> Result<Minimized> {
    let g = boundary.geometry;
    if let Some(k) = (0..g.len()).find(|&k| {
        let (i, j) = g.coords(k);
        g.is_boundary(i, j) && !boundary.valid[k]
    }) {
        let (i, j) = g.coords(k);
        return Err(Error::MaskedNode { i, j });
    }
    let corners = corners(&g);
    let interior: Vec<bool> = (0..g.len())
        .map(|k| {
            let (i, j) = g.coords(k);
            !g.is_boundary(i, j)
        })
        .collect();
    let area = g.cell_area();
    let tolerance = opts.tolerance.unwrap_or(1e-8 * g.interior_count() as f64);
    let norm = |v: &[f64]| -> f64 {
        v.iter()
            .zip(&interior)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x * x)
            .sum::<f64>()
            .sqrt()
            / area
    };

    let mut h = coons_patch(boundary);
    let mut lin = linearize(model, &h.values, &g, &corners, opts.margin)
        .map_err(|e| Error::NonLiquidBoundary(format!("initial interpolant: {e}")))?;
    let mut gnorm = norm(&lin.gradient);
    let mut iterations = 0;
    while gnorm >= tolerance {
        if iterations == opts.max_newton {
            return Err(Error::NonConvergence {
                what: "surface-tension minimisation",
                iterations,
                residual: gnorm,
            });
        }
        iterations += 1;
        let rhs: Vec<f64> = lin.gradient.iter().zip(&interior).map(|(x, &m)| if m { -x } else { 0.0 }).collect();
        let step = pcg(&g, &corners, &lin.sigmas, &interior, &rhs, opts.max_cg);
        let mut alpha = 1.0;
        let mut halvings = 0;
        loop {
            let trial: Vec<f64> = h.values.iter().zip(&step).map(|(a, d)| a + alpha * d).collect();
            if let Ok(next) = linearize(model, &trial, &g, &corners, opts.margin) {
                let next_norm = norm(&next.gradient);
                if next_norm < (1.0 - 1e-4 * alpha) * gnorm || next_norm < tolerance {
                    h.values = trial;
                    lin = next;
                    gnorm = next_norm;
                    break;
                }
            }
            halvings += 1;
            if halvings > 40 {
                return Err(Error::LineSearch(halvings));
            }
            alpha *= 0.5;
        }
    }
    Ok(Minimized {
        field: h,
        newton_iterations: iterations,
        gradient_norm: gnorm,
    })
}

fn pcg(
    g: &GridGeometry,
    corners: &[Corner],
    sigmas: &[Mat2],
    interior: &[bool],
    rhs: &[f64],
    max_iter: usize,
) -> Vec<f64> {
    let n = rhs.len();
    let diag = hessian_diagonal(g, corners, sigmas);
    let precond = |r: &[f64]| -> Vec<f64> {
        r.iter()
            .zip(&diag)
            .zip(interior)
            .map(|((x, d), &m)| if m && *d > 0.0 { x / d } else { 0.0 })
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let r0 = dot(&r, &r).sqrt();
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        if dot(&r, &r).sqrt() <= 1e-13 * r0 || r0 == 0.0 {
            break;
        }
        hessian_apply(&p, g, corners, sigmas, &mut ap);
        for (v, &m) in ap.iter_mut().zip(interior) {
            if !m {
                *v = 0.0;
            }
        }
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        z = precond(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    x
}

/// `dE / dh` at every node (boundary entries included), for checking.
pub fn energy_gradient(h: &HeightField, model: &DimerModel, margin: f64) -> Result<Vec<f64>> {
    let g = h.geometry;
    Ok(linearize(model, &h.values, &g, &corners(&g), margin)?.gradient)
}

// ---------------------------------------------------------------------------
// Implicit Burgers solutions.

/// `x2 - k(z) x1 - C(z)` with `k = -z P_z / (w P_w)`.
fn implicit_relation(model: &DimerModel, c: &dyn AnalyticFn, x: [f64; 2], z: Complex64) -> Result<Complex64> {
    let w = model.solve_w(z)?;
    Ok(Complex64::new(x[1], 0.0) - model.log_slope(z, w) * x[0] - c.value(z))
}

fn implicit_derivative(model: &DimerModel, c: &dyn AnalyticFn, x: [f64; 2], z: Complex64) -> Result<Complex64> {
    let h = 1e-4 * z.norm().max(1e-2).min(z.im);
    let k = |s: f64| -> Result<Complex64> {
        let zz = z + Complex64::new(s * h, 0.0);
        Ok(model.log_slope(zz, model.solve_w(zz)?))
    };
    let dk = (8.0 * (k(1.0)? - k(-1.0)?) - (k(2.0)? - k(-2.0)?)) / (12.0 * h);
    Ok(-dk * x[0] - c.derivative(z))
}

const IMPLICIT_TOL: f64 = 1e-13;

enum NewtonOutcome {
    Root(Complex64),
    Fold(f64),
    Lost,
}

fn implicit_newton(model: &DimerModel, c: &dyn AnalyticFn, x: [f64; 2], guess: Complex64) -> NewtonOutcome {
    let mut z = guess;
    let scale = 1.0 + x[0].abs() + x[1].abs();
    for _ in 0..60 {
        if !(z.im > 0.0) || !z.re.is_finite() {
            return NewtonOutcome::Lost;
        }
        let (f, df) = match (implicit_relation(model, c, x, z), implicit_derivative(model, c, x, z)) {
            (Ok(f), Ok(df)) => (f, df),
            _ => return NewtonOutcome::Lost,
        };
        if f.norm() < IMPLICIT_TOL * scale {
            if df.norm() < 1e-8 * scale {
                return NewtonOutcome::Fold(df.norm());
            }
            return NewtonOutcome::Root(z);
        }
        if df.norm() < 1e-14 * scale {
            return NewtonOutcome::Fold(df.norm());
        }
        let mut step = f / df;
        // Keep iterates in the upper half plane.
        while z.im - step.im <= 0.0 {
            step *= 0.5;
            if step.norm() < 1e-300 {
                return NewtonOutcome::Lost;
            }
        }
        z -= step;
    }
    NewtonOutcome::Lost
}

/// A root of the implicit relation at `x` found from a spread of starting
/// points in the upper half plane.
pub fn find_seed(model: &DimerModel, c: &dyn AnalyticFn, x: [f64; 2]) -> Result<Complex64> {
    for r in [1.0, 0.5, 2.0, 0.25, 4.0] {
        for k in 1..8 {
            let guess = Complex64::from_polar(r, std::f64::consts::PI * k as f64 / 8.0);
            if let NewtonOutcome::Root(z) = implicit_newton(model, c, x, guess) {
                return Ok(z);
            }
        }
    }
    Err(Error::SeedInconsistency(format!("no root of the implicit relation found at x = {x:?}")))
}

/// Solves `x2 - k(z) x1 = C(z)` node by node, continuing from the seed at
/// the grid origin. Nodes where Newton leaves the upper half plane, fails,
/// or jumps branch are masked.
pub fn solve_burgers_implicit(
    model: &DimerModel,
    c: &dyn AnalyticFn,
    geometry: GridGeometry,
    seed: Complex64,
) -> Result<ComplexField> {
    let origin = geometry.point(0, 0);
    let residual = implicit_relation(model, c, origin, seed)
        .map_err(|e| Error::SeedInconsistency(e.to_string()))?;
    if !(seed.im > 0.0) || residual.norm() > 1e-6 * (1.0 + origin[0].abs() + origin[1].abs()) {
        return Err(Error::SeedInconsistency(format!(
            "seed {seed} leaves residual {:e} at the origin {origin:?}",
            residual.norm()
        )));
    }
    let mut zf = Field::filled(geometry, seed);
    zf.valid.iter_mut().for_each(|v| *v = false);
    for i in 0..geometry.n1 {
        for j in 0..geometry.n2 {
            let guess = if i == 0 && j == 0 {
                Some(seed)
            } else {
                [(i.wrapping_sub(1), j), (i, j.wrapping_sub(1))]
                    .into_iter()
                    .find(|&(a, b)| a < geometry.n1 && b < geometry.n2 && zf.is_valid(a, b))
                    .map(|(a, b)| zf.get(a, b))
            };
            let Some(guess) = guess else { continue };
            match implicit_newton(model, c, geometry.point(i, j), guess) {
                NewtonOutcome::Root(z) => {
                    let jump = (z.arg() - guess.arg()).abs();
                    if jump < FRAC_PI_2 {
                        zf.set(i, j, z);
                        let k = geometry.index(i, j);
                        zf.valid[k] = true;
                    }
                }
                NewtonOutcome::Fold(df) => {
                    return Err(Error::ContinuationBreakdown {
                        i,
                        j,
                        reason: format!("fold of the implicit relation (|dF/dz| = {df:e})"),
                    })
                }
                NewtonOutcome::Lost => {}
            }
        }
    }
    if !zf.is_valid(0, 0) {
        return Err(Error::SeedInconsistency(format!("Newton did not polish the seed {seed}")));
    }
    Ok(zf)
}

/// Residual of the implicit relation at every valid node.
pub fn implicit_residual(model: &DimerModel, c: &dyn AnalyticFn, zf: &ComplexField) -> Result<f64> {
    let g = zf.geometry;
    let mut worst: f64 = 0.0;
    for (i, j, z) in zf.iter_inside(0) {
        worst = worst.max(implicit_relation(model, c, g.point(i, j), z)?.norm());
    }
    Ok(worst)
}

/// Node-wise slopes `(-arg w, arg z) / pi`.
pub fn slope_field(model: &DimerModel, zf: &ComplexField) -> Result<Field<[f64; 2]>> {
    let mut out = Field::filled(zf.geometry, [0.0, 0.0]);
    out.valid = zf.valid.clone();
    for (k, z) in zf.values.iter().enumerate() {
        if zf.valid[k] {
            let rho = model.slope_from_z(*z)?;
            out.values[k] = rho.as_array();
        }
    }
    Ok(out)
}

/// Trapezoidal loop integral of the slope field around every plaquette.
pub fn plaquette_curl(slopes: &Field<[f64; 2]>) -> RealField {
    let g = slopes.geometry;
    let [dx1, dx2] = g.spacing;
    let mut curl = Field::filled(g, 0.0);
    for i in 0..g.n1 {
        for j in 0..g.n2 {
            if i + 1 == g.n1 || j + 1 == g.n2 {
                curl.mask(i, j);
                continue;
            }
            let r = |a: usize, b: usize| slopes.get(a, b);
            let loop_sum = 0.5 * dx1 * (r(i, j)[0] + r(i + 1, j)[0])
                + 0.5 * dx2 * (r(i + 1, j)[1] + r(i + 1, j + 1)[1])
                - 0.5 * dx1 * (r(i, j + 1)[0] + r(i + 1, j + 1)[0])
                - 0.5 * dx2 * (r(i, j)[1] + r(i, j + 1)[1]);
            curl.set(i, j, loop_sum);
        }
    }
    curl
}

pub const CURL_TOLERANCE: f64 = 1e-6;

/// Integrates `grad h = (-arg w, arg z) / pi` along the first row, then up
/// every column, with `h = 0` at the origin node.
pub fn height_from_zfield(model: &DimerModel, zf: &ComplexField) -> Result<HeightField> {
    let g = zf.geometry;
    if let Some(k) = zf.valid.iter().position(|v| !v) {
        let (i, j) = g.coords(k);
        return Err(Error::MaskedNode { i, j });
    }
    if !zf.is_branch_consistent() {
        return Err(Error::InvalidArgument("z field is not branch-consistent".into()));
    }
    let slopes = slope_field(model, zf)?;
    let tolerance = CURL_TOLERANCE * g.max_spacing();
    let curl = plaquette_curl(&slopes);
    for (i, j, c) in curl.iter_inside(0) {
        if c.abs() >= tolerance {
            return Err(Error::CurlInconsistency { i, j, closure: c, tolerance });
        }
    }
    let [dx1, dx2] = g.spacing;
    let mut h = Field::filled(g, 0.0);
    for i in 1..g.n1 {
        let v = h.get(i - 1, 0) + 0.5 * dx1 * (slopes.get(i - 1, 0)[0] + slopes.get(i, 0)[0]);
        h.set(i, 0, v);
    }
    for i in 0..g.n1 {
        for j in 1..g.n2 {
            let v = h.get(i, j - 1) + 0.5 * dx2 * (slopes.get(i, j - 1)[1] + slopes.get(i, j)[1]);
            h.set(i, j, v);
        }
    }
    Ok(h)
}

/// `Delta = z w_x2 + w z_x1` by central differences at interior nodes.
pub fn burgers_residual(zf: &ComplexField, model: &DimerModel) -> Result<ComplexField> {
    let g = zf.geometry;
    let mut w = zf.clone();
    for (k, z) in zf.values.iter().enumerate() {
        if zf.valid[k] {
            w.values[k] = model.solve_w(*z)?;
        }
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut out = Field::filled(g, zero);
    for i in 0..g.n1 {
        for j in 0..g.n2 {
            if !zf.stencil_valid(i, j) {
                out.mask(i, j);
                continue;
            }
            let dz = central_gradient(zf, i, j);
            let dw = central_gradient(&w, i, j);
            out.set(i, j, zf.get(i, j) * dw[1] + w.get(i, j) * dz[0]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RatioViolationKind {
    /// `|Im(z_x2 / z_x1)|` at or below `1e-8`.
    Real,
    /// Differs from `w P_w / (z P_z)` by more than `1e-6`.
    Mismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioViolation {
    pub i: usize,
    pub j: usize,
    pub ratio: Complex64,
    pub expected: Complex64,
    pub kind: RatioViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlopeRatioReport {
    pub checked: usize,
    /// Nodes with `|z_x1| <= 1e-10`.
    pub skipped: usize,
    pub min_abs_im: f64,
    pub max_mismatch: f64,
    pub violations: Vec<RatioViolation>,
}

impl SlopeRatioReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// On a Burgers solution `z_x2 / z_x1 = w P_w / (z P_z)`, which is not real.
/// Derivatives use fourth-order stencils, so two boundary rings are skipped.
pub fn check_slope_ratio_nonreal(zf: &ComplexField, model: &DimerModel) -> Result<SlopeRatioReport> {
    let g = zf.geometry;
    let mut report = SlopeRatioReport { min_abs_im: f64::INFINITY, ..Default::default() };
    for i in 2..g.n1.saturating_sub(2) {
        for j in 2..g.n2.saturating_sub(2) {
            let ok = (i - 2..=i + 2).all(|a| zf.is_valid(a, j)) && (j - 2..=j + 2).all(|b| zf.is_valid(i, b));
            if !ok {
                continue;
            }
            let d = central_gradient4(zf, i, j);
            if d[0].norm() <= 1e-10 {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let z = zf.get(i, j);
            let w = model.solve_w(z)?;
            let ratio = d[1] / d[0];
            let expected = -1.0 / model.log_slope(z, w);
            let mismatch = (ratio - expected).norm();
            report.min_abs_im = report.min_abs_im.min(ratio.im.abs());
            report.max_mismatch = report.max_mismatch.max(mismatch);
            let mut flag = |kind| report.violations.push(RatioViolation { i, j, ratio, expected, kind });
            if ratio.im.abs() <= 1e-8 {
                flag(RatioViolationKind::Real);
            }
            if mismatch > 1e-6 {
                flag(RatioViolationKind::Mismatch);
            }
        }
    }
    if report.checked == 0 {
        report.min_abs_im = 0.0;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ready-made shapes.

/// How an initial height profile is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ShapeRecipe {
    Affine { rho: [f64; 2] },
    Burgers { c: String },
}

impl ShapeRecipe {
    /// `affine:<rho1>,<rho2>` or `burgers:<C spec>` (e.g. `burgers:const-i`).
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("affine:") {
            let v: Vec<f64> = rest
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidArgument(format!("bad slope in shape `{spec}`")))?;
            if let [a, b] = v[..] {
                return Ok(ShapeRecipe::Affine { rho: [a, b] });
            }
        }
        if let Some(rest) = spec.strip_prefix("burgers:") {
            AffineC::parse(rest)?;
            return Ok(ShapeRecipe::Burgers { c: rest.to_string() });
        }
        Err(Error::InvalidArgument(format!("unknown shape `{spec}`")))
    }
}

/// An equilibrium shape with the z field it came from (if any).
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub height: HeightField,
    pub z: Option<ComplexField>,
}

pub fn build_shape(model: &DimerModel, recipe: &ShapeRecipe, geometry: GridGeometry) -> Result<Shape> {
    match recipe {
        ShapeRecipe::Affine { rho } => {
            let rho = Slope::new(rho[0], rho[1]);
            let z = model.z_from_slope(rho)?;
            Ok(Shape {
                height: affine_height(geometry, rho, 0.0),
                z: Some(Field::filled(geometry, z)),
            })
        }
        ShapeRecipe::Burgers { c } => {
            let c = AffineC::parse(c)?;
            let seed = find_seed(model, &c, geometry.point(0, 0))?;
            let zf = solve_burgers_implicit(model, &c, geometry, seed)?;
            let height = height_from_zfield(model, &zf)?;
            Ok(Shape { height, z: Some(zf) })
        }
    }
}

/// Default extent for Burgers shapes: `x1 in [1, 1.5]`, `x2 in [-0.25, 0.25]`.
pub const BURGERS_EXTENT: ([f64; 2], [f64; 2]) = ([1.0, -0.25], [1.5, 0.25]);

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn burgers_geometry(n: usize) -> GridGeometry {
        GridGeometry::from_extent(n, n, BURGERS_EXTENT.0, BURGERS_EXTENT.1).unwrap()
    }

    fn const_i() -> AffineC {
        AffineC::constant(c(0.0, 1.0))
    }

    #[test]
    fn affine_heights_have_zero_residual() {
        let g = GridGeometry::from_extent(9, 9, [0.0, 0.0], [1.0, 1.0]).unwrap();
        for (model, rho) in [(DimerModel::honeycomb(), Slope::new(0.3, 0.25)), (DimerModel::square(), Slope::new(0.4, 0.7))] {
            let r = el_residual(&affine_height(g, rho, 0.5), &model, &ElOptions::default()).unwrap();
            assert!(r.max_el() < 1e-10, "{}", r.max_el());
            assert!(r.hessian_norm.max_abs(1) < 1e-9);
            assert!(!r.el.is_valid(0, 3));
        }
    }

    #[test]
    fn non_minimising_perturbation_has_residual() {
        let g = GridGeometry::from_extent(9, 9, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let h = Field::from_fn(g, |x| 0.3 * x[0] + 0.3 * x[1] + 0.05 * x[0] * x[0]);
        let r = el_residual(&h, &DimerModel::honeycomb(), &ElOptions::default()).unwrap();
        assert!(r.el.iter_inside(1).all(|(_, _, v)| v.abs() > 1e-3));
    }

    #[test]
    fn non_liquid_slope_reports_node() {
        let g = GridGeometry::from_extent(5, 5, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let h = affine_height(g, Slope::new(0.7, 0.7), 0.0);
        let err = el_residual(&h, &DimerModel::honeycomb(), &ElOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonLiquidNode { i: 1, j: 1, .. }), "{err}");
    }

    #[test]
    fn const_i_node_value() {
        let hc = DimerModel::honeycomb();
        let g = GridGeometry::from_extent(3, 3, [1.0, 0.0], [1.1, 0.1]).unwrap();
        let seed = find_seed(&hc, &const_i(), [1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(seed.re, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(seed.im, 0.5, epsilon = 1e-12);
        let zf = solve_burgers_implicit(&hc, &const_i(), g, seed).unwrap();
        assert!((zf.get(0, 0) - c(0.5, 0.5)).norm() < 1e-12);
        assert!(zf.all_valid() && zf.is_branch_consistent());
    }

    #[test]
    fn implicit_relation_holds_everywhere() {
        // On the square grid the roots for C = i sit in the lower half plane,
        // and C = -c i folds at z = i, x = (c, 0).
        let square_c = AffineC::constant(c(0.0, -0.5));
        for (model, cf) in [(DimerModel::honeycomb(), const_i()), (DimerModel::square(), square_c)] {
            let g = burgers_geometry(17);
            let seed = find_seed(&model, &cf, g.point(0, 0)).unwrap();
            let zf = solve_burgers_implicit(&model, &cf, g, seed).unwrap();
            assert!(zf.all_valid(), "{}", model.name());
            assert!(implicit_residual(&model, &cf, &zf).unwrap() < 1e-12);
            let delta = burgers_residual(&zf, &model).unwrap();
            assert!(delta.max_abs(1) < 1e-2, "{}: {}", model.name(), delta.max_abs(1));
        }
    }

    #[test]
    fn fold_is_reported() {
        let sq = DimerModel::square();
        let cf = AffineC::constant(c(0.0, -1.0));
        let g = burgers_geometry(17);
        let seed = find_seed(&sq, &cf, g.point(0, 0)).unwrap();
        let err = solve_burgers_implicit(&sq, &cf, g, seed).unwrap_err();
        assert!(matches!(err, Error::ContinuationBreakdown { .. }), "{err}");
    }

    #[test]
    fn bad_seed_is_rejected() {
        let hc = DimerModel::honeycomb();
        let err = solve_burgers_implicit(&hc, &const_i(), burgers_geometry(5), c(0.1, 2.0)).unwrap_err();
        assert!(matches!(err, Error::SeedInconsistency(_)));
    }

    #[test]
    fn constant_field_is_trivial() {
        let sq = DimerModel::square();
        let g = GridGeometry::from_extent(7, 7, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let zf = Field::filled(g, c(0.0, 1.0));
        assert!(burgers_residual(&zf, &sq).unwrap().max_abs(1) == 0.0);
        let h = height_from_zfield(&sq, &zf).unwrap();
        let expect = affine_height(g, Slope::new(0.5, 0.5), 0.0);
        for (a, b) in h.values.iter().zip(&expect.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        let report = check_slope_ratio_nonreal(&zf, &sq).unwrap();
        assert!(report.passed() && report.checked == 0 && report.skipped == 9);
        let r = el_residual(&h, &sq, &ElOptions::default()).unwrap();
        assert!(r.hessian_norm.max_abs(1) < 1e-12);
    }

    #[test]
    fn x1_only_field_has_surviving_term() {
        let hc = DimerModel::honeycomb();
        let g = GridGeometry::from_extent(7, 7, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let zf = Field::from_fn(g, |x| c(0.3 + 0.2 * x[0], 0.6));
        let delta = burgers_residual(&zf, &hc).unwrap();
        let (i, j) = (3, 3);
        let z = zf.get(i, j);
        let expected = (1.0 - z) * 0.2;
        assert!((delta.get(i, j) - expected).norm() < 1e-12);
    }

    #[test]
    fn burgers_heights_are_gradient_consistent() {
        let hc = DimerModel::honeycomb();
        let shape = build_shape(&hc, &ShapeRecipe::Burgers { c: "const-i".into() }, burgers_geometry(33)).unwrap();
        let zf = shape.z.unwrap();
        let curl = plaquette_curl(&slope_field(&hc, &zf).unwrap());
        assert!(curl.max_abs(0) < CURL_TOLERANCE * burgers_geometry(33).max_spacing());
        let report = check_slope_ratio_nonreal(&zf, &hc).unwrap();
        assert!(report.passed(), "{:?}", &report.violations[..report.violations.len().min(3)]);
        assert!(report.checked > 0 && report.min_abs_im > 1e-3);
    }

    #[test]
    fn scrambled_field_fails_curl_check() {
        let hc = DimerModel::honeycomb();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = burgers_geometry(9);
        let zf = Field::from_fn(g, |_| c(rng.gen_range(0.2..0.6), rng.gen_range(0.4..0.8)));
        assert!(matches!(height_from_zfield(&hc, &zf), Err(Error::CurlInconsistency { .. })));
    }

    #[test]
    fn honeycomb_ratio_is_w_over_z() {
        let hc = DimerModel::honeycomb();
        let z = c(0.3, 0.4);
        let w = hc.solve_w(z).unwrap();
        assert!((-1.0 / hc.log_slope(z, w) - w / z).norm() < 1e-15);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for model in [DimerModel::honeycomb(), DimerModel::square()] {
            let g = GridGeometry::from_extent(5, 5, [0.0, 0.0], [1.0, 1.0]).unwrap();
            let base = Slope::new(0.35, 0.3);
            let mut h = affine_height(g, base, 0.0);
            for v in h.values.iter_mut() {
                *v += rng.gen_range(-0.01..0.01);
            }
            let grad = energy_gradient(&h, &model, 1e-3).unwrap();
            for k in [6, 12, 18] {
                let step = 1e-5;
                let mut plus = h.clone();
                plus.values[k] += step;
                let mut minus = h.clone();
                minus.values[k] -= step;
                let fdv = (surface_energy(&plus, &model).unwrap() - surface_energy(&minus, &model).unwrap()) / (2.0 * step);
                assert!((fdv - grad[k]).abs() < 1e-6 * grad[k].abs().max(1e-3), "{}: {fdv} vs {}", model.name(), grad[k]);
            }
        }
    }

    #[test]
    fn minimiser_keeps_affine_boundary_affine() {
        let hc = DimerModel::honeycomb();
        let g = GridGeometry::from_extent(9, 9, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let rho = Slope::new(0.2, 0.45);
        let mut boundary = affine_height(g, rho, 0.1);
        // Scramble the interior: only the ring matters.
        for i in 1..8 {
            for j in 1..8 {
                boundary.set(i, j, 0.0);
            }
        }
        let out = minimize_surface_tension(&hc, &boundary, &MinimizeOptions::default()).unwrap();
        let exact = affine_height(g, rho, 0.1);
        for (a, b) in out.field.values.iter().zip(&exact.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn minimiser_bends_under_sinusoidal_boundary() {
        let hc = DimerModel::honeycomb();
        let g = GridGeometry::from_extent(17, 17, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let boundary = Field::from_fn(g, |x| {
            0.3 * x[0] + 0.3 * x[1] + 0.03 * (std::f64::consts::PI * x[0]).sin() * (1.0 + x[1])
        });
        let out = minimize_surface_tension(&hc, &boundary, &MinimizeOptions::default()).unwrap();
        let r = el_residual(&out.field, &hc, &ElOptions::default()).unwrap();
        assert!(r.hessian_norm.get(8, 8) > 1e-2);
        // Second order at the centre; the ring next to the boundary is only first order.
        assert!(r.el.get(8, 8).abs() < 1e-3, "{}", r.el.get(8, 8));
    }

    #[test]
    fn minimiser_rejects_non_liquid_boundary() {
        let hc = DimerModel::honeycomb();
        let g = GridGeometry::from_extent(5, 5, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let boundary = affine_height(g, Slope::new(0.8, 0.8), 0.0);
        let err = minimize_surface_tension(&hc, &boundary, &MinimizeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonLiquidBoundary(_)));
    }

    #[test]
    fn recipes_parse() {
        assert_eq!(ShapeRecipe::parse("affine:0.3,0.2").unwrap(), ShapeRecipe::Affine { rho: [0.3, 0.2] });
        assert!(ShapeRecipe::parse("burgers:const-i").is_ok());
        assert!(ShapeRecipe::parse("burgers:nope").is_err());
        assert_eq!(AffineC::parse("affine:1,2").unwrap().b, c(2.0, 0.0));
    }
}
