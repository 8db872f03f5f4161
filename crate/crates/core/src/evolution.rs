//! Growth `d_t h = v(grad h)`: exact transport along characteristics,
//! an explicit vanishing-viscosity scheme, and the diagnostics evaluated
//! along an evolution (`L[h(t)]`, `Delta(t)`, `R`, `d_t Delta`).

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dimer::{DimerModel, Slope};
use crate::error::{Error, Result};
use crate::fd::{self, Mat2};
use crate::grid::{central_gradient, central_hessian, laplacian5, ComplexField, Field, GridGeometry, HeightField};
use crate::shapes::{build_shape, burgers_residual, contract, el_residual, ElOptions, ShapeRecipe};
use crate::speed::{speed_hessian, SpeedFunction, DEFAULT_HESSIAN_STEP};
use crate::surface_tension::sigma_hessian_zmap;

/// Step for `Dv` by central differences.
pub const SPEED_GRADIENT_STEP: f64 = 1e-4;
const FOOT_TOL: f64 = 1e-11;
const FOOT_MAX_ITER: usize = 200;

/// A height profile that can be queried off the grid.
pub trait HeightProfile: Send + Sync {
    fn contains(&self, x: [f64; 2]) -> bool;
    fn value(&self, x: [f64; 2]) -> f64;
    fn gradient(&self, x: [f64; 2]) -> [f64; 2];
    fn hessian(&self, x: [f64; 2]) -> Mat2;
}

/// Coefficients (ascending powers) of the six degree-5 Lagrange basis
/// polynomials on the nodes `0..6`.
fn lagrange_basis() -> &'static [[f64; 6]; 6] {
    static BASIS: std::sync::OnceLock<[[f64; 6]; 6]> = std::sync::OnceLock::new();
    BASIS.get_or_init(|| {
        let mut out = [[0.0; 6]; 6];
        for (k, row) in out.iter_mut().enumerate() {
            let mut poly = vec![1.0];
            let mut denom = 1.0;
            for j in (0..6).filter(|&j| j != k) {
                // multiply by (s - j)
                let mut next = vec![0.0; poly.len() + 1];
                for (p, c) in poly.iter().enumerate() {
                    next[p + 1] += c;
                    next[p] -= j as f64 * c;
                }
                poly = next;
                denom *= k as f64 - j as f64;
            }
            for (p, c) in poly.iter().enumerate() {
                row[p] = c / denom;
            }
        }
        out
    })
}

/// Value, first and second derivative of each basis polynomial at `s`.
fn basis_at(s: f64) -> [[f64; 6]; 3] {
    let mut out = [[0.0; 6]; 3];
    for (k, c) in lagrange_basis().iter().enumerate() {
        let (mut p, mut dp, mut ddp) = (0.0, 0.0, 0.0);
        for n in (0..6).rev() {
            ddp = ddp * s + dp * 2.0;
            dp = dp * s + p;
            p = p * s + c[n];
        }
        out[0][k] = p;
        out[1][k] = dp;
        out[2][k] = ddp;
    }
    out
}

/// Tensor-product degree-5 Lagrange interpolation of a height field,
/// stencils shifted inward at the edges.
#[derive(Clone, Debug)]
pub struct GridInterpolant {
    field: HeightField,
}

impl GridInterpolant {
    pub fn new(field: &HeightField) -> Result<Self> {
        let g = field.geometry;
        if g.n1 < 6 || g.n2 < 6 {
            return Err(Error::InvalidArgument("interpolation needs at least 6x6 nodes".into()));
        }
        if let Some(k) = field.valid.iter().position(|v| !v) {
            let (i, j) = g.coords(k);
            return Err(Error::MaskedNode { i, j });
        }
        Ok(GridInterpolant { field: field.clone() })
    }

    pub fn field(&self) -> &HeightField {
        &self.field
    }

    /// `[value, d1, d2, d11, d12, d22]`.
    fn eval(&self, x: [f64; 2]) -> [f64; 6] {
        let g = &self.field.geometry;
        let locate = |d: usize, n: usize| {
            let s = (x[d] - g.origin[d]) / g.spacing[d];
            let base = (s.floor() as i64 - 2).clamp(0, n as i64 - 6) as usize;
            (base, basis_at(s - base as f64))
        };
        let (i0, b1) = locate(0, g.n1);
        let (j0, b2) = locate(1, g.n2);
        let mut out = [0.0; 6];
        for a in 0..6 {
            for b in 0..6 {
                let h = self.field.get(i0 + a, j0 + b);
                out[0] += h * b1[0][a] * b2[0][b];
                out[1] += h * b1[1][a] * b2[0][b];
                out[2] += h * b1[0][a] * b2[1][b];
                out[3] += h * b1[2][a] * b2[0][b];
                out[4] += h * b1[1][a] * b2[1][b];
                out[5] += h * b1[0][a] * b2[2][b];
            }
        }
        let [dx1, dx2] = g.spacing;
        [out[0], out[1] / dx1, out[2] / dx2, out[3] / (dx1 * dx1), out[4] / (dx1 * dx2), out[5] / (dx2 * dx2)]
    }
}

impl HeightProfile for GridInterpolant {
    fn contains(&self, x: [f64; 2]) -> bool {
        let g = &self.field.geometry;
        let hi = g.upper();
        let eps = 1e-12 * g.max_spacing();
        (0..2).all(|d| x[d] >= g.origin[d] - eps && x[d] <= hi[d] + eps)
    }
    fn value(&self, x: [f64; 2]) -> f64 {
        self.eval(x)[0]
    }
    fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        let e = self.eval(x);
        [e[1], e[2]]
    }
    fn hessian(&self, x: [f64; 2]) -> Mat2 {
        let e = self.eval(x);
        [[e[3], e[4]], [e[4], e[5]]]
    }
}

pub type ProfileFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
pub type ProfileGradFn = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// A closed-form profile defined on the whole plane; the Hessian is taken by
/// differencing the gradient.
#[derive(Clone)]
pub struct AnalyticProfile {
    value: ProfileFn,
    gradient: ProfileGradFn,
}

impl AnalyticProfile {
    pub fn new(
        value: impl Fn([f64; 2]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn([f64; 2]) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        AnalyticProfile {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    pub fn sample(&self, geometry: GridGeometry) -> HeightField {
        Field::from_fn(geometry, |x| (self.value)(x))
    }
}

impl HeightProfile for AnalyticProfile {
    fn contains(&self, _x: [f64; 2]) -> bool {
        true
    }
    fn value(&self, x: [f64; 2]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        (self.gradient)(x)
    }
    fn hessian(&self, x: [f64; 2]) -> Mat2 {
        let h = 1e-4;
        let d = |k: usize| {
            let mut p = x;
            let mut m = x;
            p[k] += h;
            m[k] -= h;
            let (gp, gm) = ((self.gradient)(p), (self.gradient)(m));
            [(gp[0] - gm[0]) / (2.0 * h), (gp[1] - gm[1]) / (2.0 * h)]
        };
        let (c1, c2) = (d(0), d(1));
        let off = 0.5 * (c1[1] + c2[0]);
        [[c1[0], off], [off, c2[1]]]
    }
}

/// Where the characteristic through a node started.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicPoint {
    pub foot: [f64; 2],
    pub rho0: Slope,
    pub speed: f64,
    pub dv: [f64; 2],
    pub height: f64,
}

/// Solves `x0 = x + t Dv(grad h0(x0))` by fixed-point iteration; `None` if
/// the foot leaves the profile's domain or its slope leaves the polygon.
pub fn trace_back(
    profile: &dyn HeightProfile,
    v: &SpeedFunction,
    x: [f64; 2],
    t: f64,
) -> Result<Option<CharacteristicPoint>> {
    let mut foot = x;
    let scale = 1.0 + x[0].abs() + x[1].abs();
    for _ in 0..FOOT_MAX_ITER {
        if !profile.contains(foot) {
            return Ok(None);
        }
        let rho = Slope::from(profile.gradient(foot));
        let dv = match v.gradient(rho, SPEED_GRADIENT_STEP) {
            Ok(dv) => dv,
            Err(_) => return Ok(None),
        };
        let next = [x[0] + t * dv[0], x[1] + t * dv[1]];
        let moved = (next[0] - foot[0]).abs() + (next[1] - foot[1]).abs();
        foot = next;
        if moved <= FOOT_TOL * scale {
            if !profile.contains(foot) {
                return Ok(None);
            }
            let rho0 = Slope::from(profile.gradient(foot));
            let dv = match v.gradient(rho0, SPEED_GRADIENT_STEP) {
                Ok(dv) => dv,
                Err(_) => return Ok(None),
            };
            let speed = v.eval(rho0)?;
            // h(x, t) = h0(x0) + grad h0(x0) . (x - x0) + t v(rho0)
            let height = profile.value(foot)
                + rho0.rho1 * (x[0] - foot[0])
                + rho0.rho2 * (x[1] - foot[1])
                + t * speed;
            return Ok(Some(CharacteristicPoint { foot, rho0, speed, dv, height }));
        }
    }
    Err(Error::NonConvergence {
        what: "characteristic foot point",
        iterations: FOOT_MAX_ITER,
        residual: f64::NAN,
    })
}

/// Foot points and transported data on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicBundle {
    pub feet: Field<[f64; 2]>,
    pub rho0: Field<[f64; 2]>,
    pub speed: Field<f64>,
    pub dv: Field<[f64; 2]>,
    /// First-crossing estimate `T_max` of the initial profile.
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicSolution {
    pub height: HeightField,
    pub bundle: CharacteristicBundle,
    /// Smallest determinant of the forward map `x0 -> x0 - t Dv`.
    pub min_jacobian: f64,
}

/// `T_max = 0.5 / max |spec(D^2 v(grad h0) D^2 h0)|` over the grid nodes.
pub fn characteristic_horizon(profile: &dyn HeightProfile, v: &SpeedFunction, geometry: GridGeometry) -> Result<f64> {
    let radii: Vec<f64> = (0..geometry.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = geometry.coords(k);
            let x = geometry.point(i, j);
            let rho = Slope::from(profile.gradient(x));
            let d2v = speed_hessian(v, rho, DEFAULT_HESSIAN_STEP)?.symmetric;
            Ok(fd::spectral_radius(&fd::mul2(&d2v, &profile.hessian(x))))
        })
        .collect::<Result<_>>()?;
    let worst = radii.into_iter().fold(0.0, f64::max);
    Ok(if worst > 0.0 { 0.5 / worst } else { f64::INFINITY })
}

/// Solution at time `t` on `geometry`; nodes whose foot leaves the profile
/// domain are masked. With `check_crossing`, fails where the forward map
/// loses monotonicity.
pub fn evolve_profile(
    profile: &dyn HeightProfile,
    v: &SpeedFunction,
    geometry: GridGeometry,
    t: f64,
    check_crossing: bool,
) -> Result<CharacteristicSolution> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative time {t}")));
    }
    let points: Vec<Option<(CharacteristicPoint, f64)>> = (0..geometry.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = geometry.coords(k);
            // The fixed-point map stops contracting only past the first crossing.
            let traced = match trace_back(profile, v, geometry.point(i, j), t) {
                Err(Error::NonConvergence { .. }) if check_crossing => {
                    return Err(Error::Crossing { i, j, jacobian: f64::NAN })
                }
                other => other?,
            };
            let Some(p) = traced else {
                return Ok(None);
            };
            let jac = if check_crossing {
                let d2v = speed_hessian(v, p.rho0, DEFAULT_HESSIAN_STEP).map(|h| h.symmetric);
                match d2v {
                    Ok(d2v) => {
                        let m = fd::mul2(&d2v, &profile.hessian(p.foot));
                        fd::det2(&[[1.0 - t * m[0][0], -t * m[0][1]], [-t * m[1][0], 1.0 - t * m[1][1]]])
                    }
                    // Foot slope too close to the polygon edge for the stencil.
                    Err(_) => return Ok(None),
                }
            } else {
                1.0
            };
            Ok(Some((p, jac)))
        })
        .collect::<Result<_>>()?;

    let mut height = Field::filled(geometry, 0.0);
    let mut feet = Field::filled(geometry, [0.0; 2]);
    let mut rho0 = Field::filled(geometry, [0.0; 2]);
    let mut speed = Field::filled(geometry, 0.0);
    let mut dv = Field::filled(geometry, [0.0; 2]);
    let mut min_jacobian = f64::INFINITY;
    for (k, p) in points.into_iter().enumerate() {
        match p {
            Some((p, jac)) => {
                if check_crossing && !(jac > 0.0) {
                    let (i, j) = geometry.coords(k);
                    return Err(Error::Crossing { i, j, jacobian: jac });
                }
                min_jacobian = min_jacobian.min(jac);
                height.values[k] = p.height;
                feet.values[k] = p.foot;
                rho0.values[k] = p.rho0.as_array();
                speed.values[k] = p.speed;
                dv.values[k] = p.dv;
            }
            None => {
                for valid in [&mut height.valid, &mut feet.valid, &mut rho0.valid, &mut speed.valid, &mut dv.valid] {
                    valid[k] = false;
                }
            }
        }
    }
    let horizon = characteristic_horizon(profile, v, geometry)?;
    Ok(CharacteristicSolution {
        height,
        bundle: CharacteristicBundle { feet, rho0, speed, dv, horizon },
        min_jacobian,
    })
}

/// `h(t)` by characteristics from a grid profile.
pub fn evolve_characteristics(h0: &HeightField, v: &SpeedFunction, t: f64) -> Result<CharacteristicSolution> {
    let profile = GridInterpolant::new(h0)?;
    evolve_profile(&profile, v, h0.geometry, t, true)
}

// ---------------------------------------------------------------------------
// Vanishing viscosity.

/// Ring values for the viscous scheme.
#[derive(Clone, Copy)]
pub enum ViscousBoundary<'a> {
    /// Characteristic solution of this profile at the ring nodes.
    Characteristic(&'a dyn HeightProfile),
    /// Ring slopes held at their initial values: `h0 + t v(grad h0)`.
    FrozenSlope,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViscousOptions {
    pub nu: f64,
    pub dt: f64,
    /// Time carried by `h0`; ring data are evaluated at absolute times.
    pub t_start: f64,
    pub t_final: f64,
    pub margin: f64,
}

/// `max |Dv(grad h0)|` over interior nodes.
pub fn max_transport_speed(h0: &HeightField, v: &SpeedFunction) -> Result<f64> {
    let mut max_dv: f64 = 0.0;
    for (i, j, _) in h0.iter_inside(1) {
        let rho = Slope::from(central_gradient(h0, i, j));
        let d = v.gradient(rho, SPEED_GRADIENT_STEP)?;
        max_dv = max_dv.max(d[0].hypot(d[1]));
    }
    Ok(max_dv)
}

/// `min(dx^2 / (4 nu), dx / (2 max |Dv|))` over the interior slopes of `h0`.
pub fn cfl_bound(h0: &HeightField, v: &SpeedFunction, nu: f64) -> Result<f64> {
    let g = h0.geometry;
    let dx = g.spacing[0].min(g.spacing[1]);
    let max_dv = max_transport_speed(h0, v)?;
    let advective = if max_dv > 0.0 { dx / (2.0 * max_dv) } else { f64::INFINITY };
    let diffusive = if nu > 0.0 { dx * dx / (4.0 * nu) } else { f64::INFINITY };
    Ok(advective.min(diffusive))
}

fn ring_values(
    h0: &GridInterpolant,
    v: &SpeedFunction,
    ring: &[(usize, [f64; 2])],
    boundary: ViscousBoundary<'_>,
    frozen: &[f64],
    t: f64,
    t_rel: f64,
) -> Result<Vec<f64>> {
    match boundary {
        ViscousBoundary::FrozenSlope => Ok(ring
            .iter()
            .zip(frozen)
            .map(|(&(k, _), s)| h0.field().values[k] + t_rel * s)
            .collect()),
        ViscousBoundary::Characteristic(profile) => ring
            .par_iter()
            .map(|&(k, x)| match trace_back(profile, v, x, t)? {
                Some(p) => Ok(p.height),
                None => {
                    let (i, j) = h0.field().geometry.coords(k);
                    Err(Error::MaskedNode { i, j })
                }
            })
            .collect(),
    }
}

fn viscous_rhs(h: &HeightField, v: &SpeedFunction, nu: f64, margin: f64) -> Result<Vec<f64>> {
    let g = h.geometry;
    let model = v.model();
    (0..g.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = g.coords(k);
            if g.is_boundary(i, j) {
                return Ok(0.0);
            }
            let d = central_gradient(h, i, j);
            let rho = Slope::new(d[0], d[1]);
            if !model.is_liquid(rho, margin) {
                return Err(Error::NonLiquidNode { i, j, rho1: d[0], rho2: d[1] });
            }
            Ok(v.eval(rho)? + nu * laplacian5(h, i, j))
        })
        .collect()
}

/// Three-stage strong-stability-preserving Runge-Kutta for
/// `d_t h = v(grad h) + nu Lap h`, Dirichlet on the ring.
pub fn evolve_viscous(
    h0: &HeightField,
    v: &SpeedFunction,
    opts: &ViscousOptions,
    boundary: ViscousBoundary<'_>,
) -> Result<HeightField> {
    if !(opts.nu >= 0.0 && opts.dt > 0.0 && opts.t_final >= opts.t_start) {
        return Err(Error::InvalidArgument(format!("bad viscous options {opts:?}")));
    }
    let bound = cfl_bound(h0, v, opts.nu)?;
    if opts.dt > bound * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt: opts.dt, bound });
    }
    let g = h0.geometry;
    let interp = GridInterpolant::new(h0)?;
    let ring: Vec<(usize, [f64; 2])> = (0..g.len())
        .filter_map(|k| {
            let (i, j) = g.coords(k);
            g.is_boundary(i, j).then(|| (k, g.point(i, j)))
        })
        .collect();
    let frozen: Vec<f64> = match boundary {
        ViscousBoundary::FrozenSlope => ring
            .iter()
            .map(|&(_, x)| v.eval(Slope::from(interp.gradient(x))))
            .collect::<Result<_>>()?,
        ViscousBoundary::Characteristic(_) => Vec::new(),
    };
    let set_ring = |h: &mut HeightField, t: f64| -> Result<()> {
        let values = ring_values(&interp, v, &ring, boundary, &frozen, t, t - opts.t_start)?;
        for (&(k, _), val) in ring.iter().zip(values) {
            h.values[k] = val;
        }
        Ok(())
    };

    let steps = ((opts.t_final - opts.t_start) / opts.dt).ceil().max(0.0) as usize;
    let mut h = h0.clone();
    let mut t = opts.t_start;
    for n in 0..steps {
        let dt = if n + 1 == steps { opts.t_final - t } else { opts.dt };
        if dt <= 0.0 {
            break;
        }
        let l0 = viscous_rhs(&h, v, opts.nu, opts.margin)?;
        let mut h1 = h.clone();
        for k in 0..h1.values.len() {
            h1.values[k] += dt * l0[k];
        }
        set_ring(&mut h1, t + dt)?;
        let l1 = viscous_rhs(&h1, v, opts.nu, opts.margin)?;
        let mut h2 = h.clone();
        for k in 0..h2.values.len() {
            h2.values[k] = 0.75 * h.values[k] + 0.25 * (h1.values[k] + dt * l1[k]);
        }
        set_ring(&mut h2, t + 0.5 * dt)?;
        let l2 = viscous_rhs(&h2, v, opts.nu, opts.margin)?;
        for k in 0..h.values.len() {
            h.values[k] = h.values[k] / 3.0 + 2.0 / 3.0 * (h2.values[k] + dt * l2[k]);
        }
        t += dt;
        set_ring(&mut h, t)?;
    }
    Ok(h)
}

/// `max |h_char - h_viscous|` over interior nodes at time `t`, the viscous
/// run taking its ring values from the characteristic solution.
pub fn compare_solvers(
    profile: &dyn HeightProfile,
    v: &SpeedFunction,
    geometry: GridGeometry,
    t: f64,
    nu: f64,
    dt: f64,
) -> Result<f64> {
    let h0 = evolve_profile(profile, v, geometry, 0.0, false)?.height;
    let exact = evolve_profile(profile, v, geometry, t, true)?.height;
    let opts = ViscousOptions { nu, dt, t_start: 0.0, t_final: t, margin: 1e-6 };
    let visc = evolve_viscous(&h0, v, &opts, ViscousBoundary::Characteristic(profile))?;
    Ok(exact
        .iter_inside(1)
        .map(|(i, j, x)| (x - visc.get(i, j)).abs())
        .fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// Dynamic identities.

/// `z(grad h)` at nodes whose central gradient is available.
pub fn zfield_from_height(h: &HeightField, model: &DimerModel) -> Result<ComplexField> {
    let g = h.geometry;
    let mut zf = Field::filled(g, Complex64::new(0.0, 1.0));
    for k in 0..g.len() {
        let (i, j) = g.coords(k);
        let ok = g.is_inside(i, j, 1)
            && [(i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)].iter().all(|&(a, b)| h.is_valid(a, b));
        if !ok {
            zf.valid[k] = false;
            continue;
        }
        let d = central_gradient(h, i, j);
        zf.values[k] = model
            .z_from_slope(Slope::new(d[0], d[1]))
            .map_err(|_| Error::NonLiquidNode { i, j, rho1: d[0], rho2: d[1] })?;
    }
    Ok(zf)
}

/// `R(x) = sum D^2_lk v(grad h) A_lk` with `A = D^2h Sigma D^2h`.
pub fn r_probe(h: &HeightField, v: &SpeedFunction, model: &DimerModel, node: (usize, usize)) -> Result<f64> {
    let (i, j) = node;
    if !h.stencil_valid(i, j) {
        return Err(Error::MaskedNode { i, j });
    }
    let d = central_gradient(h, i, j);
    let rho = Slope::new(d[0], d[1]);
    let sigma = sigma_hessian_zmap(model, rho)?.sigma;
    let d2h = central_hessian(h, i, j);
    let a = fd::mul2(&fd::mul2(&d2h, &sigma), &d2h);
    let d2v = speed_hessian(v, rho, DEFAULT_HESSIAN_STEP)?.symmetric;
    Ok(contract(&d2v, &a))
}

/// `d log w / d rho_k` along the z-map.
fn dlogw_drho(model: &DimerModel, z: Complex64, w: Complex64) -> [Complex64; 2] {
    let g = model.log_slope(z, w);
    // Columns of the inverse slope Jacobian give d(Re u, Im u)/d rho_k, u = log z.
    let du = [
        Complex64::new(-PI / g.im, 0.0),
        Complex64::new(-PI * g.re / g.im, PI),
    ];
    [g * du[0], g * du[1]]
}

/// Right side of the evolution identity for `Delta`:
/// `(a+b) Delta + w z (a_x1 + b_x2) + 2 i pi (z_x2 - z_x1) Delta f_z
///  - pi z w (Im z_x2 Re z_x1 - Re z_x2 Im z_x1) Lap f`.
pub fn delta_rate(zf: &ComplexField, v: &SpeedFunction, model: &DimerModel) -> Result<ComplexField> {
    if v.f(Complex64::new(0.0, 1.0)).is_none() {
        return Err(Error::InvalidArgument(format!("speed `{}` is not a function of z", v.name())));
    }
    let g = zf.geometry;
    let delta = burgers_residual(zf, model)?;
    let mut a = Field::filled(g, 0.0);
    let mut b = Field::filled(g, 0.0);
    for k in 0..g.len() {
        if !delta.valid[k] {
            a.valid[k] = false;
            b.valid[k] = false;
            continue;
        }
        let z = zf.values[k];
        let w = model.solve_w(z)?;
        let (pz, pw) = model.grad_p(z, w);
        let zprime = -pw / pz;
        let f = v.f_gradient(z)?;
        let dl = dlogw_drho(model, z, w);
        let base = delta.values[k] / z * zprime;
        let q1 = base * dl[0];
        let q2 = base * dl[1];
        a.values[k] = f[0] * q1.re + f[1] * q1.im;
        b.values[k] = f[0] * q2.re + f[1] * q2.im;
    }
    let mut out = Field::filled(g, Complex64::new(0.0, 0.0));
    for k in 0..g.len() {
        let (i, j) = g.coords(k);
        let ok = delta.valid[k]
            && g.is_inside(i, j, 1)
            && a.is_valid(i + 1, j)
            && a.is_valid(i - 1, j)
            && b.is_valid(i, j + 1)
            && b.is_valid(i, j - 1);
        if !ok {
            out.valid[k] = false;
            continue;
        }
        let z = zf.values[k];
        let w = model.solve_w(z)?;
        let dz = central_gradient(zf, i, j);
        let a_x1 = (a.get(i + 1, j) - a.get(i - 1, j)) / (2.0 * g.spacing[0]);
        let b_x2 = (b.get(i, j + 1) - b.get(i, j - 1)) / (2.0 * g.spacing[1]);
        let f = v.f_gradient(z)?;
        let fz = Complex64::new(0.5 * f[0], -0.5 * f[1]);
        let lap = v.laplacian_f_extrapolated(z)?;
        let d = delta.values[k];
        let i2pi = Complex64::new(0.0, 2.0 * PI);
        let cross = dz[1].im * dz[0].re - dz[1].re * dz[0].im;
        out.values[k] = (a.values[k] + b.values[k]) * d + w * z * (a_x1 + b_x2) + i2pi * (dz[1] - dz[0]) * d * fz
            - PI * z * w * cross * lap;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Preservation experiment.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[serde(rename = "char")]
    Characteristics,
    Viscous,
    Both,
}

impl std::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" | "characteristics" => Ok(Solver::Characteristics),
            "viscous" => Ok(Solver::Viscous),
            "both" => Ok(Solver::Both),
            _ => Err(Error::InvalidArgument(format!("unknown solver `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreservationConfig {
    pub model: String,
    pub speed: String,
    pub shape: ShapeRecipe,
    pub grid: [usize; 2],
    /// `[lo, hi]` corners of the domain.
    pub extent: [[f64; 2]; 2],
    /// Requested final time; capped at `0.8 T_max`, which is also the default.
    pub t_final: Option<f64>,
    pub outputs: usize,
    pub solver: Solver,
    /// Viscosity; `None` means `4 dx^2`.
    pub nu: Option<f64>,
    /// Viscous time step; `None` means half the CFL bound.
    pub dt: Option<f64>,
    /// Probe point; `None` means the node nearest the centre.
    pub probe: Option<[f64; 2]>,
}

impl Default for PreservationConfig {
    fn default() -> Self {
        let (lo, hi) = crate::shapes::BURGERS_EXTENT;
        PreservationConfig {
            model: "honeycomb".into(),
            speed: "im-z".into(),
            shape: ShapeRecipe::Burgers { c: "const-i".into() },
            grid: [65, 65],
            extent: [lo, hi],
            t_final: None,
            outputs: 4,
            solver: Solver::Characteristics,
            nu: None,
            dt: None,
            probe: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub max_el: f64,
    pub max_delta: f64,
    pub r_probe: f64,
    /// `d_t Delta` at the probe from the evolution identity.
    pub ddelta_probe: Complex64,
    /// `d_t Delta` at the probe by differencing in time the `Delta` of the
    /// characteristic solution.
    pub ddelta_fd: Complex64,
    pub hessian_norm_probe: f64,
    pub det_d2v_probe: f64,
    pub laplacian_f_probe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionTrace {
    pub config: PreservationConfig,
    pub t_max: f64,
    pub t_final: f64,
    /// The `0.8 T_max` cap was binding.
    pub horizon_binding: bool,
    pub probe_node: (usize, usize),
    pub probe_point: [f64; 2],
    pub dx: f64,
    /// Extra nodes per side carrying the initial data for the feet.
    pub padding: usize,
    pub records: Vec<TraceRecord>,
    /// `max |h_char - h_viscous|` at `t_final` when both solvers ran.
    pub solver_difference: Option<f64>,
}

impl EvolutionTrace {
    pub fn max_el(&self) -> f64 {
        self.records.iter().map(|r| r.max_el).fold(0.0, f64::max)
    }
    pub fn max_delta(&self) -> f64 {
        self.records.iter().map(|r| r.max_delta).fold(0.0, f64::max)
    }
    pub fn max_r(&self) -> f64 {
        self.records.iter().map(|r| r.r_probe.abs()).fold(0.0, f64::max)
    }

    /// `t,max_EL,max_Delta,R_probe,dDelta_probe_re,dDelta_probe_im,dDelta_fd_re,dDelta_fd_im`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        use crate::grid::fmt_f64;
        writeln!(out, "t,max_EL,max_Delta,R_probe,dDelta_probe_re,dDelta_probe_im,dDelta_fd_re,dDelta_fd_im")?;
        for r in &self.records {
            let cells = [r.t, r.max_el, r.max_delta, r.r_probe, r.ddelta_probe.re, r.ddelta_probe.im, r.ddelta_fd.re, r.ddelta_fd.im];
            writeln!(out, "{}", cells.iter().map(|&c| fmt_f64(c)).collect::<Vec<_>>().join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreservationRun {
    pub trace: EvolutionTrace,
    pub initial: HeightField,
    pub final_height: HeightField,
}

/// Max of `|L|` and `|Delta|` over the field and `Delta` at the probe.
fn residuals(h: &HeightField, model: &DimerModel, probe: (usize, usize)) -> Result<(f64, f64, Complex64, ComplexField)> {
    let el = el_residual(h, model, &ElOptions { margin: 1e-6, ..Default::default() })?;
    let zf = zfield_from_height(h, model)?;
    let delta = burgers_residual(&zf, model)?;
    let at = if delta.is_valid(probe.0, probe.1) {
        delta.get(probe.0, probe.1)
    } else {
        Complex64::new(f64::NAN, f64::NAN)
    };
    Ok((el.max_el(), delta.max_abs(0), at, zf))
}

/// `Delta` at the probe from the characteristic solution on a small patch.
fn probe_delta(profile: &dyn HeightProfile, v: &SpeedFunction, model: &DimerModel, g: &GridGeometry, probe: (usize, usize), t: f64) -> Result<Complex64> {
    let origin = g.point(probe.0 - 2, probe.1 - 2);
    let patch = GridGeometry::new(5, 5, origin, g.spacing)?;
    let sol = evolve_profile(profile, v, patch, t, false)?;
    let zf = zfield_from_height(&sol.height, model)?;
    let delta = burgers_residual(&zf, model)?;
    if !delta.is_valid(2, 2) {
        return Err(Error::MaskedNode { i: probe.0, j: probe.1 });
    }
    Ok(delta.get(2, 2))
}

/// Grid with `pad` extra nodes on every side and the same spacing.
fn padded(g: &GridGeometry, pad: usize) -> Result<GridGeometry> {
    let origin = [g.origin[0] - pad as f64 * g.spacing[0], g.origin[1] - pad as f64 * g.spacing[1]];
    GridGeometry::new(g.n1 + 2 * pad, g.n2 + 2 * pad, origin, g.spacing)
}

/// Initial profile on a grid wide enough to hold the feet of all target
/// nodes up to time `t`.
fn dependence_profile(
    model: &DimerModel,
    recipe: &ShapeRecipe,
    geometry: &GridGeometry,
    h0: &HeightField,
    v: &SpeedFunction,
    t: f64,
) -> Result<(GridInterpolant, usize)> {
    let reach = 1.25 * t * max_transport_speed(h0, v)?;
    let pad = (reach / geometry.spacing[0].min(geometry.spacing[1])).ceil() as usize + 4;
    let wide = padded(geometry, pad)?;
    let shape = build_shape(model, recipe, wide)?;
    Ok((GridInterpolant::new(&shape.height)?, pad))
}

pub fn run_preservation_experiment(cfg: &PreservationConfig) -> Result<PreservationRun> {
    let model = DimerModel::by_name(&cfg.model)?;
    let v = SpeedFunction::from_preset(&cfg.speed, &model)?;
    let geometry = GridGeometry::from_extent(cfg.grid[0], cfg.grid[1], cfg.extent[0], cfg.extent[1])?;
    if cfg.outputs == 0 {
        return Err(Error::InvalidArgument("need at least one output time".into()));
    }
    let local = build_shape(&model, &cfg.shape, geometry)?.height;
    let t_max = characteristic_horizon(&GridInterpolant::new(&local)?, &v, geometry)?;
    let cap = 0.8 * t_max;
    let requested = cfg.t_final.unwrap_or(cap);
    if !(requested >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative final time {requested}")));
    }
    let t_final = requested.min(cap);
    let horizon_binding = requested > cap;
    let (profile, padding) = dependence_profile(&model, &cfg.shape, &geometry, &local, &v, t_final)?;
    let h0 = evolve_profile(&profile, &v, geometry, 0.0, false)?.height;
    let probe = match cfg.probe {
        Some(x) => geometry.nearest(x),
        None => (geometry.n1 / 2, geometry.n2 / 2),
    };
    if !geometry.is_inside(probe.0, probe.1, 3) {
        return Err(Error::InvalidArgument("probe must sit at least three nodes inside the grid".into()));
    }
    let dt_fd = 1e-3 * t_final.max(1e-3);

    let mut records = Vec::new();
    let mut viscous_state: Option<(HeightField, f64)> = None;
    let nu = cfg.nu.unwrap_or(4.0 * geometry.max_spacing().powi(2));
    let dt = match cfg.dt {
        Some(dt) => dt,
        None => 0.5 * cfl_bound(&h0, &v, nu)?,
    };
    let mut last = h0.clone();
    for k in 0..=cfg.outputs {
        let t = t_final * k as f64 / cfg.outputs as f64;
        let h = match cfg.solver {
            Solver::Characteristics | Solver::Both => evolve_profile(&profile, &v, geometry, t, true)?.height,
            Solver::Viscous => {
                let (prev, t_prev) = viscous_state.take().unwrap_or((h0.clone(), 0.0));
                let next = evolve_viscous(
                    &prev,
                    &v,
                    &ViscousOptions { nu, dt, t_start: t_prev, t_final: t, margin: 1e-6 },
                    ViscousBoundary::Characteristic(&profile),
                )?;
                viscous_state = Some((next.clone(), t));
                next
            }
        };
        let (max_el, max_delta, _, zf) = residuals(&h, &model, probe)?;
        let rate = delta_rate(&zf, &v, &model)?;
        let ddelta_probe = if rate.is_valid(probe.0, probe.1) {
            rate.get(probe.0, probe.1)
        } else {
            Complex64::new(f64::NAN, f64::NAN)
        };
        // Always differenced along the characteristic solution.
        let ddelta_fd = if t == 0.0 {
            let d0 = probe_delta(&profile, &v, &model, &geometry, probe, 0.0)?;
            let d1 = probe_delta(&profile, &v, &model, &geometry, probe, dt_fd)?;
            let d2 = probe_delta(&profile, &v, &model, &geometry, probe, 2.0 * dt_fd)?;
            (-3.0 * d0 + 4.0 * d1 - d2) / (2.0 * dt_fd)
        } else {
            let dp = probe_delta(&profile, &v, &model, &geometry, probe, t + dt_fd)?;
            let dm = probe_delta(&profile, &v, &model, &geometry, probe, t - dt_fd)?;
            (dp - dm) / (2.0 * dt_fd)
        };
        let (pi, pj) = probe;
        let rho = Slope::from(central_gradient(&h, pi, pj));
        let d2v = speed_hessian(&v, rho, DEFAULT_HESSIAN_STEP)?;
        let z = model.z_from_slope(rho)?;
        records.push(TraceRecord {
            t,
            max_el,
            max_delta,
            r_probe: r_probe(&h, &v, &model, probe)?,
            ddelta_probe,
            ddelta_fd,
            hessian_norm_probe: fd::frobenius2(&central_hessian(&h, pi, pj)),
            det_d2v_probe: d2v.det(),
            laplacian_f_probe: v.laplacian_f_extrapolated(z)?,
        });
        last = h;
    }
    let solver_difference = if cfg.solver == Solver::Both {
        let visc = evolve_viscous(
            &h0,
            &v,
            &ViscousOptions { nu, dt, t_start: 0.0, t_final, margin: 1e-6 },
            ViscousBoundary::Characteristic(&profile),
        )?;
        Some(
            last.iter_inside(1)
                .map(|(i, j, x)| (x - visc.get(i, j)).abs())
                .fold(0.0, f64::max),
        )
    } else {
        None
    };
    Ok(PreservationRun {
        trace: EvolutionTrace {
            config: cfg.clone(),
            t_max,
            t_final,
            horizon_binding,
            probe_node: probe,
            probe_point: geometry.point(probe.0, probe.1),
            dx: geometry.max_spacing(),
            padding,
            records,
            solver_difference,
        },
        initial: h0,
        final_height: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimer::DEFAULT_MARGIN;
    use crate::shapes::affine_height;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> GridGeometry {
        GridGeometry::from_extent(n, n, [0.0, 0.0], [1.0, 1.0]).unwrap()
    }

    #[test]
    fn interpolant_reproduces_quintics() {
        let g = grid(9);
        let f = |x: [f64; 2]| x[0].powi(5) - 2.0 * x[0].powi(2) * x[1].powi(3) + x[1];
        let h = Field::from_fn(g, f);
        let p = GridInterpolant::new(&h).unwrap();
        for x in [[0.13, 0.77], [0.01, 0.99], [0.5, 0.5]] {
            assert_abs_diff_eq!(p.value(x), f(x), epsilon = 1e-12);
            let grad = p.gradient(x);
            assert_abs_diff_eq!(grad[0], 5.0 * x[0].powi(4) - 4.0 * x[0] * x[1].powi(3), epsilon = 1e-10);
            let hess = p.hessian(x);
            assert_abs_diff_eq!(hess[0][1], -12.0 * x[0] * x[1].powi(2), epsilon = 1e-8);
        }
        assert!(!p.contains([1.1, 0.5]));
    }

    #[test]
    fn affine_profiles_translate_rigidly() {
        let hc = DimerModel::honeycomb();
        let rho = Slope::new(0.3, 0.4);
        let h0 = affine_height(grid(9), rho, 0.2);
        let v = SpeedFunction::im_z(hc.clone());
        let t = 0.05;
        let sol = evolve_characteristics(&h0, &v, t).unwrap();
        let shift = t * v.eval(rho).unwrap();
        for (i, j, x) in sol.height.iter_inside(0) {
            assert_abs_diff_eq!(x, h0.get(i, j) + shift, epsilon = 1e-12);
        }
        assert!(sol.bundle.horizon > 1e6);
        let visc = evolve_viscous(
            &h0,
            &v,
            &ViscousOptions { nu: 0.01, dt: 1e-3, t_start: 0.0, t_final: t, margin: DEFAULT_MARGIN },
            ViscousBoundary::FrozenSlope,
        )
        .unwrap();
        for (k, x) in visc.values.iter().enumerate() {
            assert_abs_diff_eq!(*x, h0.values[k] + shift, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_speed_shifts() {
        let hc = DimerModel::honeycomb();
        let g = grid(9);
        let h0 = Field::from_fn(g, |x| 0.3 * x[0] + 0.3 * x[1] + 0.02 * (x[0] * x[1]).sin());
        let v = SpeedFunction::constant(hc, 1.5);
        let sol = evolve_characteristics(&h0, &v, 0.3).unwrap();
        for (k, x) in sol.height.values.iter().enumerate() {
            assert_abs_diff_eq!(*x, h0.values[k] + 0.45, epsilon = 1e-12);
        }
    }

    #[test]
    fn viscous_rejects_large_steps() {
        let hc = DimerModel::honeycomb();
        let h0 = affine_height(grid(9), Slope::new(0.3, 0.3), 0.0);
        let v = SpeedFunction::im_z(hc);
        let err = evolve_viscous(
            &h0,
            &v,
            &ViscousOptions { nu: 1.0, dt: 0.1, t_start: 0.0, t_final: 0.2, margin: DEFAULT_MARGIN },
            ViscousBoundary::FrozenSlope,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
    }

    #[test]
    fn crossing_is_detected() {
        let hc = DimerModel::honeycomb();
        let g = grid(17);
        let profile = AnalyticProfile::new(
            |x| 0.3 * x[0] + 0.3 * x[1] + 0.05 * (3.0 * x[0]).sin(),
            |x| [0.3 + 0.15 * (3.0 * x[0]).cos(), 0.3],
        );
        let v = SpeedFunction::quadratic(hc, 1.0, 0.0, 1.0);
        let t_max = characteristic_horizon(&profile, &v, g).unwrap();
        evolve_profile(&profile, &v, g, 0.5 * t_max, true).unwrap();
        let err = evolve_profile(&profile, &v, g, 4.0 * t_max, true).unwrap_err();
        assert!(matches!(err, Error::Crossing { .. }), "{err}");
    }

    #[test]
    fn r_vanishes_at_zero_hessian() {
        let hc = DimerModel::honeycomb();
        let h = affine_height(grid(9), Slope::new(0.3, 0.3), 0.0);
        let r = r_probe(&h, &SpeedFunction::abs_z_squared(hc.clone()), &hc, (4, 4)).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn dlogw_matches_finite_differences() {
        let sq = DimerModel::square();
        let rho = Slope::new(0.35, 0.6);
        let z = sq.z_from_slope(rho).unwrap();
        let w = sq.solve_w(z).unwrap();
        let exact = dlogw_drho(&sq, z, w);
        let logw = |r: [f64; 2], part: usize| {
            let z = sq.z_from_slope(Slope::from(r)).unwrap();
            let lw = sq.solve_w(z).unwrap().ln();
            if part == 0 { lw.re } else { lw.im }
        };
        for k in 0..2 {
            let d = |part| {
                let f = |s: f64| {
                    let mut r = rho.as_array();
                    r[k] = s;
                    logw(r, part)
                };
                fd::derivative(f, rho.as_array()[k], 1e-4)
            };
            assert_abs_diff_eq!(exact[k].re, d(0), epsilon = 1e-8);
            assert_abs_diff_eq!(exact[k].im, d(1), epsilon = 1e-8);
        }
    }

    fn burgers_zfield(n: usize) -> ComplexField {
        let hc = DimerModel::honeycomb();
        let (lo, hi) = crate::shapes::BURGERS_EXTENT;
        let g = GridGeometry::from_extent(n, n, lo, hi).unwrap();
        build_shape(&hc, &ShapeRecipe::Burgers { c: "const-i".into() }, g).unwrap().z.unwrap()
    }

    #[test]
    fn delta_rate_on_burgers_fields() {
        let hc = DimerModel::honeycomb();
        let zf = burgers_zfield(17);
        let harmonic = delta_rate(&zf, &SpeedFunction::im_z(hc.clone()), &hc).unwrap();
        assert!(harmonic.max_abs(0) < 1e-8, "{}", harmonic.max_abs(0));

        let rate = delta_rate(&zf, &SpeedFunction::abs_z_squared(hc.clone()), &hc).unwrap();
        let (i, j) = (8, 8);
        let z = zf.get(i, j);
        let w = hc.solve_w(z).unwrap();
        let dz = central_gradient(&zf, i, j);
        let cross = dz[1].im * dz[0].re - dz[1].re * dz[0].im;
        let expected = -4.0 * PI * z * w * cross;
        assert!(expected.norm() > 1e-2);
        assert!((rate.get(i, j) - expected).norm() < 1e-6 * expected.norm());
    }

    #[test]
    fn delta_rate_needs_a_z_function() {
        let hc = DimerModel::honeycomb();
        let zf = burgers_zfield(9);
        let v = SpeedFunction::quadratic(hc.clone(), 1.0, 0.0, 1.0);
        assert!(matches!(delta_rate(&zf, &v, &hc), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn slopes_are_transported() {
        let hc = DimerModel::honeycomb();
        let (lo, hi) = crate::shapes::BURGERS_EXTENT;
        let g = GridGeometry::from_extent(33, 33, lo, hi).unwrap();
        let h0 = build_shape(&hc, &ShapeRecipe::Burgers { c: "const-i".into() }, g).unwrap().height;
        let v = SpeedFunction::im_z(hc);
        let sol = evolve_characteristics(&h0, &v, 0.02).unwrap();
        let mut worst: f64 = 0.0;
        for (i, j, rho0) in sol.bundle.rho0.iter_inside(1) {
            if !sol.height.stencil_valid(i, j) {
                continue;
            }
            let d = central_gradient(&sol.height, i, j);
            worst = worst.max((d[0] - rho0[0]).abs()).max((d[1] - rho0[1]).abs());
        }
        assert!(worst < 1e-4, "{worst}");
        assert!(sol.min_jacobian > 0.0);
    }

    #[test]
    fn affine_preservation_run_is_exact() {
        let cfg = PreservationConfig {
            shape: ShapeRecipe::Affine { rho: [0.3, 0.3] },
            speed: "abs2".into(),
            grid: [17, 17],
            t_final: Some(0.1),
            outputs: 2,
            ..Default::default()
        };
        let run = run_preservation_experiment(&cfg).unwrap();
        let t = &run.trace;
        assert!(t.t_max > 1e6);
        assert!(!t.horizon_binding);
        assert!(t.max_el() < 1e-9 && t.max_delta() < 1e-9 && t.max_r() < 1e-9, "{t:?}");
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,max_EL,max_Delta,R_probe,dDelta_probe_re,dDelta_probe_im"));
        assert_eq!(text.lines().count(), 4);
        // deterministic
        let again = run_preservation_experiment(&cfg).unwrap();
        assert_eq!(again.trace.records, t.records);
    }

    #[test]
    fn viscous_follows_characteristics() {
        let cfg = PreservationConfig {
            grid: [17, 17],
            solver: Solver::Both,
            t_final: Some(0.02),
            outputs: 1,
            ..Default::default()
        };
        let run = run_preservation_experiment(&cfg).unwrap();
        let diff = run.trace.solver_difference.unwrap();
        assert!(diff < 1e-4, "{diff}");
    }
}
