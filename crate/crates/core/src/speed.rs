//! Growth speeds `v(rho)`, either given directly on slopes or as `f(z(rho))`
//! through a model's z-map, and the sign classification of `det D^2 v`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dimer::{DimerModel, Slope};
use crate::error::{Error, Result};
use crate::fd::{self, Mat2};

pub type ComplexFn = Arc<dyn Fn(Complex64) -> f64 + Send + Sync>;
pub type SlopeFn = Arc<dyn Fn(Slope) -> f64 + Send + Sync>;

pub const DEFAULT_HESSIAN_STEP: f64 = 1e-3;
pub const DEFAULT_TAU: f64 = 1e-6;
const HARMONIC_CHECK_TOL: f64 = 1e-6;

#[derive(Clone)]
pub enum SpeedKind {
    SlopeNative(SlopeFn),
    /// `v(rho) = f(z(rho))`. `harmonic` records the caller's claim, verified
    /// numerically at construction.
    ZComposed { f: ComplexFn, harmonic: bool },
}

/// A growth speed on the liquid slopes of `model`.
#[derive(Clone)]
pub struct SpeedFunction {
    name: String,
    model: DimerModel,
    kind: SpeedKind,
}

impl fmt::Debug for SpeedFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            SpeedKind::SlopeNative(_) => "slope-native",
            SpeedKind::ZComposed { .. } => "z-composed",
        };
        f.debug_struct("SpeedFunction")
            .field("name", &self.name)
            .field("model", &self.model.name())
            .field("kind", &kind)
            .finish()
    }
}

impl SpeedFunction {
    pub fn slope_native(
        name: impl Into<String>,
        model: DimerModel,
        f: impl Fn(Slope) -> f64 + Send + Sync + 'static,
    ) -> Self {
        SpeedFunction {
            name: name.into(),
            model,
            kind: SpeedKind::SlopeNative(Arc::new(f)),
        }
    }

    /// Fails if `harmonic` is claimed but the numerical Laplacian of `f`
    /// exceeds `1e-6` at one of 25 sample points of the z-image of the
    /// liquid region.
    pub fn z_composed(
        name: impl Into<String>,
        model: DimerModel,
        f: impl Fn(Complex64) -> f64 + Send + Sync + 'static,
        harmonic: bool,
    ) -> Result<Self> {
        let speed = SpeedFunction {
            name: name.into(),
            model,
            kind: SpeedKind::ZComposed {
                f: Arc::new(f),
                harmonic,
            },
        };
        if harmonic {
            for z in speed.sample_points()? {
                let lap = speed.laplacian_f_extrapolated(z)?;
                if lap.abs() > HARMONIC_CHECK_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "speed `{}` is flagged harmonic but its Laplacian is {lap:e} at z = {z}",
                        speed.name
                    )));
                }
            }
        }
        Ok(speed)
    }

    /// `Im z`.
    pub fn im_z(model: DimerModel) -> Self {
        SpeedFunction::z_composed("im-z", model, |z| z.im, true).unwrap()
    }

    /// `Im z / pi` on the square grid: the domino speed expressed in `z`.
    pub fn cft_domino() -> Self {
        SpeedFunction::z_composed("cft-domino", DimerModel::square(), |z| z.im / PI, true).unwrap()
    }

    pub fn re_z(model: DimerModel) -> Self {
        SpeedFunction::z_composed("re-z", model, |z| z.re, true).unwrap()
    }

    pub fn im_log_z(model: DimerModel) -> Self {
        SpeedFunction::z_composed("im-log-z", model, |z| z.arg(), true).unwrap()
    }

    pub fn re_z_squared(model: DimerModel) -> Self {
        SpeedFunction::z_composed("re-z2", model, |z| (z * z).re, true).unwrap()
    }

    /// `|z|^2`, not harmonic.
    pub fn abs_z_squared(model: DimerModel) -> Self {
        SpeedFunction::z_composed("abs2", model, |z| z.norm_sqr(), false).unwrap()
    }

    pub fn constant(model: DimerModel, c: f64) -> Self {
        SpeedFunction::slope_native(format!("const:{c}"), model, move |_| c)
    }

    /// `a rho1^2 + b rho1 rho2 + c rho2^2`.
    pub fn quadratic(model: DimerModel, a: f64, b: f64, c: f64) -> Self {
        SpeedFunction::slope_native(format!("quadratic:{a},{b},{c}"), model, move |r| {
            a * r.rho1 * r.rho1 + b * r.rho1 * r.rho2 + c * r.rho2 * r.rho2
        })
    }

    /// Named presets: `im-z`, `cft-domino`, `re-z`, `im-log-z`, `re-z2`,
    /// `abs2`, `const:<c>`, `quadratic:<a,b,c>`.
    pub fn from_preset(preset: &str, model: &DimerModel) -> Result<Self> {
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{s}` in speed `{preset}`")))
        };
        match preset {
            "im-z" => Ok(SpeedFunction::im_z(model.clone())),
            "cft-domino" => {
                if model.name() != "square" {
                    return Err(Error::InvalidArgument(
                        "speed `cft-domino` is defined on the square model".into(),
                    ));
                }
                Ok(SpeedFunction::cft_domino())
            }
            "re-z" => Ok(SpeedFunction::re_z(model.clone())),
            "im-log-z" => Ok(SpeedFunction::im_log_z(model.clone())),
            "re-z2" => Ok(SpeedFunction::re_z_squared(model.clone())),
            "abs2" => Ok(SpeedFunction::abs_z_squared(model.clone())),
            _ => {
                if let Some(c) = preset.strip_prefix("const:") {
                    return Ok(SpeedFunction::constant(model.clone(), parse(c)?));
                }
                if let Some(rest) = preset.strip_prefix("quadratic:") {
                    let parts: Vec<&str> = rest.split(',').collect();
                    if parts.len() != 3 {
                        return Err(Error::InvalidArgument(format!(
                            "speed `{preset}` needs three coefficients"
                        )));
                    }
                    return Ok(SpeedFunction::quadratic(
                        model.clone(),
                        parse(parts[0])?,
                        parse(parts[1])?,
                        parse(parts[2])?,
                    ));
                }
                Err(Error::InvalidArgument(format!("unknown speed preset `{preset}`")))
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn model(&self) -> &DimerModel {
        &self.model
    }

    pub fn kind(&self) -> &SpeedKind {
        &self.kind
    }

    pub fn is_harmonic(&self) -> bool {
        matches!(self.kind, SpeedKind::ZComposed { harmonic: true, .. })
    }

    /// `f(z)` for z-composed speeds.
    pub fn f(&self, z: Complex64) -> Option<f64> {
        match &self.kind {
            SpeedKind::ZComposed { f, .. } => Some(f(z)),
            SpeedKind::SlopeNative(_) => None,
        }
    }

    pub fn eval(&self, rho: Slope) -> Result<f64> {
        match &self.kind {
            SpeedKind::SlopeNative(v) => {
                if !(self.model.polygon().edge_distance(rho) > 0.0) {
                    return Err(Error::OutsidePolygon(rho.rho1, rho.rho2));
                }
                Ok(v(rho))
            }
            SpeedKind::ZComposed { f, .. } => Ok(f(self.model.z_from_slope(rho)?)),
        }
    }

    /// `Dv(rho)` by Richardson-extrapolated central differences.
    pub fn gradient(&self, rho: Slope, step: f64) -> Result<[f64; 2]> {
        let failure = RefCell::new(None);
        let g = fd::gradient(
            |p| {
                self.eval(Slope::from(p)).unwrap_or_else(|e| {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                })
            },
            rho.as_array(),
            step,
        );
        match failure.into_inner() {
            Some(err) => Err(err),
            None => Ok(g),
        }
    }

    /// Five-point Laplacian of `f` at `z`.
    pub fn laplacian_f(&self, z: Complex64, step: f64) -> Result<f64> {
        let f = match &self.kind {
            SpeedKind::ZComposed { f, .. } => f,
            SpeedKind::SlopeNative(_) => {
                return Err(Error::InvalidArgument(format!(
                    "speed `{}` is not a function of z",
                    self.name
                )))
            }
        };
        if !(step > 0.0 && step < 0.25 * z.im) {
            return Err(Error::InvalidArgument(format!(
                "Laplacian step {step} must lie in (0, Im z / 4) at z = {z}"
            )));
        }
        let h = Complex64::new(step, 0.0);
        let ih = Complex64::new(0.0, step);
        Ok((f(z + h) + f(z - h) + f(z + ih) + f(z - ih) - 4.0 * f(z)) / (step * step))
    }

    /// Laplacian with steps `h` and `h / 2`, Richardson-extrapolated.
    pub fn laplacian_f_extrapolated(&self, z: Complex64) -> Result<f64> {
        let h = (1e-3 * z.norm().max(1.0)).min(0.125 * z.im);
        let coarse = self.laplacian_f(z, h)?;
        let fine = self.laplacian_f(z, 0.5 * h)?;
        Ok((4.0 * fine - coarse) / 3.0)
    }

    /// `(partial f / partial Re z, partial f / partial Im z)`.
    pub fn f_gradient(&self, z: Complex64) -> Result<[f64; 2]> {
        let f = match &self.kind {
            SpeedKind::ZComposed { f, .. } => f,
            SpeedKind::SlopeNative(_) => {
                return Err(Error::InvalidArgument(format!(
                    "speed `{}` is not a function of z",
                    self.name
                )))
            }
        };
        let h = (1e-4 * z.norm().max(1.0)).min(0.125 * z.im);
        Ok(fd::gradient(|p| f(Complex64::new(p[0], p[1])), [z.re, z.im], h))
    }

    /// 25 points of the z-image of the liquid region, away from its edges.
    fn sample_points(&self) -> Result<Vec<Complex64>> {
        let grid = liquid_grid(&self.model, 12, 0.05);
        let stride = (grid.len() / 25).max(1);
        grid.iter()
            .step_by(stride)
            .take(25)
            .map(|&rho| self.model.z_from_slope(rho))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedHessian {
    /// Before symmetrization.
    pub raw: Mat2,
    pub symmetric: Mat2,
}

impl SpeedHessian {
    pub fn asymmetry(&self) -> f64 {
        (self.raw[0][1] - self.raw[1][0]).abs()
    }

    pub fn det(&self) -> f64 {
        fd::det2(&self.symmetric)
    }
}

/// Symmetrized central-difference Hessian of `v`, Richardson-extrapolated.
pub fn speed_hessian(v: &SpeedFunction, rho: Slope, step: f64) -> Result<SpeedHessian> {
    if !(v.model.polygon().edge_distance(rho) > 2.0 * step) {
        return Err(Error::OutsidePolygon(rho.rho1, rho.rho2));
    }
    let failure = RefCell::new(None);
    let raw = fd::hessian_raw(
        |p| {
            v.eval(Slope::from(p)).unwrap_or_else(|e| {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            })
        },
        rho.as_array(),
        step,
    );
    if let Some(err) = failure.into_inner() {
        return Err(err);
    }
    let off = 0.5 * (raw[0][1] + raw[1][0]);
    Ok(SpeedHessian {
        raw,
        symmetric: [[raw[0][0], off], [off, raw[1][1]]],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AkpzLabel {
    #[serde(rename = "AKPZ")]
    Akpz,
    #[serde(rename = "ISOTROPIC")]
    Isotropic,
    #[serde(rename = "DEGENERATE")]
    Degenerate,
}

impl AkpzLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            AkpzLabel::Akpz => "AKPZ",
            AkpzLabel::Isotropic => "ISOTROPIC",
            AkpzLabel::Degenerate => "DEGENERATE",
        }
    }
}

impl fmt::Display for AkpzLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AkpzClassification {
    pub rho: Slope,
    pub speed: f64,
    pub hessian: Mat2,
    pub det: f64,
    /// Absolute band used for the label, `tau_rel * max(1, |D^2 v|_F^2)`.
    pub tau: f64,
    pub label: AkpzLabel,
}

pub fn classify_det(det: f64, tau: f64) -> AkpzLabel {
    if det < -tau {
        AkpzLabel::Akpz
    } else if det > tau {
        AkpzLabel::Isotropic
    } else {
        AkpzLabel::Degenerate
    }
}

pub fn akpz_classify(v: &SpeedFunction, rho: Slope, tau_rel: f64) -> Result<AkpzClassification> {
    let h = speed_hessian(v, rho, DEFAULT_HESSIAN_STEP)?;
    let det = h.det();
    let tau = tau_rel * fd::frobenius2(&h.symmetric).powi(2).max(1.0);
    Ok(AkpzClassification {
        rho,
        speed: v.eval(rho)?,
        hessian: h.symmetric,
        det,
        tau,
        label: classify_det(det, tau),
    })
}

/// Grid of `(resolution + 1)^2` slopes over the polygon's bounding box,
/// keeping those at distance `margin` inside the liquid region, in
/// lexicographic order.
pub fn liquid_grid(model: &DimerModel, resolution: usize, margin: f64) -> Vec<Slope> {
    let (lo, hi) = model.polygon().bounding_box();
    let n = resolution.max(1);
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            let rho = Slope::new(
                lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64,
                lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64,
            );
            if model.is_liquid(rho, margin) {
                out.push(rho);
            }
        }
    }
    out
}

pub fn akpz_map(
    v: &SpeedFunction,
    resolution: usize,
    margin: f64,
    tau_rel: f64,
) -> Result<Vec<AkpzClassification>> {
    liquid_grid(v.model(), resolution, margin)
        .into_par_iter()
        .map(|rho| akpz_classify(v, rho, tau_rel))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn speed_eval_examples() {
        let v = SpeedFunction::cft_domino();
        assert_abs_diff_eq!(v.eval(Slope::new(0.5, 0.5)).unwrap(), 1.0 / PI, epsilon = 1e-15);
        let c = SpeedFunction::constant(DimerModel::honeycomb(), 2.5);
        assert_eq!(c.eval(Slope::new(0.2, 0.3)).unwrap(), 2.5);
        let v = SpeedFunction::im_z(DimerModel::honeycomb());
        assert_abs_diff_eq!(v.eval(Slope::new(0.25, 0.5)).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(v.eval(Slope::new(0.7, 0.7)), Err(Error::OutsidePolygon(..))));
    }

    #[test]
    fn laplacian_examples() {
        let hc = DimerModel::honeycomb();
        let i = Complex64::new(0.0, 1.0);
        let im = SpeedFunction::im_z(hc.clone());
        assert!(im.laplacian_f(i, 1e-3).unwrap().abs() < 1e-9);
        let abs2 = SpeedFunction::abs_z_squared(hc.clone());
        let lap = abs2.laplacian_f(Complex64::new(1.0, 2.0), 1e-3).unwrap();
        assert!((lap - 4.0).abs() < 1e-6);
        let re2 = SpeedFunction::re_z_squared(hc.clone());
        assert!(re2.laplacian_f(i, 1e-3).unwrap().abs() < 1e-6);
        assert!(im.laplacian_f(i, 0.3).is_err());
        let native = SpeedFunction::quadratic(hc, 1.0, 0.0, 1.0);
        assert!(native.laplacian_f(i, 1e-3).is_err());
    }

    #[test]
    fn false_harmonic_claim_is_rejected() {
        let err = SpeedFunction::z_composed("bad", DimerModel::honeycomb(), |z| z.norm_sqr(), true);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn quadratic_hessians() {
        let hc = DimerModel::honeycomb();
        let rho = Slope::new(0.3, 0.3);
        let h = speed_hessian(&SpeedFunction::quadratic(hc.clone(), 1.0, 0.0, 1.0), rho, 1e-3).unwrap();
        assert_abs_diff_eq!(h.symmetric[0][0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(h.symmetric[1][1], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(h.symmetric[0][1], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(h.det(), 4.0, epsilon = 1e-7);
        let h = speed_hessian(&SpeedFunction::quadratic(hc, 1.0, 0.0, -1.0), rho, 1e-3).unwrap();
        assert_abs_diff_eq!(h.det(), -4.0, epsilon = 1e-7);
    }

    #[test]
    fn classify_examples() {
        let hc = DimerModel::honeycomb();
        let rho = Slope::new(0.3, 0.3);
        let iso = akpz_classify(&SpeedFunction::quadratic(hc.clone(), 1.0, 0.0, 1.0), rho, DEFAULT_TAU).unwrap();
        assert_eq!(iso.label, AkpzLabel::Isotropic);
        let saddle = akpz_classify(&SpeedFunction::quadratic(hc, 0.0, 1.0, 0.0), rho, DEFAULT_TAU).unwrap();
        assert_eq!(saddle.label, AkpzLabel::Akpz);
        assert_abs_diff_eq!(saddle.det, -1.0, epsilon = 1e-7);
        let domino = akpz_classify(&SpeedFunction::cft_domino(), Slope::new(0.5, 0.5), DEFAULT_TAU).unwrap();
        assert!(domino.det <= domino.tau, "{domino:?}");
    }

    #[test]
    fn map_edge_cases() {
        let hc = DimerModel::honeycomb();
        let empty = akpz_map(&SpeedFunction::im_z(hc.clone()), 10, 0.4, DEFAULT_TAU).unwrap();
        assert!(empty.is_empty());
        let iso = akpz_map(&SpeedFunction::quadratic(hc, 1.0, 0.0, 1.0), 10, 0.02, DEFAULT_TAU).unwrap();
        assert!(!iso.is_empty());
        assert!(iso.iter().all(|c| c.label == AkpzLabel::Isotropic));
        let ordered = iso.windows(2).all(|w| {
            (w[0].rho.rho1, w[0].rho.rho2) < (w[1].rho.rho1, w[1].rho.rho2)
        });
        assert!(ordered);
    }

    #[test]
    fn presets() {
        let sq = DimerModel::square();
        assert_eq!(SpeedFunction::from_preset("quadratic:1,2,3", &sq).unwrap().name(), "quadratic:1,2,3");
        assert!(SpeedFunction::from_preset("quadratic:1,2", &sq).is_err());
        assert!(SpeedFunction::from_preset("cft-domino", &DimerModel::honeycomb()).is_err());
        assert!(SpeedFunction::from_preset("warp", &sq).is_err());
        assert!(SpeedFunction::from_preset("im-z", &sq).unwrap().is_harmonic());
    }
}
