//! Closed forms used only to cross-check the numerical routes.

use std::f64::consts::PI;

use crate::dimer::Slope;
use crate::fd::Mat2;
use crate::quadrature::GaussLegendre;

/// Lobachevsky function `L(x) = -int_0^x log|2 sin t| dt` for `x` in `[0, pi]`.
///
/// The logarithmic endpoint singularities are integrated in closed form;
/// the smooth remainder `log(sin t / (t (pi - t)))` by Gauss-Legendre.
pub fn lobachevsky(x: f64) -> f64 {
    assert!((0.0..=PI).contains(&x), "lobachevsky: {x} outside [0, pi]");
    if x == 0.0 {
        return 0.0;
    }
    let xlogx = |u: f64| if u > 0.0 { u * u.ln() } else { 0.0 };
    // int_0^x log t dt and int_0^x log(pi - t) dt
    let log_t = xlogx(x) - x;
    let log_pi_t = -xlogx(PI - x) + (PI - x) + xlogx(PI) - PI;
    let smooth = GaussLegendre::default_rule().integrate(0.0, x, |t| (t.sin() / (t * (PI - t))).ln());
    -(x * 2f64.ln() + log_t + log_pi_t + smooth)
}

fn lozenge_densities(rho: Slope) -> [f64; 3] {
    [rho.rho1, rho.rho2, 1.0 - rho.rho1 - rho.rho2]
}

/// Lozenge-tiling surface tension `-(1/pi) sum_k L(pi p_k)` with
/// `p = (rho1, rho2, 1 - rho1 - rho2)`.
pub fn lozenge_sigma(rho: Slope) -> f64 {
    -lozenge_densities(rho).iter().map(|&p| lobachevsky(PI * p)).sum::<f64>() / PI
}

/// Hessian of `lozenge_sigma`, from `L''(x) = -cot x`.
pub fn lozenge_sigma_hessian(rho: Slope) -> Mat2 {
    let [a, b, c] = lozenge_densities(rho).map(|p| PI / (PI * p).tan());
    [[a + c, c], [c, b + c]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lobachevsky_values() {
        // L(pi/3) = Cl2(2 pi / 3) / 2
        assert_abs_diff_eq!(lobachevsky(PI / 2.0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lobachevsky(PI), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lobachevsky(PI / 3.0), 0.338_313_868_803_217_9, epsilon = 1e-13);
        // odd about pi/2
        assert_abs_diff_eq!(lobachevsky(0.4), -lobachevsky(PI - 0.4), epsilon = 1e-13);
    }

    #[test]
    fn hessian_matches_differences() {
        let rho = Slope::new(0.2, 0.35);
        let fd = crate::fd::hessian(|p| lozenge_sigma(Slope::from(p)), rho.as_array(), 1e-3);
        let exact = lozenge_sigma_hessian(rho);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(fd[i][j], exact[i][j], epsilon = 1e-6 * exact[i][j].abs().max(1.0));
            }
        }
    }
}
