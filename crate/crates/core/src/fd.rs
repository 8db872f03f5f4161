//! Central finite differences with one level of Richardson extrapolation.

/// Symmetric 2x2 matrix stored row-major.
pub type Mat2 = [[f64; 2]; 2];

pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn mul2(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn frobenius2(m: &Mat2) -> f64 {
    (m[0][0].powi(2) + m[0][1].powi(2) + m[1][0].powi(2) + m[1][1].powi(2)).sqrt()
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn sym_eigenvalues(m: &Mat2) -> [f64; 2] {
    let a = m[0][0];
    let d = m[1][1];
    let b = 0.5 * (m[0][1] + m[1][0]);
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d).powi(2) + b * b).sqrt();
    [mean - radius, mean + radius]
}

/// Spectral radius of a general real 2x2 matrix.
pub fn spectral_radius(m: &Mat2) -> f64 {
    let tr = m[0][0] + m[1][1];
    let det = det2(m);
    let disc = 0.25 * tr * tr - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (0.5 * tr + s).abs().max((0.5 * tr - s).abs())
    } else {
        det.abs().sqrt()
    }
}

/// Richardson-extrapolated central difference f'(x).
pub fn derivative<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    let d = |s: f64| (f(x + s) - f(x - s)) / (2.0 * s);
    let coarse = d(h);
    let fine = d(0.5 * h);
    (4.0 * fine - coarse) / 3.0
}

/// Richardson-extrapolated central-difference gradient of a function of two variables.
pub fn gradient<F: Fn([f64; 2]) -> f64>(f: F, x: [f64; 2], h: f64) -> [f64; 2] {
    [
        derivative(|s| f([s, x[1]]), x[0], h),
        derivative(|s| f([x[0], s]), x[1], h),
    ]
}

/// Raw (unsymmetrized) Hessian estimate from central differences of a
/// central-difference gradient, Richardson-extrapolated in the outer step.
///
/// The inner gradient uses half the outer step, so the two off-diagonal
/// entries come from different stencils and their mismatch measures the
/// truncation error.
pub fn hessian_raw<F: Fn([f64; 2]) -> f64>(f: F, x: [f64; 2], h: f64) -> Mat2 {
    let grad = |p: [f64; 2], s: f64| -> [f64; 2] {
        [
            (f([p[0] + s, p[1]]) - f([p[0] - s, p[1]])) / (2.0 * s),
            (f([p[0], p[1] + s]) - f([p[0], p[1] - s])) / (2.0 * s),
        ]
    };
    let level = |s: f64| -> Mat2 {
        let inner = 0.5 * s;
        let mut m = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut plus = x;
            let mut minus = x;
            plus[j] += s;
            minus[j] -= s;
            let gp = grad(plus, inner);
            let gm = grad(minus, inner);
            for i in 0..2 {
                m[i][j] = (gp[i] - gm[i]) / (2.0 * s);
            }
        }
        m
    };
    let coarse = level(h);
    let fine = level(0.5 * h);
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = (4.0 * fine[i][j] - coarse[i][j]) / 3.0;
        }
    }
    out
}

/// Richardson-extrapolated second-difference Hessian on the compact
/// nine-point stencil. Symmetric by construction.
pub fn hessian<F: Fn([f64; 2]) -> f64>(f: F, x: [f64; 2], h: f64) -> Mat2 {
    let centre = f(x);
    let level = |s: f64| -> Mat2 {
        let at = |a: f64, b: f64| f([x[0] + a, x[1] + b]);
        let h11 = (at(s, 0.0) - 2.0 * centre + at(-s, 0.0)) / (s * s);
        let h22 = (at(0.0, s) - 2.0 * centre + at(0.0, -s)) / (s * s);
        let h12 = (at(s, s) - at(s, -s) - at(-s, s) + at(-s, -s)) / (4.0 * s * s);
        [[h11, h12], [h12, h22]]
    };
    let coarse = level(h);
    let fine = level(0.5 * h);
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = (4.0 * fine[i][j] - coarse[i][j]) / 3.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_sine() {
        let d = derivative(f64::sin, 0.7, 1e-3);
        assert!((d - 0.7f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn hessians_of_cubic() {
        let f = |p: [f64; 2]| p[0].powi(3) + 2.0 * p[0] * p[1] * p[1] - p[1];
        let x = [0.3, -0.4];
        let exact = [[6.0 * x[0], 4.0 * x[1]], [4.0 * x[1], 4.0 * x[0]]];
        for m in [hessian(f, x, 1e-3), hessian_raw(f, x, 1e-3)] {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((m[i][j] - exact[i][j]).abs() < 1e-7, "{m:?}");
                }
            }
        }
    }

    #[test]
    fn eigenvalues_and_radius() {
        let m = [[2.0, 1.0], [1.0, 2.0]];
        assert_eq!(sym_eigenvalues(&m), [1.0, 3.0]);
        assert!((spectral_radius(&m) - 3.0).abs() < 1e-15);
        let rot = [[0.0, -2.0], [2.0, 0.0]];
        assert!((spectral_radius(&rot) - 2.0).abs() < 1e-15);
    }
}
