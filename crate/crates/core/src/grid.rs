//! Rectangular node grids, masked fields on them, and the central-difference
//! stencils shared by the residual operators.
//!
//! Node `(i, j)` sits at `origin + (i dx1, j dx2)`; `i` runs along `x1`.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::Mat2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub n1: usize,
    pub n2: usize,
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
}

impl GridGeometry {
    pub fn new(n1: usize, n2: usize, origin: [f64; 2], spacing: [f64; 2]) -> Result<Self> {
        if n1 < 3 || n2 < 3 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 3x3 nodes, got {n1}x{n2}"
            )));
        }
        if !(spacing[0] > 0.0 && spacing[1] > 0.0) || !origin.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bad grid origin {origin:?} / spacing {spacing:?}"
            )));
        }
        Ok(GridGeometry { n1, n2, origin, spacing })
    }

    /// `n1 x n2` nodes spanning the closed box `[lo, hi]`.
    pub fn from_extent(n1: usize, n2: usize, lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        if n1 < 2 || n2 < 2 || !(hi[0] > lo[0] && hi[1] > lo[1]) {
            return Err(Error::InvalidArgument(format!(
                "bad extent {lo:?}..{hi:?} for a {n1}x{n2} grid"
            )));
        }
        GridGeometry::new(
            n1,
            n2,
            lo,
            [(hi[0] - lo[0]) / (n1 - 1) as f64, (hi[1] - lo[1]) / (n2 - 1) as f64],
        )
    }

    pub fn upper(&self) -> [f64; 2] {
        self.point(self.n1 - 1, self.n2 - 1)
    }

    /// Same extent, spacing halved.
    pub fn refined(&self) -> Self {
        GridGeometry {
            n1: 2 * self.n1 - 1,
            n2: 2 * self.n2 - 1,
            origin: self.origin,
            spacing: [0.5 * self.spacing[0], 0.5 * self.spacing[1]],
        }
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n2 + j
    }

    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k / self.n2, k % self.n2)
    }

    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
        ]
    }

    /// Nodes at least `ring` away from the edge.
    pub fn is_inside(&self, i: usize, j: usize, ring: usize) -> bool {
        i >= ring && j >= ring && i + ring < self.n1 && j + ring < self.n2
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        !self.is_inside(i, j, 1)
    }

    pub fn interior_count(&self) -> usize {
        (self.n1 - 2) * (self.n2 - 2)
    }

    /// Index of the node closest to `x`.
    pub fn nearest(&self, x: [f64; 2]) -> (usize, usize) {
        let f = |d: usize, n: usize| {
            let t = ((x[d] - self.origin[d]) / self.spacing[d]).round();
            t.clamp(0.0, (n - 1) as f64) as usize
        };
        (f(0, self.n1), f(1, self.n2))
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing[0].max(self.spacing[1])
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing[0] * self.spacing[1]
    }
}

/// Values on a grid with a per-node validity mask (`false` = masked).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field<T> {
    pub geometry: GridGeometry,
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

pub type HeightField = Field<f64>;
pub type RealField = Field<f64>;
pub type ComplexField = Field<Complex64>;

impl<T: Copy> Field<T> {
    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut([f64; 2]) -> T) -> Self {
        let mut values = Vec::with_capacity(geometry.len());
        for i in 0..geometry.n1 {
            for j in 0..geometry.n2 {
                values.push(f(geometry.point(i, j)));
            }
        }
        Field {
            geometry,
            valid: vec![true; values.len()],
            values,
        }
    }

    pub fn filled(geometry: GridGeometry, value: T) -> Self {
        Field {
            geometry,
            values: vec![value; geometry.len()],
            valid: vec![true; geometry.len()],
        }
    }

    pub fn from_values(geometry: GridGeometry, values: Vec<T>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {}x{} grid",
                values.len(),
                geometry.n1,
                geometry.n2
            )));
        }
        Ok(Field {
            geometry,
            valid: vec![true; values.len()],
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[self.geometry.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        let k = self.geometry.index(i, j);
        self.values[k] = value;
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[self.geometry.index(i, j)]
    }

    pub fn mask(&mut self, i: usize, j: usize) {
        let k = self.geometry.index(i, j);
        self.valid[k] = false;
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// The nine nodes around `(i, j)` are all valid.
    pub fn stencil_valid(&self, i: usize, j: usize) -> bool {
        self.geometry.is_inside(i, j, 1)
            && (i - 1..=i + 1).all(|a| (j - 1..=j + 1).all(|b| self.is_valid(a, b)))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Field<U> {
        Field {
            geometry: self.geometry,
            values: self.values.iter().map(|&v| f(v)).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Values at the nodes of `coarse`, which must be this grid with every
    /// other node removed.
    pub fn restrict_to(&self, coarse: &GridGeometry) -> Result<Field<T>> {
        let g = &self.geometry;
        let stride = (g.n1 - 1) / (coarse.n1 - 1).max(1);
        let compatible = stride >= 1
            && g.n1 - 1 == stride * (coarse.n1 - 1)
            && g.n2 - 1 == stride * (coarse.n2 - 1)
            && g.origin == coarse.origin;
        if !compatible {
            return Err(Error::InvalidArgument(
                "restriction target is not a coarsening of this grid".into(),
            ));
        }
        let mut out = Field::filled(*coarse, self.values[0]);
        for i in 0..coarse.n1 {
            for j in 0..coarse.n2 {
                let k = self.geometry.index(stride * i, stride * j);
                let c = coarse.index(i, j);
                out.values[c] = self.values[k];
                out.valid[c] = self.valid[k];
            }
        }
        Ok(out)
    }
}

impl Field<f64> {
    /// Largest `|value|` over valid nodes at least `ring` from the edge.
    pub fn max_abs(&self, ring: usize) -> f64 {
        self.iter_inside(ring)
            .map(|(_, _, v)| v.abs())
            .fold(0.0, f64::max)
    }
}

impl Field<Complex64> {
    pub fn max_abs(&self, ring: usize) -> f64 {
        self.iter_inside(ring)
            .map(|(_, _, v)| v.norm())
            .fold(0.0, f64::max)
    }

    /// `Im z > 0` at every valid node and neighbouring arguments differ by
    /// less than `pi / 2`.
    pub fn is_branch_consistent(&self) -> bool {
        let g = &self.geometry;
        for i in 0..g.n1 {
            for j in 0..g.n2 {
                if !self.is_valid(i, j) {
                    continue;
                }
                let z = self.get(i, j);
                if !(z.im > 0.0) {
                    return false;
                }
                for (a, b) in [(i + 1, j), (i, j + 1)] {
                    if a < g.n1 && b < g.n2 && self.is_valid(a, b) {
                        let d = (self.get(a, b).arg() - z.arg()).abs();
                        if d >= std::f64::consts::FRAC_PI_2 {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

impl<T: Copy> Field<T> {
    /// Valid nodes at least `ring` from the edge, row-major.
    pub fn iter_inside(&self, ring: usize) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let g = self.geometry;
        (0..g.len()).filter_map(move |k| {
            let (i, j) = g.coords(k);
            (g.is_inside(i, j, ring) && self.valid[k]).then(|| (i, j, self.values[k]))
        })
    }
}

/// Second-order central first derivatives at an interior node.
pub fn central_gradient<T>(f: &Field<T>, i: usize, j: usize) -> [T; 2]
where
    T: Copy + std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let [dx1, dx2] = f.geometry.spacing;
    [
        (f.get(i + 1, j) - f.get(i - 1, j)) * (0.5 / dx1),
        (f.get(i, j + 1) - f.get(i, j - 1)) * (0.5 / dx2),
    ]
}

/// Fourth-order central first derivatives; needs two rings.
pub fn central_gradient4<T>(f: &Field<T>, i: usize, j: usize) -> [T; 2]
where
    T: Copy + std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    let [dx1, dx2] = f.geometry.spacing;
    let d = |pp: T, p: T, m: T, mm: T, h: f64| ((p - m) * 8.0 - (pp - mm)) * (1.0 / (12.0 * h));
    [
        d(f.get(i + 2, j), f.get(i + 1, j), f.get(i - 1, j), f.get(i - 2, j), dx1),
        d(f.get(i, j + 2), f.get(i, j + 1), f.get(i, j - 1), f.get(i, j - 2), dx2),
    ]
}

/// Second-order central Hessian at an interior node.
pub fn central_hessian(h: &Field<f64>, i: usize, j: usize) -> Mat2 {
    let [dx1, dx2] = h.geometry.spacing;
    let c = h.get(i, j);
    let h11 = (h.get(i + 1, j) - 2.0 * c + h.get(i - 1, j)) / (dx1 * dx1);
    let h22 = (h.get(i, j + 1) - 2.0 * c + h.get(i, j - 1)) / (dx2 * dx2);
    let h12 = (h.get(i + 1, j + 1) - h.get(i + 1, j - 1) - h.get(i - 1, j + 1)
        + h.get(i - 1, j - 1))
        / (4.0 * dx1 * dx2);
    [[h11, h12], [h12, h22]]
}

/// Five-point Laplacian at an interior node.
pub fn laplacian5(h: &Field<f64>, i: usize, j: usize) -> f64 {
    let m = central_hessian(h, i, j);
    m[0][0] + m[1][1]
}

/// Header written next to field CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub geometry: GridGeometry,
    pub model: String,
    pub quantity: String,
    pub columns: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub branch: Option<[i32; 2]>,
    pub version: String,
}

/// Formats a float with 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Columns of a field CSV row.
pub trait CsvValue: Copy {
    fn columns(name: &str) -> Vec<String>;
    fn cells(self) -> Vec<String>;
}

impl CsvValue for f64 {
    fn columns(name: &str) -> Vec<String> {
        vec![name.to_string()]
    }
    fn cells(self) -> Vec<String> {
        vec![fmt_f64(self)]
    }
}

impl CsvValue for Complex64 {
    fn columns(name: &str) -> Vec<String> {
        vec![format!("{name}_re"), format!("{name}_im")]
    }
    fn cells(self) -> Vec<String> {
        vec![fmt_f64(self.re), fmt_f64(self.im)]
    }
}

impl<T: CsvValue> Field<T> {
    /// `x1,x2,<value columns>,valid` rows; masked nodes keep their stored value.
    pub fn write_csv<W: Write>(&self, out: &mut W, name: &str) -> Result<()> {
        let mut header = vec!["x1".to_string(), "x2".to_string()];
        header.extend(T::columns(name));
        header.push("valid".into());
        writeln!(out, "{}", header.join(","))?;
        let g = &self.geometry;
        for i in 0..g.n1 {
            for j in 0..g.n2 {
                let [x1, x2] = g.point(i, j);
                let mut row = vec![fmt_f64(x1), fmt_f64(x2)];
                row.extend(self.get(i, j).cells());
                row.push(if self.is_valid(i, j) { "1" } else { "0" }.into());
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, name: &str, model: &str, branch: Option<[i32; 2]>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
        self.write_csv(&mut csv, name)?;
        csv.flush()?;
        let header = FieldHeader {
            geometry: self.geometry,
            model: model.to_string(),
            quantity: name.to_string(),
            columns: {
                let mut c = vec!["x1".to_string(), "x2".to_string()];
                c.extend(T::columns(name));
                c.push("valid".into());
                c
            },
            branch,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn geometry() -> GridGeometry {
        GridGeometry::from_extent(11, 9, [0.0, -1.0], [1.0, 1.0]).unwrap()
    }

    #[test]
    fn geometry_basics() {
        let g = geometry();
        assert_eq!(g.len(), 99);
        assert_abs_diff_eq!(g.upper()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.upper()[1], 1.0, epsilon = 1e-15);
        assert_eq!(g.coords(g.index(3, 4)), (3, 4));
        assert_eq!(g.nearest([0.52, 0.0]), (5, 4));
        assert!(g.is_boundary(0, 3) && g.is_boundary(10, 3) && !g.is_boundary(1, 1));
        assert_eq!(g.refined().n1, 21);
        assert!(GridGeometry::new(2, 5, [0.0; 2], [1.0; 2]).is_err());
    }

    #[test]
    fn stencils_are_exact_on_quadratics() {
        let h = Field::from_fn(geometry(), |x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1]);
        let (i, j) = (4, 5);
        let [x1, x2] = h.geometry.point(i, j);
        let g = central_gradient(&h, i, j);
        assert_abs_diff_eq!(g[0], 2.0 + x1 + 3.0 * x2, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -1.0 + 3.0 * x1 - 2.0 * x2, epsilon = 1e-12);
        let m = central_hessian(&h, i, j);
        assert_abs_diff_eq!(m[0][0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m[0][1], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m[1][1], -2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(laplacian5(&h, i, j), -1.0, epsilon = 1e-10);
        let cubic = Field::from_fn(geometry(), |x| x[0].powi(4) + x[1].powi(3));
        let g4 = central_gradient4(&cubic, 5, 4);
        assert_abs_diff_eq!(g4[0], 4.0 * 0.5f64.powi(3), epsilon = 1e-12);
        assert_abs_diff_eq!(g4[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn restriction_and_masks() {
        let g = geometry();
        let mut fine = Field::from_fn(g.refined(), |x| x[0] + 10.0 * x[1]);
        fine.mask(2, 2);
        let coarse = fine.restrict_to(&g).unwrap();
        assert_abs_diff_eq!(coarse.get(3, 2), g.point(3, 2)[0] + 10.0 * g.point(3, 2)[1], epsilon = 1e-12);
        assert!(!coarse.is_valid(1, 1));
        assert!(!coarse.stencil_valid(2, 2));
        assert!(coarse.stencil_valid(5, 5));
    }

    #[test]
    fn branch_consistency() {
        let g = geometry();
        let z = Field::from_fn(g, |x| Complex64::new(x[0], 1.0 + x[1] * x[1]));
        assert!(z.is_branch_consistent());
        let mut bad = z.clone();
        bad.set(3, 3, Complex64::new(0.5, -0.1));
        assert!(!bad.is_branch_consistent());
    }

    #[test]
    fn csv_round_trip_format() {
        let g = GridGeometry::from_extent(3, 3, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let f = Field::from_fn(g, |x| Complex64::new(x[0], 1.0 / 3.0));
        let mut buf = Vec::new();
        f.write_csv(&mut buf, "z").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x1,x2,z_re,z_im,valid"));
        assert_eq!(
            lines.next(),
            Some("0.0000000000000000e0,0.0000000000000000e0,0.0000000000000000e0,3.3333333333333331e-1,1")
        );
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path(), "zfield", "z", "honeycomb", Some([0, 0])).unwrap();
        let header: FieldHeader =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("zfield.json")).unwrap()).unwrap();
        assert_eq!(header.geometry, g);
    }
}
