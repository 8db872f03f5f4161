use akpz_core::acceptance::run_suite;
use akpz_core::evolution::{PreservationRun, Solver};
use akpz_core::grid::{GridGeometry, HeightField};
use akpz_core::shapes::{build_shape, el_residual, ElOptions, ShapeRecipe, BURGERS_EXTENT};
use akpz_core::surface_tension::{sigma_zmap, SigmaOptions};
use akpz_core::{oracles, Error, PreservationConfig, SigmaRoute, Slope};
use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(akpz, NumericalError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::UnknownModel(_) | Error::OutsidePolygon(..) | Error::Branch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => NumericalError::new_err(e.to_string()),
    }
}

fn route(name: &str) -> PyResult<SigmaRoute> {
    match name {
        "zmap" => Ok(SigmaRoute::ZMap),
        "legendre" => Ok(SigmaRoute::Legendre { step: 1e-3 }),
        _ => Err(PyValueError::new_err(format!("unknown route `{name}`"))),
    }
}

/// `(rho1, rho2, v, det, label)`
type MapRow = (f64, f64, f64, f64, &'static str);

fn rows(h: &HeightField) -> Vec<Vec<f64>> {
    let g = h.geometry;
    (0..g.n1).map(|i| (0..g.n2).map(|j| h.get(i, j)).collect()).collect()
}

/// A dimer model selected by name: "honeycomb" or "square".
#[pyclass(name = "DimerModel", frozen)]
struct PyDimerModel(akpz_core::DimerModel);

#[pymethods]
impl PyDimerModel {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        akpz_core::DimerModel::by_name(name).map(Self).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> &str {
        self.0.name()
    }

    fn solve_w(&self, z: Complex64) -> PyResult<Complex64> {
        self.0.solve_w(z).map_err(to_py)
    }

    /// `(rho1, rho2)` for `z` in the upper half plane.
    fn slope_from_z(&self, z: Complex64) -> PyResult<(f64, f64)> {
        let s = self.0.slope_from_z(z).map_err(to_py)?;
        Ok((s.rho1, s.rho2))
    }

    fn z_from_slope(&self, rho1: f64, rho2: f64) -> PyResult<Complex64> {
        self.0.z_from_slope(Slope::new(rho1, rho2)).map_err(to_py)
    }

    #[pyo3(signature = (rho1, rho2, margin = akpz_core::DEFAULT_MARGIN))]
    fn is_liquid(&self, rho1: f64, rho2: f64, margin: f64) -> bool {
        self.0.is_liquid(Slope::new(rho1, rho2), margin)
    }

    /// Surface tension through the z-map closed form, or by maximising
    /// over the Ronkin function (`route="legendre"`).
    #[pyo3(signature = (rho1, rho2, route = "zmap"))]
    fn sigma(&self, rho1: f64, rho2: f64, route: &str) -> PyResult<f64> {
        let rho = Slope::new(rho1, rho2);
        match route {
            "zmap" => sigma_zmap(&self.0, rho).map_err(to_py),
            "legendre" => akpz_core::surface_tension::sigma(&self.0, rho, &SigmaOptions { margin: 0.0, ..Default::default() })
                .map(|s| s.value)
                .map_err(to_py),
            _ => Err(PyValueError::new_err(format!("unknown route `{route}`"))),
        }
    }

    #[pyo3(signature = (rho1, rho2, route = "zmap"))]
    fn sigma_hessian(&self, rho1: f64, rho2: f64, route: &str) -> PyResult<[[f64; 2]; 2]> {
        let r = self::route(route)?;
        r.hessian(&self.0, Slope::new(rho1, rho2)).map(|m| m.sigma).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("DimerModel('{}')", self.0.name())
    }
}

/// Speed of growth from a preset name, e.g. "im-z" or "quadratic:1,0,1".
#[pyclass(name = "SpeedFunction", frozen)]
struct PySpeed(akpz_core::SpeedFunction);

#[pymethods]
impl PySpeed {
    #[new]
    fn new(preset: &str, model: &PyDimerModel) -> PyResult<Self> {
        akpz_core::SpeedFunction::from_preset(preset, &model.0).map(Self).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> &str {
        self.0.name()
    }

    fn __call__(&self, rho1: f64, rho2: f64) -> PyResult<f64> {
        self.0.eval(Slope::new(rho1, rho2)).map_err(to_py)
    }

    fn hessian(&self, rho1: f64, rho2: f64) -> PyResult<[[f64; 2]; 2]> {
        akpz_core::speed_hessian(&self.0, Slope::new(rho1, rho2), akpz_core::speed::DEFAULT_HESSIAN_STEP)
            .map(|h| h.symmetric)
            .map_err(to_py)
    }

    /// `(det D^2 v, label)` with label AKPZ, ISOTROPIC or DEGENERATE.
    #[pyo3(signature = (rho1, rho2, tolerance = akpz_core::speed::DEFAULT_TAU))]
    fn classify(&self, rho1: f64, rho2: f64, tolerance: f64) -> PyResult<(f64, &'static str)> {
        let c = akpz_core::akpz_classify(&self.0, Slope::new(rho1, rho2), tolerance).map_err(to_py)?;
        Ok((c.det, c.label.as_str()))
    }

    /// `[(rho1, rho2, v, det, label), ...]` over the liquid region.
    #[pyo3(signature = (resolution = 50, margin = akpz_core::DEFAULT_MARGIN, tolerance = akpz_core::speed::DEFAULT_TAU))]
    fn akpz_map(
        &self,
        py: Python<'_>,
        resolution: usize,
        margin: f64,
        tolerance: f64,
    ) -> PyResult<Vec<MapRow>> {
        let map = py.detach(|| akpz_core::akpz_map(&self.0, resolution, margin, tolerance)).map_err(to_py)?;
        Ok(map.iter().map(|c| (c.rho.rho1, c.rho.rho2, c.speed, c.det, c.label.as_str())).collect())
    }

    fn laplacian_f(&self, z: Complex64) -> PyResult<f64> {
        self.0.laplacian_f_extrapolated(z).map_err(to_py)
    }
}

fn geometry(grid: (usize, usize), extent: Option<[f64; 4]>) -> PyResult<GridGeometry> {
    let (lo, hi) = match extent {
        Some([a, b, c, d]) => ([a, b], [c, d]),
        None => BURGERS_EXTENT,
    };
    GridGeometry::from_extent(grid.0, grid.1, lo, hi).map_err(to_py)
}

/// Height profile `h[i][j]` from `"burgers:<C>"` or `"affine:<rho1>,<rho2>"`.
#[pyfunction]
#[pyo3(signature = (model, recipe = "burgers:const-i", grid = (33, 33), extent = None))]
fn build_height(model: &PyDimerModel, recipe: &str, grid: (usize, usize), extent: Option<[f64; 4]>) -> PyResult<Vec<Vec<f64>>> {
    let recipe = ShapeRecipe::parse(recipe).map_err(to_py)?;
    let shape = build_shape(&model.0, &recipe, geometry(grid, extent)?).map_err(to_py)?;
    Ok(rows(&shape.height))
}

/// Max interior Euler-Lagrange residual of `h[i][j]` on the given grid.
#[pyfunction]
#[pyo3(signature = (model, height, extent = None))]
fn max_el_residual(model: &PyDimerModel, height: Vec<Vec<f64>>, extent: Option<[f64; 4]>) -> PyResult<f64> {
    let n1 = height.len();
    let n2 = height.first().map_or(0, Vec::len);
    if height.iter().any(|r| r.len() != n2) {
        return Err(PyValueError::new_err("ragged height array"));
    }
    let g = geometry((n1, n2), extent)?;
    let h = HeightField::from_values(g, height.concat()).map_err(to_py)?;
    el_residual(&h, &model.0, &ElOptions::default()).map(|r| r.max_el()).map_err(to_py)
}

/// Result of an evolution run.
#[pyclass(name = "PreservationRun", frozen)]
struct PyRun(PreservationRun);

#[pymethods]
impl PyRun {
    #[getter]
    fn t_max(&self) -> f64 {
        self.0.trace.t_max
    }

    #[getter]
    fn t_final(&self) -> f64 {
        self.0.trace.t_final
    }

    #[getter]
    fn max_el(&self) -> f64 {
        self.0.trace.max_el()
    }

    #[getter]
    fn max_delta(&self) -> f64 {
        self.0.trace.max_delta()
    }

    #[getter]
    fn max_r(&self) -> f64 {
        self.0.trace.max_r()
    }

    #[getter]
    fn solver_difference(&self) -> Option<f64> {
        self.0.trace.solver_difference
    }

    /// `[(t, max_EL, max_Delta, R_probe), ...]`
    #[getter]
    fn records(&self) -> Vec<(f64, f64, f64, f64)> {
        self.0.trace.records.iter().map(|r| (r.t, r.max_el, r.max_delta, r.r_probe)).collect()
    }

    #[getter]
    fn initial(&self) -> Vec<Vec<f64>> {
        rows(&self.0.initial)
    }

    #[getter]
    fn final_height(&self) -> Vec<Vec<f64>> {
        rows(&self.0.final_height)
    }

    fn trace_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.0.trace.write_csv(&mut buf).map_err(to_py)?;
        Ok(String::from_utf8(buf).expect("CSV is ASCII"))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.trace).map_err(|e| NumericalError::new_err(e.to_string()))
    }
}

#[pyfunction]
#[pyo3(signature = (
    model = "honeycomb", speed = "im-z", shape = "burgers:const-i", grid = (65, 65), extent = None,
    t_final = None, solver = "char", nu = None, dt = None, outputs = 4
))]
#[allow(clippy::too_many_arguments)]
fn run_preservation(
    py: Python<'_>,
    model: &str,
    speed: &str,
    shape: &str,
    grid: (usize, usize),
    extent: Option<[f64; 4]>,
    t_final: Option<f64>,
    solver: &str,
    nu: Option<f64>,
    dt: Option<f64>,
    outputs: usize,
) -> PyResult<PyRun> {
    let (lo, hi) = match extent {
        Some([a, b, c, d]) => ([a, b], [c, d]),
        None => BURGERS_EXTENT,
    };
    let cfg = PreservationConfig {
        model: model.into(),
        speed: speed.into(),
        shape: ShapeRecipe::parse(shape).map_err(to_py)?,
        grid: [grid.0, grid.1],
        extent: [lo, hi],
        t_final,
        outputs,
        solver: solver.parse::<Solver>().map_err(to_py)?,
        nu,
        dt,
        probe: None,
    };
    py.detach(|| akpz_core::run_preservation_experiment(&cfg)).map(PyRun).map_err(to_py)
}

/// `[(id, passed, summary), ...]` for the selected acceptance criteria.
#[pyfunction]
#[pyo3(signature = (only = None))]
fn run_acceptance(py: Python<'_>, only: Option<Vec<u8>>) -> Vec<(u8, bool, String)> {
    py.detach(|| run_suite(only.as_deref()))
        .into_iter()
        .map(|r| (r.id, r.passed, r.line()))
        .collect()
}

#[pyfunction]
fn lobachevsky(x: f64) -> PyResult<f64> {
    if !(0.0..=std::f64::consts::PI).contains(&x) {
        return Err(PyValueError::new_err(format!("{x} outside [0, pi]")));
    }
    Ok(oracles::lobachevsky(x))
}

#[pymodule]
pub fn akpz(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDimerModel>()?;
    m.add_class::<PySpeed>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(build_height, m)?)?;
    m.add_function(wrap_pyfunction!(max_el_residual, m)?)?;
    m.add_function(wrap_pyfunction!(run_preservation, m)?)?;
    m.add_function(wrap_pyfunction!(run_acceptance, m)?)?;
    m.add_function(wrap_pyfunction!(lobachevsky, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
