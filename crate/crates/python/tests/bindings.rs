use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(akpz::akpz)(py);
        let globals = PyDict::new(py);
        globals.set_item("akpz", m).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn models_and_speeds() {
    with_module(c_str!(
        r#"
hc = akpz.DimerModel("honeycomb")
z = hc.z_from_slope(0.3, 0.25)
r = hc.slope_from_z(z)
assert abs(r[0] - 0.3) < 1e-10 and abs(r[1] - 0.25) < 1e-10, r
assert abs(hc.solve_w(z) - (1 - z)) < 1e-12
v = akpz.SpeedFunction("im-z", hc)
det, label = v.classify(0.3, 0.25)
assert label in ("AKPZ", "DEGENERATE"), label
assert abs(v.laplacian_f(z)) < 1e-6
try:
    akpz.DimerModel("cubic")
    raise AssertionError("accepted cubic")
except ValueError:
    pass
"#
    ));
}

#[test]
fn sigma_routes_agree() {
    with_module(c_str!(
        r#"
import math
hc = akpz.DimerModel("honeycomb")
lob = lambda p: akpz.lobachevsky(math.pi * p)
exact = -(lob(0.2) + lob(0.35) + lob(0.45)) / math.pi
assert abs(hc.sigma(0.2, 0.35) - exact) < 1e-10
h = hc.sigma_hessian(0.2, 0.35)
assert h[0][0] > 0 and h[0][0] * h[1][1] - h[0][1] ** 2 > 0
"#
    ));
}

#[test]
fn shapes_and_runs() {
    with_module(c_str!(
        r#"
hc = akpz.DimerModel("honeycomb")
h = akpz.build_height(hc, "burgers:const-i", (17, 17))
assert len(h) == 17 and len(h[0]) == 17
assert akpz.max_el_residual(hc, h) < 1e-2
run = akpz.run_preservation(grid=(17, 17), outputs=2)
assert len(run.records) == 3
assert 0 < run.t_final <= 0.8 * run.t_max + 1e-15
assert run.trace_csv().startswith("t,max_EL")
"#
    ));
}
