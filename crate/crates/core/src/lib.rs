//! Numerical laboratory for two-dimensional interface growth driven by a
//! slope-dependent speed `v(rho)`: dimer surface tensions, equilibrium
//! shapes, the complex Burgers equation, and the sign of `det D^2 v`.

// `!(x > 0.0)` is used on purpose to reject NaN; stencil loops index several arrays.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acceptance;
pub mod dimer;
pub mod error;
pub mod evolution;
pub mod fd;
pub mod oracles;
pub mod grid;
pub mod quadrature;
pub mod shapes;
pub mod speed;
pub mod surface_tension;

pub use dimer::{DimerModel, NewtonPolygon, Slope, DEFAULT_MARGIN};
pub use error::{Error, Result};
pub use surface_tension::{
    Quadrature, RonkinEvaluation, SigmaEvaluation, SigmaOptions, SigmaRoute, SurfaceTensionMatrix,
};
pub use speed::{akpz_classify, akpz_map, speed_hessian, AkpzClassification, AkpzLabel, SpeedFunction};
pub use evolution::{
    evolve_characteristics, evolve_viscous, r_probe, run_preservation_experiment, EvolutionTrace, PreservationConfig,
};
