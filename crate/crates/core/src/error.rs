use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("singular point of the spectral curve: {0}")]
    SingularPoint(String),

    #[error("branch error: z = {re} + {im}i is not in the open upper half plane")]
    Branch { re: f64, im: f64 },

    #[error("slope ({0}, {1}) lies outside the liquid region of the Newton polygon")]
    OutsidePolygon(f64, f64),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("|P| = {min_abs:e} on the quadrature nodes at B = ({b1}, {b2}); refinement exhausted")]
    NearZeroOfP { b1: f64, b2: f64, min_abs: f64 },

    #[error("multi-branch spectral curves are not supported (degree {0} in w)")]
    MultiBranch(i32),

    #[error("non-liquid slope ({rho1}, {rho2}) at node ({i}, {j})")]
    NonLiquidNode {
        i: usize,
        j: usize,
        rho1: f64,
        rho2: f64,
    },

    #[error("line search starved after {0} halvings")]
    LineSearch(usize),

    #[error("boundary data is not liquid: {0}")]
    NonLiquidBoundary(String),

    #[error("seed z does not solve the implicit relation: {0}")]
    SeedInconsistency(String),

    #[error("continuation broke down at node ({i}, {j}): {reason}")]
    ContinuationBreakdown { i: usize, j: usize, reason: String },

    #[error("curl inconsistency: plaquette ({i}, {j}) closes to {closure:e} > {tolerance:e}")]
    CurlInconsistency {
        i: usize,
        j: usize,
        closure: f64,
        tolerance: f64,
    },

    #[error("characteristics cross: forward-map Jacobian {jacobian:e} at node ({i}, {j})")]
    Crossing { i: usize, j: usize, jacobian: f64 },

    #[error("time step {dt:e} violates the CFL bound {bound:e}")]
    Cfl { dt: f64, bound: f64 },

    #[error("masked node ({i}, {j}) where a value is required")]
    MaskedNode { i: usize, j: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Io(err.to_string())
    }
}
