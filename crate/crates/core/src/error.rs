use thiserror::Error;

/// Errors raised by grid construction, the solvers and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem specification: {0}")]
    InvalidSpec(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("query ({t}, {x}) lies outside the grid hull [{t_min}, {t_max}] x [{x_min}, {x_max}]")]
    OutOfHull {
        t: f64,
        x: f64,
        t_min: f64,
        t_max: f64,
        x_min: f64,
        x_max: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature did not converge on [{a}, {b}]: estimated error {error:e} after {subdivisions} subdivisions")]
    Quadrature {
        a: f64,
        b: f64,
        error: f64,
        subdivisions: usize,
    },

    #[error("analytic and numerical drift disagree at ({t}, {x}): {analytic} vs {numerical}")]
    DriftMismatch {
        t: f64,
        x: f64,
        analytic: f64,
        numerical: f64,
    },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("maximum principle violated: value {value} at node (t={t}, x={x})")]
    MaximumPrinciple { value: f64, t: f64, x: f64 },

    #[error("statistical test: {0}")]
    Statistics(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
