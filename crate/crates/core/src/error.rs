use thiserror::Error;

/// Every failure the solver library can report.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("grid error: {0}")]
    Grid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error in `{component}`: expected {expected}, got {got}")]
    Shape {
        component: String,
        expected: String,
        got: String,
    },

    #[error("simulation error at path {path}, step {step}: {reason}")]
    Simulation {
        path: usize,
        step: usize,
        reason: String,
    },

    #[error("data error in column {column}: {reason}")]
    Data { column: usize, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("PDE blow-up at s = {s}, t = {t}, x = {x}: |v| = {value:e}")]
    BlowUp { s: f64, t: f64, x: f64, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("Picard iteration did not converge after {} iterations (distance {distance:e}, tolerance {tol:e})", trace.len())]
    NonConvergence {
        trace: Vec<f64>,
        distance: f64,
        tol: f64,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
