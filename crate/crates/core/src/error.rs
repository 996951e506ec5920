use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid of {grid} intervals cannot resolve {modes} modes (aliasing)")]
    Aliasing { grid: usize, modes: usize },

    #[error("field does not vanish at the endpoints (left={left:.3e}, right={right:.3e})")]
    DirichletViolation { left: f64, right: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("structural zero in <mu phi, phi_k> at k={k}")]
    DivisionByStructuralZero { k: usize },

    #[error("moment problem ill-posed (sigma_min/sigma_max = {ratio:.3e}); increase T or decrease K")]
    IllPosed { ratio: f64 },

    #[error("control span deficient: residual {residual:.3e} on component {component}")]
    SpanDeficient { residual: f64, component: String },

    #[error("local existence exceeded at t={time:.6}: H3 norm {norm:.3e} above ceiling {ceiling:.3e}")]
    LocalExistenceExceeded { time: f64, norm: f64, ceiling: f64 },

    #[error("linearized control deficient: relative residual {residual:.3e}")]
    ControlDeficient {
        residual: f64,
        /// Stacked (re, im) modal coefficients of the dominant unreachable direction.
        direction: Vec<f64>,
    },

    #[error("fixed point did not converge after {iterations} iterations (last update {update:.3e})")]
    NoConvergence { iterations: usize, update: f64 },

    #[error("time grid mismatch: {0}")]
    TimeGridMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
