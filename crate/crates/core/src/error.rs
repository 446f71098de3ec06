use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A derivative callable required by the requested operation was not supplied
    /// and finite-difference fallback is disabled.
    #[error("configuration error: missing {0}")]
    MissingDerivative(&'static str),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    /// `h + m` changes sign more than once across the bisection bracket.
    #[error("h+m is not monotone in x1 at t={t}: {crossings} sign changes in bracket")]
    NonMonotoneGenerator { t: f64, crossings: usize },

    #[error("boundary evaluates to NaN at t={t}, tail={tail:?}")]
    BoundaryNan { t: f64, tail: Vec<f64> },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("PSOR did not converge on time slice {slice}: residual {residual:e}")]
    PsorDivergence { slice: usize, residual: f64 },

    #[error("explicit scheme violates the CFL bound: dt={dt} but at most {required} is stable")]
    Cfl { dt: f64, required: f64 },

    #[error("point too close to the grid edge: {0}")]
    EdgeProximity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("denominator w°1 is not significantly positive: mean {mean:e}, std error {std_error:e}")]
    DegenerateDenominator { mean: f64, std_error: f64 },

    #[error("window contains {} infinite boundary cells (first: {:?})", .0.len(), .0.first())]
    InfiniteCells(Vec<Vec<f64>>),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
}

pub type Result<T> = core::result::Result<T, Error>;
