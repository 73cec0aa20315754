use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point k = {k} coincides with the branch point of mode {n} (threshold {threshold}); use threshold-local coordinates")]
    BranchPoint { n: u32, k: f64, threshold: f64 },
    #[error("mode index {n} is not valid for {bc} boundary conditions")]
    InvalidMode { n: u32, bc: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("stability condition violated: {0}")]
    Unstable(String),
    #[error("function vanishes (or nearly) on the contour: min |f| = {min_abs:e}")]
    BoundaryZero { min_abs: f64 },
    #[error("winding number is not resolved to an integer (value {value})")]
    NonIntegerWinding { value: f64 },
    #[error("linear algebra failure: {0}")]
    Singular(String),
    #[error("series tail bound {bound:e} exceeds tolerance {tol:e}")]
    TailTooLarge { bound: f64, tol: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, Error>;
