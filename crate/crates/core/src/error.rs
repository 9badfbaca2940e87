use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("quadratic form is zero (amplitude {tau:e} below tolerance {tol:e})")]
    ZeroForm { tau: f64, tol: f64 },
    #[error("matrix is not orthogonal (|QᵀQ − I| = {defect:e})")]
    NotOrthogonal { defect: f64 },
    #[error("point is not on the unit sphere (|x| = {norm})")]
    NotUnit { norm: f64 },
    #[error("derivatives of Z_p are undefined at the origin")]
    OriginDerivative,
    #[error("fixed-point iteration did not converge in {iterations} steps (last change {last_change:e})")]
    MaxIterations { iterations: usize, last_change: f64 },
    #[error("inner linear solve diverged (residual {residual:e})")]
    InnerDivergence { residual: f64 },
    #[error("resolution too coarse: {0}")]
    TooCoarse(String),
    #[error("trajectory did not converge (final alignment {alignment})")]
    NotConverged { alignment: f64 },
    #[error("isosurface is empty")]
    EmptySurface,
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
