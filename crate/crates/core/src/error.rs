use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("not a probability measure (mass {0})")]
    NotProbability(f64),
    #[error("point {0} is not in the open upper half-plane")]
    OutOfHalfPlane(String),
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),
    #[error("window too small: {leak:.3e} of the mass lies outside")]
    WindowTooSmall { leak: f64 },
    #[error("derivative at infinity did not converge (relative change {0:.3e})")]
    NonconvergentDerivativeAtInfinity(f64),
    #[error("function is not in the class P2: {0}")]
    NotP2(String),
    #[error("inversion left the cone: {0}")]
    OutOfCone(String),
    #[error("root finder accounted for mass {0} only")]
    MassLeak(f64),
    #[error("fixed point iteration stalled after {0} iterations")]
    FixedPointStall(usize),
    #[error("order {0} exceeds the supported maximum")]
    TooLarge(usize),
    #[error("time {0} sits on a grid node, slope is ambiguous")]
    AmbiguousSlope(f64),
    #[error("ODE step size underflow at u = {0}")]
    StepUnderflow(f64),
    #[error("solver inconsistency: {0}")]
    SolverInconsistent(String),
    #[error("point outside the continuation domain: {0}")]
    OutsideContinuationDomain(String),
    #[error("no exact formula for this hull")]
    NoExactFormula,
    #[error("walk budget exhausted without exit")]
    WalkTimeout,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("invalid family: {0}")]
    InvalidFamily(String),
    #[error("invalid driving spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Stable machine-readable tag.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidMeasure(_) => "InvalidMeasure",
            Error::NotProbability(_) => "NotProbability",
            Error::OutOfHalfPlane(_) => "OutOfHalfPlane",
            Error::NumericalDomain(_) => "NumericalDomain",
            Error::WindowTooSmall { .. } => "WindowTooSmall",
            Error::NonconvergentDerivativeAtInfinity(_) => "NonconvergentDerivativeAtInfinity",
            Error::NotP2(_) => "NotP2",
            Error::OutOfCone(_) => "OutOfCone",
            Error::MassLeak(_) => "MassLeak",
            Error::FixedPointStall(_) => "FixedPointStall",
            Error::TooLarge(_) => "TooLarge",
            Error::AmbiguousSlope(_) => "AmbiguousSlope",
            Error::StepUnderflow(_) => "StepUnderflow",
            Error::SolverInconsistent(_) => "SolverInconsistent",
            Error::OutsideContinuationDomain(_) => "OutsideContinuationDomain",
            Error::NoExactFormula => "NoExactFormula",
            Error::WalkTimeout => "WalkTimeout",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::InvalidFamily(_) => "InvalidFamily",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidArgument(_) => "InvalidArgument",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
