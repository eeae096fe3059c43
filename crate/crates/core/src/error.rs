use std::fmt;

use thiserror::Error;

/// One failed model invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violations(pub Vec<Violation>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

impl Violations {
    pub fn mentions(&self, needle: &str) -> bool {
        self.0.iter().any(|v| v.message.contains(needle))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    Invalid(Violations),
    #[error("a dirac hazard has no pointwise rate")]
    DiracHazardNotPointwise,
    #[error("state is not in the reproductive region")]
    NotReproductive,
    #[error("trajectory left the domain through component {component} at theta = {theta}")]
    LeftDomain { component: usize, theta: f64 },
    #[error("integrator could not reach the requested tolerance")]
    ToleranceNotMet,
    #[error("{what} = {value} is out of range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("requested time pushes size past the maximum")]
    ExceedsMaxSize,
    #[error("finite-difference perturbation leaves the domain")]
    PerturbationLeavesDomain,
    #[error("t = {t} is not below age a = {a}; use the boundary branch")]
    WrongBranch { t: f64, a: f64 },
    #[error("birth function undefined at t = {t} (horizon {horizon})")]
    BirthFunctionUndefined { t: f64, horizon: f64 },
    #[error("operation requires a smooth (non-dirac) hazard")]
    RequiresSmoothHazard,
    #[error("series did not converge within {n_max} terms")]
    NotConverged { n_max: usize },
    #[error("Laplace transform diverges for lambda = {lambda} (needs > {bound})")]
    DivergentTransform { lambda: f64, bound: f64 },
    #[error("power iteration stalled after {iters} iterations")]
    PowerIterationStalled { iters: usize },
    #[error("no bracket for r(lambda) = 1: the population never renews")]
    NoBracket,
    #[error("agent count exceeded the cap of {cap}")]
    PopulationExplosion { cap: usize },
    #[error("insufficient data for a growth-rate fit")]
    InsufficientData,
    #[error("time {t} was not sampled by the census")]
    TimeNotSampled { t: f64 },
    #[error("invalid initial cohort: {0}")]
    InvalidCohort(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code: 1 config/validation, 2 numerical, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_)
            | Error::Config(_)
            | Error::InvalidCohort(_)
            | Error::Unsupported(_)
            | Error::OutOfRange { .. }
            | Error::NotReproductive
            | Error::DiracHazardNotPointwise
            | Error::RequiresSmoothHazard => 1,
            Error::Io(_) => 3,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
