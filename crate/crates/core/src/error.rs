use thiserror::Error;

/// Errors raised by the trajectory engine and the verification routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("point is not on the boundary: |xi(x)| = {residual:e} exceeds {tolerance:e}")]
    NotOnBoundary { residual: f64, tolerance: f64 },

    #[error("gradient of xi is degenerate (|grad xi| = {norm:e})")]
    DegenerateGradient { norm: f64 },

    #[error("point lies outside the tubular neighbourhood (distance {distance:e} >= {tube:e})")]
    OutsideTube { distance: f64, tube: f64 },

    #[error("nearest-point solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("malformed field: derivative check failed with relative error {error:e}")]
    MalformedField { error: f64 },

    #[error("integrator failed: {0}")]
    StepFailure(String),

    #[error("grazing stall at s = {time}: |n.v| = {v_perp:e} below floor {floor:e}")]
    GrazingStall { time: f64, v_perp: f64, floor: f64 },

    #[error("trajectory did not leave the domain within {duration} time units")]
    NoExit { duration: f64 },

    #[error("coordinates are outside the chart domain: {0}")]
    OutOfChart(String),

    #[error("point is within {distance:e} of the chart pole axis (exclusion {exclusion:e})")]
    NearPole { distance: f64, exclusion: f64 },

    #[error("point is outside the chart tube: |xi(x)| = {xi:e}")]
    OutOfTube { xi: f64 },

    #[error("singular metric: det(g) = {det:e}")]
    SingularMetric { det: f64 },

    #[error("cycle exceeded {max_bounces} bounces")]
    MaxBouncesExceeded { max_bounces: usize },

    #[error("cycle has {found} bounces, {required} required")]
    InsufficientBounces { found: usize, required: usize },

    #[error("Monte-Carlo relative standard error {rel_se:.3} exceeds {limit:.3}")]
    MCVarianceTooHigh { rel_se: f64, limit: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
