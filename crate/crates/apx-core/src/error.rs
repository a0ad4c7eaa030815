//! Error type shared by all numerical layers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApxError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("model file error: {0}")]
    InvalidModel(String),

    #[error("stability matrix is singular")]
    SingularStabilityMatrix,

    #[error("mark lattices are incommensurable (no common span)")]
    IncommensurableLattices,

    #[error("tilt continuation stalled before theta = {target}; last solvable theta = {last_theta}")]
    BeyondCriticalTilt { target: f64, last_theta: f64 },

    #[error("Newton Jacobian singular at theta = {theta}")]
    JacobianSingular { theta: f64 },

    #[error("mark MGF domain exceeded: tilt {tilt} >= bound {bound} for event type {event_type}")]
    MgfDomainExceeded {
        event_type: usize,
        tilt: f64,
        bound: f64,
    },

    #[error("target level {level} is not above the mean growth rate {mean_rate}")]
    LevelBelowMean { level: f64, mean_rate: f64 },

    #[error("A(t) failed to decay below tolerance by horizon {horizon}")]
    NoDecay { horizon: f64 },

    #[error("ODE step size underflow at t = {t}")]
    StiffnessFailure { t: f64 },

    #[error("functional growth bound {h_bar} is not below the saddlepoint {h}")]
    GrowthBoundViolated { h_bar: f64, h: f64 },

    #[error("expansion order {order} requires experimental mode")]
    UnsupportedOrder { order: usize },

    #[error("finite-difference stencil leaves the solvable tilt range near theta = {theta}")]
    StencilOutOfDomain { theta: f64 },

    #[error("negative intensity {value} for event type {event_type} during simulation")]
    NegativeIntensity { event_type: usize, value: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("functional not usable here: {0}")]
    UnsupportedFunctional(String),

    #[error("coefficient routes disagree at order {order}: general {general} vs closed {closed}")]
    CoefficientInconsistency {
        order: usize,
        general: f64,
        closed: f64,
    },
}

pub type Result<T> = std::result::Result<T, ApxError>;
