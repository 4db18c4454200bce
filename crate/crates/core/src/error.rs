use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode in the crate, each with a stable machine-readable
/// reason via [`Error::reason`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("truncation mismatch: {left} vs {right}")]
    TruncationMismatch { left: usize, right: usize },
    #[error("edge ({from},{to}) is not present in the model")]
    EdgeNotPresent { from: i64, to: i64 },
    #[error("model has no stationary law: {0}")]
    Instability(String),
    #[error("model is not A1/A2 compliant: {0}")]
    NotCompliant(String),
    #[error("interacting model not supported here: {0}")]
    InteractingModel(String),
    #[error("step size underflow at t = {t}")]
    Stiffness { t: f64 },
    #[error("equilibrium not found after {iterations} iterations (residual {residual:e})")]
    EquilibriumNotFound { iterations: usize, residual: f64 },
    #[error("infeasible trajectory: {0}")]
    InfeasibleTrajectory(String),
    #[error("endpoint mismatch: distance {0:e}")]
    EndpointMismatch(f64),
    #[error("connector phase produced negative mass: {0}")]
    PhaseOrdering(String),
    #[error("tail profile is undeclared, finiteness is undecidable")]
    UndecidableProfile,
    #[error("neighbourhood not reached within horizon {0}")]
    HorizonExceeded(f64),
    #[error("absorbing state: total jump rate is zero")]
    AbsorbingState,
    #[error("particle pushed above z_max = {0}")]
    TruncationOverflow(usize),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn reason(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::TruncationMismatch { .. } => "truncation_mismatch",
            Error::EdgeNotPresent { .. } => "edge_not_present",
            Error::Instability(_) => "instability",
            Error::NotCompliant(_) => "not_compliant",
            Error::InteractingModel(_) => "interacting_model",
            Error::Stiffness { .. } => "stiffness",
            Error::EquilibriumNotFound { .. } => "equilibrium_not_found",
            Error::InfeasibleTrajectory(_) => "infeasible_trajectory",
            Error::EndpointMismatch(_) => "endpoint_mismatch",
            Error::PhaseOrdering(_) => "phase_ordering",
            Error::UndecidableProfile => "undecidable_profile",
            Error::HorizonExceeded(_) => "horizon_exceeded",
            Error::AbsorbingState => "absorbing_state",
            Error::TruncationOverflow(_) => "truncation_overflow",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }

    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Stiffness { .. }
                | Error::EquilibriumNotFound { .. }
                | Error::InfeasibleTrajectory(_)
                | Error::EndpointMismatch(_)
                | Error::PhaseOrdering(_)
                | Error::HorizonExceeded(_)
                | Error::AbsorbingState
                | Error::TruncationOverflow(_)
                | Error::Instability(_)
        )
    }
}
