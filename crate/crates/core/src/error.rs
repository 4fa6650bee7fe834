//! Error type shared by the library.

/// Errors produced by the control, optimization, and simulation layers.
#[derive(Debug, Clone, thiserror::Error)]
pub enum CoreError {
    /// Invalid parameter or configuration value.
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    /// The path-relative dynamics denominator 1 - d*kappa fell below tolerance;
    /// the vehicle is at or past the curve's center of curvature.
    #[error("path singularity: 1 - d*kappa = {denom:.3e} is below tolerance")]
    Singularity { denom: f64 },

    /// Steering angle outside (-pi/2, pi/2); the slip-angle formula is undefined.
    #[error("steering angle {delta} rad outside (-pi/2, pi/2)")]
    SteeringDomain { delta: f64 },

    /// The QP's feasible set (box intersected with halfspaces) is empty.
    #[error("infeasible QP: {0}")]
    QpInfeasible(String),

    /// The KKT system for implicit differentiation could not be solved.
    #[error("QP gradient failure: {0}")]
    QpGradient(String),

    /// Mismatched dimensions between problem data or network inputs.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Every uncertainty sample hit the path singularity.
    #[error("uncertainty propagation failed: all {0} state samples singular")]
    AllSamplesSingular(usize),

    /// Too many samples were skipped within one training epoch.
    #[error("training epoch {epoch} aborted: {skipped}/{total} samples skipped")]
    TrainAborted {
        epoch: usize,
        skipped: usize,
        total: usize,
    },

    /// Malformed serialized data (CSV, checkpoint).
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = CoreError> = core::result::Result<T, E>;

impl CoreError {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        CoreError::Invalid {
            what,
            why: why.into(),
        }
    }
}
