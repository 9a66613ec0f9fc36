//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the numerical kernels and the solver.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// The rotation angle is too close to π for the logarithm (or an
    /// exponential-differential inverse) to be well conditioned. For
    /// trajectories this signals that the discretization step is too
    /// large for the momentum magnitudes involved.
    #[error("rotation angle too close to pi (trace = {trace:.6e}); log/dexp-inverse ill-defined")]
    AngleNearPi { trace: f64 },

    /// A matrix failed the rotation-matrix invariants.
    #[error("matrix is not a rotation: |R'R - I| = {orthogonality_defect:.3e}, det = {det:.12}")]
    NotARotation {
        orthogonality_defect: f64,
        det: f64,
    },

    /// The implicit relative-rotation solve did not reach tolerance.
    #[error(
        "relative-rotation solve did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    NoConvergence { residual: f64, iterations: usize },

    /// The implicit-function Jacobian of the relative-rotation solve is
    /// numerically singular; derivatives through the step are unavailable.
    #[error("implicit-step Jacobian is singular")]
    SingularImplicitJacobian,

    /// A plant evaluation failed at a specific stage of a rollout.
    #[error("plant failure at stage {stage}: {source}")]
    PlantFailure {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    /// Alternating projections hit the sweep cap before reaching tolerance.
    #[error(
        "projection onto box ∩ frequency-nullspace stalled: change {achieved:.3e} after {sweeps} sweeps"
    )]
    ProjectionStall { achieved: f64, sweeps: usize },

    /// The constraint set admits no solution the solver can reach.
    #[error("problem infeasible: {reason}")]
    Infeasible { reason: String },

    /// A control point handed to the stationarity check violates its own
    /// box bounds.
    #[error("control at stage {stage} lies outside its box bounds (component {component})")]
    UNotInBox { stage: usize, component: usize },

    /// The stacked frequency-constraint matrix lost full row rank.
    #[error("frequency-constraint matrix is rank deficient")]
    RankDeficientF,

    /// Input dimensions disagree.
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
}

impl Error {
    pub(crate) fn at_stage(self, stage: usize) -> Error {
        Error::PlantFailure {
            stage,
            source: Box::new(self),
        }
    }
}
