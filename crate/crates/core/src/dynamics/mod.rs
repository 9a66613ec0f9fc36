//! Controlled plant abstraction and trajectory containers.
//!
//! The system evolves partly on the rotation group and partly on a vector
//! space: `q_{t+1} = q_t · exp(v_t(q_t, x_t))`, `x_{t+1} = g_t(q_t, x_t, u_t)`.
//! Plants expose the group increment through its logarithm coordinates, so
//! staying inside the injectivity radius of the exponential is checked by
//! construction.

mod attitude;
mod plant;
mod toy;

pub use attitude::{
    attitude_step, solve_relative_rotation, AttitudePlant, AttitudeState, InertiaData,
};
pub use plant::{fd_stage_derivatives, Plant, StageDerivatives, TerminalDerivatives};
pub use toy::ScalarIntegrator;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::lie::{exp_so3, AlgebraVector, RotationMatrix};

/// A control sequence `(u_0, …, u_{N-1}) ⊂ R^m`, stored stage-per-column.
///
/// The column-major layout flattens stage-major: flat index `t·m + k`
/// addresses channel `k` at stage `t`, matching the stacked layout of the
/// frequency-constraint matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    data: DMatrix<f64>,
}

impl ControlTrajectory {
    pub fn zeros(channels: usize, stages: usize) -> Self {
        ControlTrajectory {
            data: DMatrix::zeros(channels, stages),
        }
    }

    /// Builds from a channels × stages matrix.
    pub fn from_matrix(data: DMatrix<f64>) -> Self {
        ControlTrajectory { data }
    }

    pub fn from_stages(stages: &[DVector<f64>]) -> Self {
        let m = stages.first().map_or(0, |s| s.len());
        let mut data = DMatrix::zeros(m, stages.len());
        for (t, s) in stages.iter().enumerate() {
            data.set_column(t, s);
        }
        ControlTrajectory { data }
    }

    pub fn stages(&self) -> usize {
        self.data.ncols()
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn stage(&self, t: usize) -> DVector<f64> {
        self.data.column(t).into_owned()
    }

    pub fn set_stage(&mut self, t: usize, u: &DVector<f64>) {
        self.data.set_column(t, u);
    }

    /// Trajectory of one control channel across all stages.
    pub fn channel(&self, k: usize) -> DVector<f64> {
        self.data.row(k).transpose()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Stage-major flattened copy (stage `t`, channel `k` ↦ index `t·m+k`).
    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_column_slice(self.data.as_slice())
    }

    pub fn from_flat(channels: usize, stages: usize, flat: &DVector<f64>) -> Self {
        ControlTrajectory {
            data: DMatrix::from_column_slice(channels, stages, flat.as_slice()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.amax()
    }
}

/// Per-channel box bounds on the control, uniform across stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, Error> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "control bound dimensions disagree".to_string(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::DimensionMismatch {
                context: "control box is empty (lower > upper)".to_string(),
            });
        }
        Ok(ControlBounds { lower, upper })
    }

    /// Symmetric box `|u_i| ≤ bound_i`.
    pub fn symmetric(bound: DVector<f64>) -> Result<Self, Error> {
        let lower = -bound.clone();
        Self::new(lower, bound)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Componentwise clip of one stage's control onto the box.
    pub fn clip(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn clip_trajectory(&self, u: &ControlTrajectory) -> ControlTrajectory {
        let mut out = u.clone();
        for t in 0..u.stages() {
            out.set_stage(t, &self.clip(&u.stage(t)));
        }
        out
    }

    /// Whether the stage control lies inside the box up to `tol`.
    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter()
            .enumerate()
            .all(|(i, &ui)| ui >= self.lower[i] - tol && ui <= self.upper[i] + tol)
    }
}

/// States along a rollout: `(q_t, x_t)` for `t = 0..N`, plus the cached
/// group-increment logs `v_t = log(f_t(q_t, x_t))` for `t = 0..N-1`,
/// recorded for reuse by the backward adjoint pass.
#[derive(Debug, Clone)]
pub struct SystemTrajectory {
    pub rotations: Vec<RotationMatrix>,
    pub vectors: Vec<DVector<f64>>,
    pub stage_logs: Vec<AlgebraVector>,
}

impl SystemTrajectory {
    pub fn horizon(&self) -> usize {
        self.stage_logs.len()
    }

    pub fn terminal_rotation(&self) -> &RotationMatrix {
        self.rotations.last().expect("trajectory is never empty")
    }

    pub fn terminal_vector(&self) -> &DVector<f64> {
        self.vectors.last().expect("trajectory is never empty")
    }
}

/// Rolls the plant forward from `(q0, x0)` under the control sequence.
///
/// Errors from the plant are tagged with the failing stage index.
pub fn rollout<P: Plant + ?Sized>(
    q0: &RotationMatrix,
    x0: &DVector<f64>,
    u: &ControlTrajectory,
    plant: &P,
) -> Result<SystemTrajectory, Error> {
    let n = u.stages();
    let mut rotations = Vec::with_capacity(n + 1);
    let mut vectors = Vec::with_capacity(n + 1);
    let mut stage_logs = Vec::with_capacity(n);
    rotations.push(*q0);
    vectors.push(x0.clone());
    for t in 0..n {
        let q = rotations[t];
        let x = &vectors[t];
        let ut = u.stage(t);
        let v = plant.group_log(t, &q, x).map_err(|e| e.at_stage(t))?;
        let x_next = plant
            .vector_next(t, &q, x, &ut)
            .map_err(|e| e.at_stage(t))?;
        rotations.push(&q * &exp_so3(&v));
        vectors.push(x_next);
        stage_logs.push(v);
    }
    Ok(SystemTrajectory {
        rotations,
        vectors,
        stage_logs,
    })
}

/// Total cost of a trajectory/control pair under the plant's stage and
/// terminal costs.
pub fn trajectory_cost<P: Plant + ?Sized>(
    traj: &SystemTrajectory,
    u: &ControlTrajectory,
    plant: &P,
) -> f64 {
    let n = u.stages();
    let mut total = 0.0;
    for t in 0..n {
        total += plant.stage_cost(t, &traj.rotations[t], &traj.vectors[t], &u.stage(t));
    }
    total + plant.terminal_cost(traj.terminal_rotation(), traj.terminal_vector())
}
