//! A scalar chain-of-integrators plant with a frozen group part.
//!
//! `x_{t+1} = x_t + u_t` with cost `½(u_t − r_t)² + ½ω x_t²` and terminal
//! cost `½ω_N x_N²`. The group increment is identically zero, which reduces
//! the adjoint recursion to the classical discrete one — used as the
//! desk-scale oracle problem for the solver and the certificate checker.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::Error;
use crate::lie::{AlgebraVector, RotationMatrix};

use super::plant::{Plant, StageDerivatives, TerminalDerivatives};

#[derive(Debug, Clone, Default)]
pub struct ScalarIntegrator {
    state_weight: f64,
    terminal_weight: f64,
    control_reference: Option<DVector<f64>>,
}

impl ScalarIntegrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_state_weight(mut self, w: f64) -> Self {
        self.state_weight = w;
        self
    }

    pub fn with_terminal_weight(mut self, w: f64) -> Self {
        self.terminal_weight = w;
        self
    }

    /// Tracks a per-stage control reference in the cost: `½(u_t − r_t)²`.
    pub fn with_control_reference(mut self, r: DVector<f64>) -> Self {
        self.control_reference = Some(r);
        self
    }

    fn reference(&self, t: usize) -> f64 {
        self.control_reference.as_ref().map_or(0.0, |r| r[t])
    }
}

impl Plant for ScalarIntegrator {
    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn group_log(
        &self,
        _t: usize,
        _q: &RotationMatrix,
        _x: &DVector<f64>,
    ) -> Result<AlgebraVector, Error> {
        Ok(AlgebraVector::zero())
    }

    fn vector_next(
        &self,
        _t: usize,
        _q: &RotationMatrix,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, Error> {
        Ok(DVector::from_element(1, x[0] + u[0]))
    }

    fn stage_cost(&self, t: usize, _q: &RotationMatrix, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let du = u[0] - self.reference(t);
        0.5 * du * du + 0.5 * self.state_weight * x[0] * x[0]
    }

    fn terminal_cost(&self, _q: &RotationMatrix, x: &DVector<f64>) -> f64 {
        0.5 * self.terminal_weight * x[0] * x[0]
    }

    fn stage_derivatives(
        &self,
        t: usize,
        _q: &RotationMatrix,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<StageDerivatives, Error> {
        Ok(StageDerivatives {
            dv_dq: Matrix3::zeros(),
            dv_dx: DMatrix::zeros(3, 1),
            dg_dq: DMatrix::zeros(1, 3),
            dg_dx: DMatrix::from_element(1, 1, 1.0),
            dg_du: DMatrix::from_element(1, 1, 1.0),
            dc_dq: Vector3::zeros(),
            dc_dx: DVector::from_element(1, self.state_weight * x[0]),
            dc_du: DVector::from_element(1, u[0] - self.reference(t)),
            dgc_dq: DMatrix::zeros(0, 3),
            dgc_dx: DMatrix::zeros(0, 1),
        })
    }

    fn terminal_derivatives(&self, _q: &RotationMatrix, x: &DVector<f64>) -> TerminalDerivatives {
        TerminalDerivatives {
            dc_dq: Vector3::zeros(),
            dc_dx: DVector::from_element(1, self.terminal_weight * x[0]),
            dgc_dq: DMatrix::zeros(0, 3),
            dgc_dx: DMatrix::zeros(0, 1),
        }
    }
}
