//! The plant interface: dynamics, costs, state constraints, and their
//! first derivatives at a stage point.
//!
//! Derivatives with respect to the group state are taken through
//! left-trivialized perturbations `q ↦ q exp(ε δ̂)`, so a "gradient with
//! respect to q" is a covector on the Lie algebra (a 3-vector here).

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::Error;
use crate::lie::{exp_so3, AlgebraVector, RotationMatrix};

/// First derivatives of the stage maps at `(t, q, x, u)`.
///
/// `dv_*` differentiate the group-increment log `v_t = log f_t(q, x)`,
/// `dg_*` the vector dynamics `g_t`, `dc_*` the stage cost, and `dgc_*`
/// the stage state-constraint vector (empty when the plant has none).
#[derive(Debug, Clone)]
pub struct StageDerivatives {
    pub dv_dq: Matrix3<f64>,
    pub dv_dx: DMatrix<f64>,
    pub dg_dq: DMatrix<f64>,
    pub dg_dx: DMatrix<f64>,
    pub dg_du: DMatrix<f64>,
    pub dc_dq: Vector3<f64>,
    pub dc_dx: DVector<f64>,
    pub dc_du: DVector<f64>,
    pub dgc_dq: DMatrix<f64>,
    pub dgc_dx: DMatrix<f64>,
}

/// First derivatives of the terminal cost and terminal state constraints.
#[derive(Debug, Clone)]
pub struct TerminalDerivatives {
    pub dc_dq: Vector3<f64>,
    pub dc_dx: DVector<f64>,
    pub dgc_dq: DMatrix<f64>,
    pub dgc_dx: DMatrix<f64>,
}

/// A discrete-time controlled system on SO(3) × R^n with stage costs and
/// pointwise state constraints.
///
/// All evaluators are pure functions of their arguments; implementations
/// hold only immutable model data and are safe to share across threads.
pub trait Plant {
    /// Dimension n of the vector part of the state.
    fn state_dim(&self) -> usize;

    /// Dimension m of the control.
    fn control_dim(&self) -> usize;

    /// Number of state-constraint components per stage (0 if none).
    fn constraint_dim(&self) -> usize {
        0
    }

    /// Log coordinates of the group increment, `v_t = log f_t(q, x)`.
    /// Failure signals the increment left the injectivity radius, i.e.
    /// the discretization step is too large.
    fn group_log(
        &self,
        t: usize,
        q: &RotationMatrix,
        x: &DVector<f64>,
    ) -> Result<AlgebraVector, Error>;

    /// Vector-state update `x_{t+1} = g_t(q, x, u)`.
    fn vector_next(
        &self,
        t: usize,
        q: &RotationMatrix,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, Error>;

    fn stage_cost(&self, t: usize, q: &RotationMatrix, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn terminal_cost(&self, _q: &RotationMatrix, _x: &DVector<f64>) -> f64 {
        0.0
    }

    /// Stage state constraints `g^c_t(q, x) ≤ 0`, evaluated for t = 1..N.
    fn state_constraints(&self, _t: usize, _q: &RotationMatrix, x: &DVector<f64>) -> DVector<f64> {
        let _ = x;
        DVector::zeros(0)
    }

    fn stage_derivatives(
        &self,
        t: usize,
        q: &RotationMatrix,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<StageDerivatives, Error>;

    fn terminal_derivatives(&self, q: &RotationMatrix, x: &DVector<f64>) -> TerminalDerivatives;
}

impl TerminalDerivatives {
    /// All-zero pack for plants with neither terminal cost nor terminal
    /// constraints.
    pub fn zeros(state_dim: usize, constraint_dim: usize) -> Self {
        TerminalDerivatives {
            dc_dq: Vector3::zeros(),
            dc_dx: DVector::zeros(state_dim),
            dgc_dq: DMatrix::zeros(constraint_dim, 3),
            dgc_dx: DMatrix::zeros(constraint_dim, state_dim),
        }
    }
}

/// Central finite-difference derivative pack, the reference oracle for
/// analytic/implicit stage derivatives. Group directions are probed
/// through `q exp(ε ê_i)`.
pub fn fd_stage_derivatives<P: Plant + ?Sized>(
    plant: &P,
    t: usize,
    q: &RotationMatrix,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: f64,
) -> Result<StageDerivatives, Error> {
    let n = plant.state_dim();
    let m = plant.control_dim();
    let lg = plant.constraint_dim();

    let mut dv_dq = Matrix3::zeros();
    let mut dv_dx = DMatrix::zeros(3, n);
    let mut dg_dq = DMatrix::zeros(n, 3);
    let mut dg_dx = DMatrix::zeros(n, n);
    let mut dg_du = DMatrix::zeros(n, m);
    let mut dc_dq = Vector3::zeros();
    let mut dc_dx = DVector::zeros(n);
    let mut dc_du = DVector::zeros(m);
    let mut dgc_dq = DMatrix::zeros(lg, 3);
    let mut dgc_dx = DMatrix::zeros(lg, n);

    for i in 0..3 {
        let mut delta = Vector3::zeros();
        delta[i] = step;
        let qp = q * &exp_so3(&AlgebraVector(delta));
        let qm = q * &exp_so3(&AlgebraVector(-delta));
        let vp = plant.group_log(t, &qp, x)?.0;
        let vm = plant.group_log(t, &qm, x)?.0;
        dv_dq.set_column(i, &((vp - vm) / (2.0 * step)));
        let gp = plant.vector_next(t, &qp, x, u)?;
        let gm = plant.vector_next(t, &qm, x, u)?;
        dg_dq.set_column(i, &((gp - gm) / (2.0 * step)));
        dc_dq[i] = (plant.stage_cost(t, &qp, x, u) - plant.stage_cost(t, &qm, x, u)) / (2.0 * step);
        if lg > 0 {
            let cp = plant.state_constraints(t, &qp, x);
            let cm = plant.state_constraints(t, &qm, x);
            dgc_dq.set_column(i, &((cp - cm) / (2.0 * step)));
        }
    }
    for i in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let vp = plant.group_log(t, q, &xp)?.0;
        let vm = plant.group_log(t, q, &xm)?.0;
        dv_dx.set_column(i, &((vp - vm) / (2.0 * step)));
        let gp = plant.vector_next(t, q, &xp, u)?;
        let gm = plant.vector_next(t, q, &xm, u)?;
        dg_dx.set_column(i, &((gp - gm) / (2.0 * step)));
        dc_dx[i] = (plant.stage_cost(t, q, &xp, u) - plant.stage_cost(t, q, &xm, u)) / (2.0 * step);
        if lg > 0 {
            let cp = plant.state_constraints(t, q, &xp);
            let cm = plant.state_constraints(t, q, &xm);
            dgc_dx.set_column(i, &((cp - cm) / (2.0 * step)));
        }
    }
    for i in 0..m {
        let mut up = u.clone();
        let mut um = u.clone();
        up[i] += step;
        um[i] -= step;
        let gp = plant.vector_next(t, q, x, &up)?;
        let gm = plant.vector_next(t, q, x, &um)?;
        dg_du.set_column(i, &((gp - gm) / (2.0 * step)));
        dc_du[i] = (plant.stage_cost(t, q, x, &up) - plant.stage_cost(t, q, x, &um)) / (2.0 * step);
    }

    Ok(StageDerivatives {
        dv_dq,
        dv_dx,
        dg_dq,
        dg_dx,
        dg_du,
        dc_dq,
        dc_dx,
        dc_du,
        dgc_dq,
        dgc_dx,
    })
}
