//! Trajectory synthesis for the constrained problem.
//!
//! Structure: an augmented-Lagrangian outer loop carries multipliers for
//! the stage state constraints (`g ≤ 0`) and the terminal equality
//! (`log(q_fᵀ q_N) = 0`, `x_N − x_f = 0`); each subproblem is minimized by
//! projected gradient descent with Barzilai–Borwein steps and Armijo
//! backtracking. Iterates are kept exactly feasible for the control box
//! and the frequency nullspace by Dykstra's alternating projections, so
//! the returned control needs no post-hoc filtering. Gradients come from
//! one backward adjoint sweep per evaluation.
//!
//! Sign bridge: the augmented-Lagrangian inequality weights are the usual
//! non-negative `max(0, y + σ g)`; the necessary-conditions bundle stores
//! their negation (μ ≤ 0 with g ≤ 0), and the terminal equality multiplier
//! is adjoined to the terminal cost for certification.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;

use crate::dynamics::{
    rollout, trajectory_cost, ControlBounds, ControlTrajectory, Plant, StageDerivatives,
    SystemTrajectory, TerminalDerivatives,
};
use crate::error::Error;
use crate::lie::{dexp_inv_matrix, log_so3, AlgebraVector, RotationMatrix};
use crate::pmp::{
    adjoint_backward, kkt_check, weighted_backward_sweep, AdjointBundle, KktReport, KktTolerances,
};
use crate::spectrum::{project_onto_nullspace, FrequencyConstraintSet};

/// Terminal equality target; either part may be absent.
#[derive(Debug, Clone)]
pub struct TerminalTarget {
    pub rotation: Option<RotationMatrix>,
    pub vector: Option<DVector<f64>>,
}

/// Multipliers of the terminal equality constraints, mirroring the target
/// structure. The rotation part pairs with the log-chart error
/// `e = log(q_fᵀ q_N)`.
#[derive(Debug, Clone)]
pub struct TerminalMultiplier {
    pub rotation: Option<Vector3<f64>>,
    pub vector: Option<DVector<f64>>,
}

/// A complete problem instance.
///
/// Stage and terminal costs are supplied by the plant (the default
/// benchmark plant uses `½‖u‖²`); the box, frequency set, horizon, and
/// boundary data live here.
#[derive(Debug, Clone)]
pub struct ProblemSpec<P: Plant> {
    pub plant: P,
    pub horizon: usize,
    pub initial_rotation: RotationMatrix,
    pub initial_vector: DVector<f64>,
    pub target: Option<TerminalTarget>,
    pub control_bounds: ControlBounds,
    pub freq: FrequencyConstraintSet,
}

impl<P: Plant> ProblemSpec<P> {
    pub fn new(
        plant: P,
        horizon: usize,
        initial_rotation: RotationMatrix,
        initial_vector: DVector<f64>,
        target: Option<TerminalTarget>,
        control_bounds: ControlBounds,
        freq: FrequencyConstraintSet,
    ) -> Result<Self, Error> {
        if horizon < 1 {
            return Err(Error::DimensionMismatch {
                context: "horizon must be at least 1".to_string(),
            });
        }
        if control_bounds.dim() != plant.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "control bounds dimension disagrees with plant".to_string(),
            });
        }
        if freq.n_stages() != horizon || freq.n_channels() != plant.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "frequency-constraint dimensions disagree with problem".to_string(),
            });
        }
        if initial_vector.len() != plant.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "initial state dimension disagrees with plant".to_string(),
            });
        }
        if let Some(t) = &target {
            if let Some(xf) = &t.vector {
                if xf.len() != plant.state_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "terminal target dimension disagrees with plant".to_string(),
                    });
                }
            }
        }
        Ok(ProblemSpec {
            plant,
            horizon,
            initial_rotation,
            initial_vector,
            target,
            control_bounds,
            freq,
        })
    }
}

/// Solver options. `seed` is recorded for reproducibility bookkeeping
/// (reserved for optional multi-start sweeps); the core path is
/// deterministic.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Stationarity tolerance relative to (1 + |cost|).
    pub stationarity_rel: f64,
    /// Absolute cap on the stationarity tolerance; the effective tolerance
    /// is `min(stationarity_rel · (1 + |cost|), stationarity_abs)`.
    pub stationarity_abs: f64,
    pub violation_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_cap: f64,
    pub armijo_c1: f64,
    pub armijo_shrink: f64,
    pub bb_min: f64,
    pub bb_max: f64,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_outer: 40,
            max_inner: 2000,
            stationarity_rel: 1e-6,
            stationarity_abs: f64::INFINITY,
            violation_tol: 1e-6,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_cap: 1e12,
            armijo_c1: 1e-4,
            armijo_shrink: 0.5,
            bb_min: 1e-6,
            bb_max: 1e2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

/// Constraint violations at the returned point, recomputed from the
/// trajectory and control alone (independent of solver bookkeeping).
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintViolations {
    /// ‖log(q_fᵀ q_N)‖ in radians (0 when no rotation target).
    pub terminal_rotation_rad: f64,
    /// ‖x_N − x_f‖ (0 when no vector target).
    pub terminal_vector: f64,
    /// max over stages and components of max(0, g).
    pub state_constraint: f64,
    /// Largest forbidden-bin spectrum magnitude of the control.
    pub forbidden_bin: f64,
    /// Largest excursion of the control outside its box.
    pub control_box: f64,
}

impl ConstraintViolations {
    /// The violation measure driven to tolerance by the outer loop (box
    /// and frequency feasibility are maintained exactly by projection).
    pub fn dynamics_measure(&self) -> f64 {
        self.terminal_rotation_rad
            .max(self.terminal_vector)
            .max(self.state_constraint)
    }
}

/// Per-iteration history, kept for diagnosis and for the monotonicity /
/// feasibility contracts of the inner loop.
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    /// Augmented objective after each accepted inner step.
    pub merit: Vec<f64>,
    /// Inner stationarity residual at each accepted step.
    pub residual: Vec<f64>,
    /// Box/frequency infeasibility of each accepted iterate.
    pub max_infeasibility: Vec<f64>,
    /// Index into the above where each outer iteration starts.
    pub outer_starts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub controls: ControlTrajectory,
    pub trajectory: SystemTrajectory,
    pub bundle: AdjointBundle,
    pub terminal_multiplier: Option<TerminalMultiplier>,
    pub report: KktReport,
    pub cost: f64,
    pub violations: ConstraintViolations,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub trace: SolveTrace,
}

const DYKSTRA_TOL: f64 = 1e-10;
const DYKSTRA_MAX_SWEEPS: usize = 500;

/// Euclidean projection onto box ∩ frequency-nullspace by Dykstra's
/// alternating projections.
///
/// With no frequency constraints this is a plain componentwise clip. The
/// sweep stops when successive iterates differ by less than 1e-10 in the
/// max norm; the result then satisfies both constraint families to 1e-9.
pub fn project_feasible(
    u: &ControlTrajectory,
    bounds: &ControlBounds,
    freq: &FrequencyConstraintSet,
) -> Result<ControlTrajectory, Error> {
    if freq.is_empty() {
        return Ok(bounds.clip_trajectory(u));
    }
    let mut x = u.as_matrix().clone();
    let mut p = DMatrix::zeros(x.nrows(), x.ncols());
    let mut q = DMatrix::zeros(x.nrows(), x.ncols());
    let mut achieved = f64::INFINITY;
    for _sweep in 0..DYKSTRA_MAX_SWEEPS {
        let y = bounds
            .clip_trajectory(&ControlTrajectory::from_matrix(&x + &p))
            .as_matrix()
            .clone();
        p = &x + &p - &y;
        let x_new = project_onto_nullspace(&ControlTrajectory::from_matrix(&y + &q), freq)
            .as_matrix()
            .clone();
        q = &y + &q - &x_new;
        achieved = (&x_new - &x).amax();
        x = x_new;
        // The iterate can repeat exactly for a sweep while the increments
        // are still rebalancing (clip is piecewise linear), so a small
        // change only counts as convergence once the point is feasible
        // for the box too (it lies on the nullspace by construction).
        if achieved < DYKSTRA_TOL {
            let wrapped = ControlTrajectory::from_matrix(x.clone());
            let box_defect = (bounds.clip_trajectory(&wrapped).as_matrix() - &x).amax();
            if box_defect <= 1e-9 {
                return Ok(wrapped);
            }
        }
    }
    Err(Error::ProjectionStall {
        achieved,
        sweeps: DYKSTRA_MAX_SWEEPS,
    })
}

/// Terminal-cost augmentation `c_N + ν_Rᵀ log(q_fᵀ q_N) + ν_xᵀ (x_N − x_f)`
/// used to certify solutions of problems with terminal equality targets:
/// the equality multipliers are adjoined to the terminal cost, after which
/// the plain necessary conditions apply.
pub struct TerminalAugmentedPlant<'a, P: Plant + ?Sized> {
    inner: &'a P,
    target: Option<&'a TerminalTarget>,
    nu: Option<&'a TerminalMultiplier>,
}

impl<'a, P: Plant + ?Sized> TerminalAugmentedPlant<'a, P> {
    pub fn new(
        inner: &'a P,
        target: Option<&'a TerminalTarget>,
        nu: Option<&'a TerminalMultiplier>,
    ) -> Self {
        TerminalAugmentedPlant { inner, target, nu }
    }

    fn rotation_error(&self, q: &RotationMatrix) -> Option<AlgebraVector> {
        let target = self.target?.rotation.as_ref()?;
        log_so3(&(&target.transpose() * q)).ok()
    }
}

impl<'a, P: Plant + ?Sized> Plant for TerminalAugmentedPlant<'a, P> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }

    fn constraint_dim(&self) -> usize {
        self.inner.constraint_dim()
    }

    fn group_log(
        &self,
        t: usize,
        q: &RotationMatrix,
        x: &DVector<f64>,
    ) -> Result<AlgebraVector, Error> {
        self.inner.group_log(t, q, x)
    }

    fn vector_next(
        &self,
        t: usize,
        q: &RotationMatrix,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, Error> {
        self.inner.vector_next(t, q, x, u)
    }

    fn stage_cost(&self, t: usize, q: &RotationMatrix, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.inner.stage_cost(t, q, x, u)
    }

    fn terminal_cost(&self, q: &RotationMatrix, x: &DVector<f64>) -> f64 {
        let mut c = self.inner.terminal_cost(q, x);
        let (Some(target), Some(nu)) = (self.target, self.nu) else {
            return c;
        };
        if let Some(nu_r) = &nu.rotation {
            match self.rotation_error(q) {
                Some(e) => c += nu_r.dot(&e.0),
                None => return f64::NAN,
            }
        }
        if let (Some(nu_x), Some(xf)) = (&nu.vector, &target.vector) {
            c += nu_x.dot(&(x - xf));
        }
        c
    }

    fn state_constraints(&self, t: usize, q: &RotationMatrix, x: &DVector<f64>) -> DVector<f64> {
        self.inner.state_constraints(t, q, x)
    }

    fn stage_derivatives(
        &self,
        t: usize,
        q: &RotationMatrix,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<StageDerivatives, Error> {
        self.inner.stage_derivatives(t, q, x, u)
    }

    fn terminal_derivatives(&self, q: &RotationMatrix, x: &DVector<f64>) -> TerminalDerivatives {
        let mut td = self.inner.terminal_derivatives(q, x);
        let (Some(_), Some(nu)) = (self.target, self.nu) else {
            return td;
        };
        if let Some(nu_r) = &nu.rotation {
            match self.rotation_error(q) {
                // Left-trivialized pullback of the log-chart error:
                // δe = dexp_inv(e)ᵀ χ.
                Some(e) => td.dc_dq += dexp_inv_matrix(&e).unwrap() * nu_r,
                None => td.dc_dq += Vector3::from_element(f64::NAN),
            }
        }
        if let Some(nu_x) = &nu.vector {
            td.dc_dx += nu_x;
        }
        td
    }
}

/// Certifies a point: builds the adjoint bundle from the supplied
/// multipliers (with the terminal equality adjoined to the terminal cost)
/// and evaluates every necessary-condition residual.
pub fn certify<P: Plant>(
    problem: &ProblemSpec<P>,
    traj: &SystemTrajectory,
    u: &ControlTrajectory,
    mu: &[DVector<f64>],
    terminal_multiplier: Option<&TerminalMultiplier>,
    eta_f: &DVector<f64>,
    tol: &KktTolerances,
) -> Result<(AdjointBundle, KktReport), Error> {
    let augmented =
        TerminalAugmentedPlant::new(&problem.plant, problem.target.as_ref(), terminal_multiplier);
    let bundle = adjoint_backward(traj, u, mu, -1.0, eta_f, &augmented, &problem.freq)?;
    let report = kkt_check(
        traj,
        u,
        &bundle,
        &augmented,
        &problem.freq,
        &problem.control_bounds,
        tol,
    )?;
    Ok((bundle, report))
}

/// Constraint violations at a point, recomputed from scratch.
pub fn violations<P: Plant>(
    problem: &ProblemSpec<P>,
    traj: &SystemTrajectory,
    u: &ControlTrajectory,
) -> ConstraintViolations {
    let n = problem.horizon;
    let mut state_constraint = 0.0_f64;
    if problem.plant.constraint_dim() > 0 {
        for t in 1..=n {
            let g = problem
                .plant
                .state_constraints(t, &traj.rotations[t], &traj.vectors[t]);
            state_constraint = state_constraint.max(g.iter().fold(0.0_f64, |a, &x| a.max(x)));
        }
    }

    let mut terminal_rotation_rad = 0.0;
    let mut terminal_vector = 0.0;
    if let Some(target) = &problem.target {
        if let Some(qf) = &target.rotation {
            terminal_rotation_rad = log_so3(&(&qf.transpose() * traj.terminal_rotation()))
                .map(|e| e.0.norm())
                .unwrap_or(std::f64::consts::PI);
        }
        if let Some(xf) = &target.vector {
            terminal_vector = (traj.terminal_vector() - xf).norm();
        }
    }

    let mut control_box = 0.0_f64;
    for t in 0..n {
        let ut = u.stage(t);
        for i in 0..ut.len() {
            control_box = control_box
                .max(ut[i] - problem.control_bounds.upper[i])
                .max(problem.control_bounds.lower[i] - ut[i]);
        }
    }

    ConstraintViolations {
        terminal_rotation_rad,
        terminal_vector,
        state_constraint,
        forbidden_bin: problem.freq.max_forbidden_magnitude(u),
        control_box: control_box.max(0.0),
    }
}

/// Augmented-Lagrangian state. Each constraint block (stage inequalities,
/// terminal rotation, terminal vector) carries its own penalty because the
/// blocks respond to the control at very different scales.
struct AlState {
    /// Inequality multipliers y_t ≥ 0 (index t−1 for stage t = 1..N).
    y: Vec<DVector<f64>>,
    nu_rotation: Option<Vector3<f64>>,
    nu_vector: Option<DVector<f64>>,
    sigma_ineq: f64,
    sigma_rot: f64,
    sigma_vec: f64,
}

/// One merit evaluation along the current iterate.
struct Evaluation {
    traj: SystemTrajectory,
    base_cost: f64,
    merit: f64,
    /// g_t for t = 1..N (index t−1); empty vectors when unconstrained.
    constraints: Vec<DVector<f64>>,
    rotation_error: Option<Vector3<f64>>,
    vector_error: Option<DVector<f64>>,
}

impl Evaluation {
    fn violation(&self) -> f64 {
        let mut v = 0.0_f64;
        for g in &self.constraints {
            v = g.iter().fold(v, |a, &x| a.max(x));
        }
        if let Some(e) = &self.rotation_error {
            v = v.max(e.amax());
        }
        if let Some(e) = &self.vector_error {
            v = v.max(e.amax());
        }
        v
    }
}

fn evaluate<P: Plant>(
    problem: &ProblemSpec<P>,
    u: &ControlTrajectory,
    al: &AlState,
) -> Result<Evaluation, Error> {
    let traj = rollout(
        &problem.initial_rotation,
        &problem.initial_vector,
        u,
        &problem.plant,
    )?;
    let base_cost = trajectory_cost(&traj, u, &problem.plant);
    let mut merit = base_cost;

    let n = problem.horizon;
    let lg = problem.plant.constraint_dim();
    let mut constraints = Vec::with_capacity(n);
    for t in 1..=n {
        let g = if lg > 0 {
            problem
                .plant
                .state_constraints(t, &traj.rotations[t], &traj.vectors[t])
        } else {
            DVector::zeros(0)
        };
        let y = &al.y[t - 1];
        for j in 0..lg {
            let shifted = (y[j] + al.sigma_ineq * g[j]).max(0.0);
            merit += (shifted * shifted - y[j] * y[j]) / (2.0 * al.sigma_ineq);
        }
        constraints.push(g);
    }

    let mut rotation_error = None;
    let mut vector_error = None;
    if let Some(target) = &problem.target {
        if let Some(qf) = &target.rotation {
            let e = log_so3(&(&qf.transpose() * traj.terminal_rotation()))?.0;
            let nu = al.nu_rotation.as_ref().expect("multiplier exists");
            merit += nu.dot(&e) + 0.5 * al.sigma_rot * e.norm_squared();
            rotation_error = Some(e);
        }
        if let Some(xf) = &target.vector {
            let e = traj.terminal_vector() - xf;
            let nu = al.nu_vector.as_ref().expect("multiplier exists");
            merit += nu.dot(&e) + 0.5 * al.sigma_vec * e.norm_squared();
            vector_error = Some(e);
        }
    }

    Ok(Evaluation {
        traj,
        base_cost,
        merit,
        constraints,
        rotation_error,
        vector_error,
    })
}

/// First-order multiplier estimates at the evaluated point: the weights
/// the augmented objective's gradient actually carries.
fn al_weights(eval: &Evaluation, al: &AlState) -> Vec<DVector<f64>> {
    eval.constraints
        .iter()
        .zip(&al.y)
        .map(|(g, y)| DVector::from_fn(y.len(), |j, _| (y[j] + al.sigma_ineq * g[j]).max(0.0)))
        .collect()
}

/// Gradient of the augmented objective via one backward adjoint sweep.
fn al_gradient<P: Plant>(
    problem: &ProblemSpec<P>,
    u: &ControlTrajectory,
    eval: &Evaluation,
    al: &AlState,
) -> Result<ControlTrajectory, Error> {
    let weights = al_weights(eval, al);
    let extra_q = match (&eval.rotation_error, &al.nu_rotation) {
        (Some(e), Some(nu)) => {
            let ev = AlgebraVector(*e);
            Some(dexp_inv_matrix(&ev)? * (nu + al.sigma_rot * e))
        }
        _ => None,
    };
    let extra_x = match (&eval.vector_error, &al.nu_vector) {
        (Some(e), Some(nu)) => Some(nu + al.sigma_vec * e),
        _ => None,
    };
    let sweep = weighted_backward_sweep(
        &eval.traj,
        u,
        &problem.plant,
        1.0,
        Some(&weights),
        extra_q.as_ref(),
        extra_x.as_ref(),
    )?;
    Ok(ControlTrajectory::from_stages(&sweep.grad_u))
}

fn infeasibility<P: Plant>(problem: &ProblemSpec<P>, u: &ControlTrajectory) -> f64 {
    let mut v = 0.0_f64;
    for t in 0..u.stages() {
        let ut = u.stage(t);
        for i in 0..ut.len() {
            v = v
                .max(ut[i] - problem.control_bounds.upper[i])
                .max(problem.control_bounds.lower[i] - ut[i]);
        }
    }
    v.max(problem.freq.apply(u).amax())
}

struct InnerOutcome {
    u: ControlTrajectory,
    eval: Evaluation,
    gradient: ControlTrajectory,
    residual: f64,
    iterations: usize,
}

/// Projected-gradient minimization of the augmented objective.
#[allow(clippy::too_many_arguments)]
fn inner_solve<P: Plant>(
    problem: &ProblemSpec<P>,
    u0: ControlTrajectory,
    al: &AlState,
    tol: f64,
    opts: &SolveOptions,
    trace: &mut SolveTrace,
) -> Result<InnerOutcome, Error> {
    let mut u = u0;
    let mut eval = evaluate(problem, &u, al)?;
    let mut gradient = al_gradient(problem, &u, &eval, al)?;
    let mut step = 1.0 / gradient.max_abs().max(1.0);
    let mut iterations = 0;

    loop {
        let probe = project_feasible(
            &ControlTrajectory::from_matrix(u.as_matrix() - gradient.as_matrix()),
            &problem.control_bounds,
            &problem.freq,
        )?;
        let residual = (probe.as_matrix() - u.as_matrix()).amax();
        if residual <= tol || iterations >= opts.max_inner {
            return Ok(InnerOutcome {
                u,
                eval,
                gradient,
                residual,
                iterations,
            });
        }

        // Armijo backtracking along the projected-gradient arc.
        let mut alpha = step.clamp(opts.bb_min, opts.bb_max);
        let mut accepted = None;
        for _ in 0..60 {
            let trial = project_feasible(
                &ControlTrajectory::from_matrix(u.as_matrix() - alpha * gradient.as_matrix()),
                &problem.control_bounds,
                &problem.freq,
            )?;
            let direction = trial.as_matrix() - u.as_matrix();
            if direction.amax() <= 1e-16 {
                break;
            }
            let directional = gradient.as_matrix().dot(&direction);
            match evaluate(problem, &trial, al) {
                Ok(trial_eval)
                    if trial_eval.merit <= eval.merit + opts.armijo_c1 * directional =>
                {
                    accepted = Some((trial, trial_eval));
                    break;
                }
                _ => alpha *= opts.armijo_shrink,
            }
        }

        let Some((u_new, eval_new)) = accepted else {
            // No acceptable step; the residual criterion decides next loop.
            return Ok(InnerOutcome {
                u,
                eval,
                gradient,
                residual,
                iterations,
            });
        };

        let gradient_new = al_gradient(problem, &u_new, &eval_new, al)?;

        // Barzilai–Borwein step for the next iteration.
        let s = u_new.as_matrix() - u.as_matrix();
        let yv = gradient_new.as_matrix() - gradient.as_matrix();
        let sy = s.dot(&yv);
        step = if sy > 1e-30 {
            (s.dot(&s) / sy).clamp(opts.bb_min, opts.bb_max)
        } else {
            opts.bb_max
        };

        u = u_new;
        eval = eval_new;
        gradient = gradient_new;
        iterations += 1;
        trace.merit.push(eval.merit);
        trace.residual.push(residual);
        trace.max_infeasibility.push(infeasibility(problem, &u));
    }
}

/// Least-squares frequency multiplier from the stationarity decomposition:
/// given the no-frequency part `d_t` of the control gradient, finds η
/// minimizing `Σ_t ‖(d_t + F_tᵀ η)‖²` over the components strictly inside
/// the box, then maps to the necessary-conditions sign convention.
fn frequency_multiplier_ls<P: Plant>(
    problem: &ProblemSpec<P>,
    u: &ControlTrajectory,
    grad_no_freq: &ControlTrajectory,
) -> Result<DVector<f64>, Error> {
    let ell = problem.freq.num_constraints();
    if ell == 0 {
        return Ok(DVector::zeros(0));
    }
    let n = problem.horizon;
    let m = problem.plant.control_dim();
    let act_tol = 1e-7;
    let mut rows = Vec::new();
    for t in 0..n {
        let ut = u.stage(t);
        for i in 0..m {
            let lo = problem.control_bounds.lower[i];
            let hi = problem.control_bounds.upper[i];
            let margin = act_tol * hi.abs().max(lo.abs()).max(1.0);
            if ut[i] > lo + margin && ut[i] < hi - margin {
                rows.push(t * m + i);
            }
        }
    }
    if rows.is_empty() {
        return Ok(DVector::zeros(ell));
    }
    let mut a = DMatrix::zeros(rows.len(), ell);
    let mut b = DVector::zeros(rows.len());
    let flat_grad = grad_no_freq.flatten();
    for (r, &flat_idx) in rows.iter().enumerate() {
        let t = flat_idx / m;
        let f_t = problem.freq.stage_matrix(t);
        for c in 0..ell {
            a[(r, c)] = f_t[(c, flat_idx % m)];
        }
        b[r] = -flat_grad[flat_idx];
    }
    let svd = a.svd(true, true);
    let y = svd
        .solve(&b, 1e-12)
        .map_err(|_| Error::RankDeficientF)?;
    // Minimization-convention multiplier → bundle convention.
    Ok(-y)
}

/// Recovers multipliers at an arbitrary feasible point by linear least
/// squares on the stationarity conditions: unknowns are the terminal
/// equality multiplier, the weights of near-active state constraints, and
/// the frequency multiplier; each unknown's influence on the control
/// gradient is assembled by one unit backward sweep. Weights with the
/// wrong sign are dropped and the system re-solved once.
///
/// Used to certify trajectories produced outside this solver.
pub fn recover_multipliers_from_point<P: Plant>(
    problem: &ProblemSpec<P>,
    traj: &SystemTrajectory,
    u: &ControlTrajectory,
    active_tol: f64,
) -> Result<(Vec<DVector<f64>>, Option<TerminalMultiplier>, DVector<f64>), Error> {
    let n = problem.horizon;
    let m = problem.plant.control_dim();
    let lg = problem.plant.constraint_dim();
    let ell = problem.freq.num_constraints();

    // Inactive (strictly interior) control components carry equality
    // stationarity.
    let mut free_rows = Vec::new();
    for t in 0..n {
        let ut = u.stage(t);
        for i in 0..m {
            let lo = problem.control_bounds.lower[i];
            let hi = problem.control_bounds.upper[i];
            let margin = active_tol * hi.abs().max(lo.abs()).max(1.0);
            if ut[i] > lo + margin && ut[i] < hi - margin {
                free_rows.push(t * m + i);
            }
        }
    }

    let flatten_rows = |g: &ControlTrajectory| -> DVector<f64> {
        let flat = g.flatten();
        DVector::from_fn(free_rows.len(), |r, _| flat[free_rows[r]])
    };

    // Base gradient: plain cost, no multipliers.
    let base = weighted_backward_sweep(traj, u, &problem.plant, 1.0, None, None, None)?;
    let base_grad = flatten_rows(&ControlTrajectory::from_stages(&base.grad_u));

    // Unknown columns.
    enum Unknown {
        NuRotation(usize),
        NuVector(usize),
        Constraint { stage: usize, component: usize },
        Frequency(usize),
    }
    let mut unknowns = Vec::new();
    let (has_qf, has_xf) = match &problem.target {
        Some(t) => (t.rotation.is_some(), t.vector.is_some()),
        None => (false, false),
    };
    if has_qf {
        for i in 0..3 {
            unknowns.push(Unknown::NuRotation(i));
        }
    }
    if has_xf {
        for i in 0..problem.plant.state_dim() {
            unknowns.push(Unknown::NuVector(i));
        }
    }
    let mut active = Vec::new();
    if lg > 0 {
        for t in 1..=n {
            let g = problem
                .plant
                .state_constraints(t, &traj.rotations[t], &traj.vectors[t]);
            for j in 0..lg {
                if g[j] >= -active_tol {
                    active.push((t, j));
                    unknowns.push(Unknown::Constraint {
                        stage: t,
                        component: j,
                    });
                }
            }
        }
    }
    for i in 0..ell {
        unknowns.push(Unknown::Frequency(i));
    }

    let rotation_pullback = if has_qf {
        let qf = problem
            .target
            .as_ref()
            .unwrap()
            .rotation
            .as_ref()
            .unwrap();
        let e = log_so3(&(&qf.transpose() * traj.terminal_rotation()))?;
        Some(dexp_inv_matrix(&e)?)
    } else {
        None
    };

    let mut columns = DMatrix::zeros(free_rows.len(), unknowns.len());
    let zero_weights = vec![DVector::zeros(lg); n];
    for (c, unknown) in unknowns.iter().enumerate() {
        let col = match unknown {
            Unknown::NuRotation(i) => {
                let mut nu = Vector3::zeros();
                nu[*i] = 1.0;
                let extra = rotation_pullback.as_ref().unwrap() * nu;
                let sweep = weighted_backward_sweep(
                    traj,
                    u,
                    &problem.plant,
                    0.0,
                    None,
                    Some(&extra),
                    None,
                )?;
                flatten_rows(&ControlTrajectory::from_stages(&sweep.grad_u))
            }
            Unknown::NuVector(i) => {
                let mut extra = DVector::zeros(problem.plant.state_dim());
                extra[*i] = 1.0;
                let sweep = weighted_backward_sweep(
                    traj,
                    u,
                    &problem.plant,
                    0.0,
                    None,
                    None,
                    Some(&extra),
                )?;
                flatten_rows(&ControlTrajectory::from_stages(&sweep.grad_u))
            }
            Unknown::Constraint { stage, component } => {
                let mut weights = zero_weights.clone();
                weights[stage - 1][*component] = 1.0;
                let sweep = weighted_backward_sweep(
                    traj,
                    u,
                    &problem.plant,
                    0.0,
                    Some(&weights),
                    None,
                    None,
                )?;
                flatten_rows(&ControlTrajectory::from_stages(&sweep.grad_u))
            }
            Unknown::Frequency(i) => {
                let mut basis = DVector::zeros(ell);
                basis[*i] = 1.0;
                let mut g = ControlTrajectory::zeros(m, n);
                for t in 0..n {
                    g.set_stage(t, &problem.freq.stage_transpose_apply(t, &basis));
                }
                flatten_rows(&g)
            }
        };
        columns.set_column(c, &col);
    }

    let rhs = -&base_grad;
    let mut theta = columns
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|_| Error::RankDeficientF)?;

    // Constraint weights must be non-negative in the minimization
    // convention; drop wrong-signed ones and re-solve once.
    let constraint_offset = (if has_qf { 3 } else { 0 })
        + (if has_xf { problem.plant.state_dim() } else { 0 });
    let mut dropped = false;
    for (k, _) in active.iter().enumerate() {
        if theta[constraint_offset + k] < 0.0 {
            columns.column_mut(constraint_offset + k).fill(0.0);
            dropped = true;
        }
    }
    if dropped {
        theta = columns
            .clone()
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|_| Error::RankDeficientF)?;
        for (k, _) in active.iter().enumerate() {
            if columns.column(constraint_offset + k).amax() == 0.0 {
                theta[constraint_offset + k] = 0.0;
            }
        }
    }

    // Unpack in the necessary-conditions convention (negated).
    let mut idx = 0;
    let nu_rotation = if has_qf {
        let v = Vector3::new(theta[idx], theta[idx + 1], theta[idx + 2]);
        idx += 3;
        Some(v)
    } else {
        None
    };
    let nu_vector = if has_xf {
        let nd = problem.plant.state_dim();
        let v = DVector::from_fn(nd, |i, _| theta[idx + i]);
        idx += nd;
        Some(v)
    } else {
        None
    };
    let mut mu = vec![DVector::zeros(lg); n];
    for (k, (t, j)) in active.iter().enumerate() {
        mu[t - 1][*j] = -theta[idx + k].max(0.0);
    }
    idx += active.len();
    let eta_f = DVector::from_fn(ell, |i, _| -theta[idx + i]);

    let terminal_multiplier = if has_qf || has_xf {
        Some(TerminalMultiplier {
            rotation: nu_rotation,
            vector: nu_vector,
        })
    } else {
        None
    };
    Ok((mu, terminal_multiplier, eta_f))
}

/// Solves the problem: augmented-Lagrangian outer loop over constraint
/// multipliers, projected-gradient inner loop, exact box/frequency
/// feasibility throughout, necessary-conditions certificate at the end.
///
/// Hard failures (projection stall, structurally infeasible constraints,
/// plant failure at the initial point) are errors; hitting the iteration
/// budget returns the best point with `SolveStatus::MaxIterations`.
pub fn solve<P: Plant>(
    problem: &ProblemSpec<P>,
    opts: &SolveOptions,
) -> Result<SolveResult, Error> {
    let n = problem.horizon;
    let lg = problem.plant.constraint_dim();
    let has_target = problem.target.is_some();
    let (has_qf, has_xf) = match &problem.target {
        Some(t) => (t.rotation.is_some(), t.vector.is_some()),
        None => (false, false),
    };

    let mut al = AlState {
        y: vec![DVector::zeros(lg); n],
        nu_rotation: has_qf.then(Vector3::zeros),
        nu_vector: has_xf.then(|| DVector::zeros(problem.plant.state_dim())),
        sigma: opts.penalty_init,
    };

    let mut u = project_feasible(
        &ControlTrajectory::zeros(problem.plant.control_dim(), n),
        &problem.control_bounds,
        &problem.freq,
    )
    .map_err(|e| match e {
        Error::ProjectionStall { achieved, sweeps } => Error::Infeasible {
            reason: format!(
                "projection onto box ∩ frequency-nullspace stalled (change {achieved:.3e} after {sweeps} sweeps)"
            ),
        },
        other => other,
    })?;

    let mut trace = SolveTrace::default();
    let mut total_inner = 0;
    let mut prev_violation = f64::INFINITY;
    let mut stagnant_at_cap = 0;
    let mut converged = false;
    let mut outer_done = 0;
    let mut last_residual = f64::INFINITY;
    let mut last_eval = evaluate(problem, &u, &al)?;

    for outer in 0..opts.max_outer {
        trace.outer_starts.push(trace.merit.len());
        // Inner tolerance: loose early, tightening toward the target.
        let eff_tol = |cost: f64| -> f64 {
            (opts.stationarity_rel * (1.0 + cost.abs())).min(opts.stationarity_abs)
        };
        let omega = eff_tol(last_eval.base_cost).max(1e-2 * 0.2_f64.powi(outer as i32));

        let outcome = inner_solve(problem, u, &al, omega, opts, &mut trace)?;
        u = outcome.u;
        last_eval = outcome.eval;
        last_residual = outcome.residual;
        total_inner += outcome.iterations;
        outer_done = outer + 1;

        let violation = last_eval.violation();

        // First-order multiplier updates.
        let weights = al_weights(&last_eval, &al);
        al.y = weights;
        if let (Some(nu), Some(e)) = (al.nu_rotation.as_mut(), &last_eval.rotation_error) {
            *nu += al.sigma * e;
        }
        if let (Some(nu), Some(e)) = (al.nu_vector.as_mut(), &last_eval.vector_error) {
            *nu += al.sigma * e;
        }

        let target_tol = eff_tol(last_eval.base_cost);
        if violation <= opts.violation_tol && last_residual <= target_tol {
            converged = true;
            break;
        }

        if !has_target && lg == 0 {
            // Nothing for the outer loop to enforce: the inner result is
            // final, converged or not.
            converged = last_residual <= target_tol;
            break;
        }

        // Penalty growth when the violation fails to drop by 4x.
        if violation > 0.25 * prev_violation {
            if al.sigma >= opts.penalty_cap {
                stagnant_at_cap += 1;
                if stagnant_at_cap >= 3 && violation > opts.violation_tol {
                    return Err(Error::Infeasible {
                        reason: format!(
                            "constraint violation {violation:.3e} stopped improving at penalty cap {:.1e}",
                            opts.penalty_cap
                        ),
                    });
                }
            } else {
                al.sigma = (al.sigma * opts.penalty_growth).min(opts.penalty_cap);
            }
        } else {
            stagnant_at_cap = 0;
        }
        prev_violation = prev_violation.min(violation);
    }

    // Multiplier recovery in the necessary-conditions convention. The
    // post-update y/nu are exactly the weights the last subproblem's
    // stationarity carries.
    let mu: Vec<DVector<f64>> = al.y.iter().map(|y| -y).collect();
    let terminal_multiplier = if has_target {
        Some(TerminalMultiplier {
            rotation: al.nu_rotation,
            vector: al.nu_vector.clone(),
        })
    } else {
        None
    };

    // Frequency multiplier from the stationarity decomposition: the
    // no-frequency part of ∂H/∂u is the negated augmented gradient with
    // the recovered weights.
    let augmented = TerminalAugmentedPlant::new(
        &problem.plant,
        problem.target.as_ref(),
        terminal_multiplier.as_ref(),
    );
    let pmp_sweep = weighted_backward_sweep(
        &last_eval.traj,
        &u,
        &augmented,
        -1.0,
        Some(&mu),
        None,
        None,
    )?;
    let eta_f = frequency_multiplier_ls(
        problem,
        &u,
        &ControlTrajectory::from_stages(
            &pmp_sweep
                .grad_u
                .iter()
                .map(|g| -g)
                .collect::<Vec<_>>(),
        ),
    )?;

    let (bundle, report) = certify(
        problem,
        &last_eval.traj,
        &u,
        &mu,
        terminal_multiplier.as_ref(),
        &eta_f,
        &KktTolerances::default(),
    )?;
    let viols = violations(problem, &last_eval.traj, &u);

    Ok(SolveResult {
        cost: last_eval.base_cost,
        bundle,
        terminal_multiplier,
        report,
        violations: viols,
        status: if converged {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        },
        outer_iterations: outer_done,
        inner_iterations: total_inner,
        trajectory: last_eval.traj,
        controls: u,
        trace,
    })
}
