//! Discrete-time optimal control on the rotation group with hard pointwise
//! state/control constraints and hard spectral (DFT) constraints on the
//! control trajectory.
//!
//! The crate is organised around five building blocks:
//!
//! * [`lie`] — closed-form SO(3)/so(3) kernels: hat/vee, exponential and
//!   logarithm, adjoint and coadjoint actions, and the trivialized
//!   differential of the exponential together with its dual and inverse.
//! * [`spectrum`] — DFT machinery: building the per-stage constraint
//!   matrices that null selected frequency bins of the control channels,
//!   and exact projection onto the resulting linear subspace.
//! * [`dynamics`] — the controlled plant abstraction (group part times
//!   vector part) with derivative access, plus the concrete discrete
//!   rigid-body attitude model with its implicit relative-rotation solve.
//! * [`pmp`] — first-order necessary conditions as executable code:
//!   Hamiltonian evaluation, the backward adjoint recursion with
//!   transversality seeding, and a residual report over all conditions.
//! * [`solver`] — trajectory synthesis: augmented-Lagrangian outer loop,
//!   projected-gradient inner loop with exact projection onto
//!   box ∩ spectrum-nullspace, multiplier recovery, and certification.

pub mod dynamics;
pub mod error;
pub mod lie;
pub mod pmp;
pub mod solver;
pub mod spectrum;

pub use error::Error;
