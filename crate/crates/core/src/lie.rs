//! Closed-form kernels for SO(3) and its Lie algebra so(3).
//!
//! Conventions used throughout the crate:
//!
//! * so(3) elements are stored as their coordinate vector in R³ under the
//!   `hat` isomorphism, so `hat(v) w = v × w`.
//! * The dual space is identified with R³ through the Euclidean pairing in
//!   the hat basis, `⟨a, v⟩ = aᵀv`.
//! * `dexp` denotes the *right*-trivialized differential of the exponential:
//!   `d/ds exp(v + s δ)|₀ = hat(dexp(v) δ) · exp(v)`. The left-trivialized
//!   variant is `dexp(-v) = dexp(v)ᵀ`, so both are available from the same
//!   coefficient evaluation.
//! * Group-valued state perturbations elsewhere in the crate are
//!   left-trivialized (`q ↦ q exp(ε δ̂)`), matching the pairing used by the
//!   adjoint recursion.

use nalgebra::{Matrix3, Vector3};

use crate::error::Error;

/// Coordinates of an so(3) element in the hat basis.
///
/// Units are contextual: radians for attitude increments, rad/s-like
/// quantities when scaled by a step length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgebraVector(pub Vector3<f64>);

impl AlgebraVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AlgebraVector(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        AlgebraVector(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

impl From<Vector3<f64>> for AlgebraVector {
    fn from(v: Vector3<f64>) -> Self {
        AlgebraVector(v)
    }
}

/// Coordinates of an element of the dual algebra so(3)* in the basis dual
/// to hat; pairs with [`AlgebraVector`] by the Euclidean inner product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovectorAlgebra(pub Vector3<f64>);

impl CovectorAlgebra {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        CovectorAlgebra(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        CovectorAlgebra(Vector3::zeros())
    }

    /// Natural pairing ⟨a, v⟩ = aᵀv.
    pub fn pair(&self, v: &AlgebraVector) -> f64 {
        self.0.dot(&v.0)
    }
}

impl From<Vector3<f64>> for CovectorAlgebra {
    fn from(v: Vector3<f64>) -> Self {
        CovectorAlgebra(v)
    }
}

/// A 3×3 rotation matrix, validated on construction from raw data.
///
/// Composition of validated rotations stays within the type without
/// re-validation; orthogonality drift over long products is measured by
/// callers rather than silently repaired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    /// Largest admissible ‖RᵀR − I‖_∞ and |det R − 1| when constructing
    /// from a raw matrix.
    pub const VALIDATION_TOL: f64 = 1e-10;

    /// Validates orthogonality and determinant before wrapping.
    pub fn new(m: Matrix3<f64>) -> Result<Self, Error> {
        let defect = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if defect > Self::VALIDATION_TOL || (det - 1.0).abs() > Self::VALIDATION_TOL {
            return Err(Error::NotARotation {
                orthogonality_defect: defect,
                det,
            });
        }
        Ok(RotationMatrix(m))
    }

    /// Wraps without validation; for compositions of already-valid
    /// rotations and closed-form constructions.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    /// ‖RᵀR − I‖_∞, the measured orthogonality drift.
    pub fn orthogonality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Applies the rotation to a vector of R³.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl std::ops::Mul<&RotationMatrix> for &RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

/// The hat isomorphism R³ → so(3); `hat(v) w = v × w`.
pub fn hat(v: &AlgebraVector) -> Matrix3<f64> {
    let (x, y, z) = (v.0.x, v.0.y, v.0.z);
    Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0)
}

/// Inverse of [`hat`]; reads the strictly lower/upper entries directly so
/// that `vee(hat(v)) == v` bit-exactly.
pub fn vee(m: &Matrix3<f64>) -> AlgebraVector {
    AlgebraVector(Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Vee of the skew-symmetric part of a general matrix.
pub(crate) fn skew_part_vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues coefficients sin θ/θ and (1 − cos θ)/θ² with second-order
/// Taylor forms below θ = 1e-8 to avoid cancellation.
fn rodrigues_coefficients(theta: f64) -> (f64, f64) {
    if theta < 1e-8 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let t2 = theta * theta;
        (theta.sin() / theta, (1.0 - theta.cos()) / t2)
    }
}

/// Exponential map so(3) → SO(3) in Rodrigues closed form.
pub fn exp_so3(v: &AlgebraVector) -> RotationMatrix {
    let theta = v.0.norm();
    let (a, b) = rodrigues_coefficients(theta);
    let k = hat(v);
    RotationMatrix(Matrix3::identity() + a * k + b * (k * k))
}

/// Logarithm SO(3) → so(3), defined for rotation angles bounded away
/// from π.
///
/// Fails with [`Error::AngleNearPi`] when trace(R) ≤ −1 + 1e−9, i.e. the
/// angle is within ~3e−5 rad of π, where the principal logarithm becomes
/// ill-conditioned.
pub fn log_so3(r: &RotationMatrix) -> Result<AlgebraVector, Error> {
    let trace = r.0.trace();
    if trace <= -1.0 + 1e-9 {
        return Err(Error::AngleNearPi { trace });
    }
    let w = skew_part_vee(&r.0); // = sin θ · axis
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_theta = w.norm();
    let theta = sin_theta.atan2(cos_theta);
    if theta < 1e-8 {
        // sin θ/θ = 1 to well below f64 resolution here.
        return Ok(AlgebraVector(w));
    }
    Ok(AlgebraVector(w * (theta / sin_theta)))
}

/// Adjoint action of SO(3) on so(3): `Ad_R v = vee(R hat(v) Rᵀ) = R v`.
pub fn adjoint(r: &RotationMatrix, v: &AlgebraVector) -> AlgebraVector {
    AlgebraVector(r.0 * v.0)
}

/// Coadjoint action on the dual algebra, `Ad*_{R⁻¹} a`, defined by
/// `⟨coadjoint(R, a), v⟩ = ⟨a, Ad_{R⁻¹} v⟩`; in coordinates `R a`.
pub fn coadjoint(r: &RotationMatrix, a: &CovectorAlgebra) -> CovectorAlgebra {
    CovectorAlgebra(r.0 * a.0)
}

/// Coefficients of dexp(v) = I + b K + c K² with K = hat(v):
/// b = (1 − cos θ)/θ², c = (θ − sin θ)/θ³.
fn dexp_coefficients(theta: f64) -> (f64, f64) {
    if theta < 1e-2 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

/// Matrix of the right-trivialized differential of exp at `v`:
/// `d/ds exp(v + s δ)|₀ = hat(dexp_matrix(v) δ) · exp(v)`.
pub fn dexp_matrix(v: &AlgebraVector) -> Matrix3<f64> {
    let theta = v.0.norm();
    let (b, c) = dexp_coefficients(theta);
    let k = hat(v);
    Matrix3::identity() + b * k + c * (k * k)
}

/// Matrix of the inverse of [`dexp_matrix`]:
/// I − K/2 + d K² with d = (1/θ²)(1 − (θ/2)·cot(θ/2)).
///
/// Requires ‖v‖ < π; the inverse is singular at θ = 2π and already badly
/// conditioned past π, which the surrounding algorithms never reach.
pub fn dexp_inv_matrix(v: &AlgebraVector) -> Result<Matrix3<f64>, Error> {
    let theta = v.0.norm();
    if theta >= std::f64::consts::PI {
        return Err(Error::AngleNearPi { trace: -1.0 });
    }
    let d = if theta < 0.1 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        1.0 / 12.0 + t2 / 720.0 + t4 / 30240.0
    } else {
        let t2 = theta * theta;
        1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    let k = hat(v);
    Ok(Matrix3::identity() - 0.5 * k + d * (k * k))
}

/// Right-trivialized differential of exp applied to a tangent direction.
pub fn dexp(v: &AlgebraVector, w: &AlgebraVector) -> AlgebraVector {
    AlgebraVector(dexp_matrix(v) * w.0)
}

/// Dual of [`dexp`]: `⟨dexp_dual(v, a), w⟩ = ⟨a, dexp(v, w)⟩`.
pub fn dexp_dual(v: &AlgebraVector, a: &CovectorAlgebra) -> CovectorAlgebra {
    CovectorAlgebra(dexp_matrix(v).transpose() * a.0)
}

/// Inverse of [`dexp`] in the tangent argument.
pub fn dexp_inv(v: &AlgebraVector, w: &AlgebraVector) -> Result<AlgebraVector, Error> {
    Ok(AlgebraVector(dexp_inv_matrix(v)? * w.0))
}

/// Dual of the inverse differential:
/// `⟨dexp_inv_dual(v, a), w⟩ = ⟨a, dexp_inv(v, w)⟩`; satisfies
/// `dexp_inv_dual(0, a) = a`.
pub fn dexp_inv_dual(v: &AlgebraVector, a: &CovectorAlgebra) -> Result<CovectorAlgebra, Error> {
    Ok(CovectorAlgebra(dexp_inv_matrix(v)?.transpose() * a.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn random_algebra(rng: &mut StdRng, radius: f64) -> AlgebraVector {
        loop {
            let v = Vector3::new(
                rng.gen_range(-radius..radius),
                rng.gen_range(-radius..radius),
                rng.gen_range(-radius..radius),
            );
            if v.norm() <= radius {
                return AlgebraVector(v);
            }
        }
    }

    /// Truncated matrix power series Σ K^k / k!, independent of the
    /// Rodrigues implementation.
    fn exp_series_oracle(v: &AlgebraVector, terms: usize) -> Matrix3<f64> {
        let k = hat(v);
        let mut acc = Matrix3::identity();
        let mut term = Matrix3::identity();
        for n in 1..terms {
            term = term * k / (n as f64);
            acc += term;
        }
        acc
    }

    #[test]
    fn hat_matches_cross_product_matrix() {
        let m = hat(&AlgebraVector::new(1.0, 2.0, 3.0));
        let expected = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(m, expected);
    }

    #[test]
    fn hat_of_zero_is_zero() {
        assert_eq!(hat(&AlgebraVector::zero()), Matrix3::zeros());
    }

    #[test]
    fn hat_acts_as_cross_product() {
        let v = AlgebraVector::new(0.4, -1.3, 2.0);
        let w = Vector3::new(-0.7, 0.2, 0.9);
        assert_relative_eq!(hat(&v) * w, v.0.cross(&w), epsilon = 1e-15);
    }

    #[test]
    fn vee_hat_roundtrip_is_bit_exact() {
        let v = AlgebraVector::new(0.3, -1.1, 2.2);
        assert_eq!(vee(&hat(&v)), v);
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_so3(&AlgebraVector::zero()).0, Matrix3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = exp_so3(&AlgebraVector::new(0.0, 0.0, PI / 2.0));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r.0, expected, epsilon = 1e-15);
    }

    #[test]
    fn exp_matches_power_series_oracle() {
        let v = AlgebraVector::new(0.1, -0.2, 0.3);
        let oracle = exp_series_oracle(&v, 30);
        assert!((exp_so3(&v).0 - oracle).amax() <= 1e-13);
    }

    #[test]
    fn log_of_identity_is_zero() {
        let v = log_so3(&RotationMatrix::identity()).unwrap();
        assert_eq!(v.0, Vector3::zeros());
    }

    #[test]
    fn log_exp_roundtrip_inside_injectivity_radius() {
        let v = AlgebraVector::new(0.4, 0.5, -0.6);
        let back = log_so3(&exp_so3(&v)).unwrap();
        assert_relative_eq!(back.0, v.0, epsilon = 1e-12);
    }

    #[test]
    fn log_near_pi_boundary() {
        let ok = exp_so3(&AlgebraVector::new(3.14, 0.0, 0.0));
        assert!(log_so3(&ok).is_ok());

        let bad = exp_so3(&AlgebraVector::new(3.1415926, 0.0, 0.0));
        match log_so3(&bad) {
            Err(Error::AngleNearPi { .. }) => {}
            other => panic!("expected AngleNearPi, got {other:?}"),
        }
    }

    #[test]
    fn adjoint_at_identity_is_identity() {
        let v = AlgebraVector::new(1.0, -2.0, 0.5);
        assert_eq!(adjoint(&RotationMatrix::identity(), &v), v);
    }

    #[test]
    fn adjoint_rotates_the_axis() {
        let rz = exp_so3(&AlgebraVector::new(0.0, 0.0, PI / 2.0));
        let out = adjoint(&rz, &AlgebraVector::new(1.0, 0.0, 0.0));
        assert_relative_eq!(out.0, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn adjoint_matches_conjugation_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let r = exp_so3(&random_algebra(&mut rng, 2.5));
            let v = random_algebra(&mut rng, 3.0);
            let conjugated = r.0 * hat(&v) * r.0.transpose();
            assert!((hat(&adjoint(&r, &v)) - conjugated).amax() <= 1e-13);
        }
    }

    #[test]
    fn coadjoint_at_identity_is_identity() {
        let a = CovectorAlgebra::new(0.2, 0.4, -0.9);
        assert_eq!(coadjoint(&RotationMatrix::identity(), &a), a);
    }

    #[test]
    fn coadjoint_pairing_identity() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let r = exp_so3(&random_algebra(&mut rng, 2.5));
            let a = CovectorAlgebra(random_algebra(&mut rng, 3.0).0);
            let v = random_algebra(&mut rng, 3.0);
            let lhs = coadjoint(&r, &a).pair(&v);
            let rhs = a.pair(&adjoint(&r.transpose(), &v));
            assert!((lhs - rhs).abs() <= 1e-13);
        }
    }

    #[test]
    fn coadjoint_matches_transpose_action_oracle() {
        // Ad_{R⁻¹} has matrix Rᵀ; its dual has matrix R.
        let rz = exp_so3(&AlgebraVector::new(0.0, 0.0, PI / 2.0));
        let a = CovectorAlgebra::new(1.0, 0.0, 0.0);
        let oracle = rz.0.transpose().transpose() * a.0;
        assert_relative_eq!(coadjoint(&rz, &a).0, oracle, epsilon = 1e-15);
    }

    #[test]
    fn dexp_at_origin_is_identity() {
        let a = CovectorAlgebra::new(0.3, -0.8, 1.1);
        let out = dexp_inv_dual(&AlgebraVector::zero(), &a).unwrap();
        assert_eq!(out, a);
        let w = AlgebraVector::new(-0.2, 0.5, 0.7);
        assert_eq!(dexp(&AlgebraVector::zero(), &w), w);
    }

    #[test]
    fn dexp_linear_in_direction() {
        let v = AlgebraVector::new(0.9, -0.1, 0.4);
        let zero = dexp_inv_dual(&v, &CovectorAlgebra::zero()).unwrap();
        assert_eq!(zero.0, Vector3::zeros());
    }

    #[test]
    fn dexp_matches_finite_differences_of_exp() {
        // Central differences: (exp(v+εδ) − exp(v−εδ))/(2ε)·exp(v)ᵀ should
        // equal hat(dexp(v)δ) to O(ε²).
        let mut rng = StdRng::seed_from_u64(23);
        let eps = 1e-6;
        for _ in 0..40 {
            let v = random_algebra(&mut rng, 2.5);
            let d = random_algebra(&mut rng, 1.0);
            let plus = exp_so3(&AlgebraVector(v.0 + eps * d.0)).0;
            let minus = exp_so3(&AlgebraVector(v.0 - eps * d.0)).0;
            let fd = (plus - minus) / (2.0 * eps) * exp_so3(&v).0.transpose();
            let fd_vee = skew_part_vee(&fd);
            let analytic = dexp(&v, &d).0;
            let scale = analytic.norm().max(1.0);
            assert!(
                (fd_vee - analytic).norm() / scale <= 1e-6,
                "dexp disagrees with finite differences: {:?} vs {:?}",
                fd_vee,
                analytic
            );
        }
    }

    #[test]
    fn dexp_dual_pairing_identity() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..100 {
            let v = random_algebra(&mut rng, 2.5);
            let a = CovectorAlgebra(random_algebra(&mut rng, 3.0).0);
            let w = random_algebra(&mut rng, 3.0);
            let lhs = dexp_dual(&v, &a).pair(&w);
            let rhs = a.pair(&dexp(&v, &w));
            assert!((lhs - rhs).abs() <= 1e-12);

            let lhs_inv = dexp_inv_dual(&v, &a).unwrap().pair(&w);
            let rhs_inv = a.pair(&dexp_inv(&v, &w).unwrap());
            assert!((lhs_inv - rhs_inv).abs() <= 1e-12);
        }
    }

    #[test]
    fn dexp_inv_is_matrix_inverse_of_dexp() {
        let mut rng = StdRng::seed_from_u64(37);
        for _ in 0..50 {
            let v = random_algebra(&mut rng, 3.0);
            let prod = dexp_matrix(&v) * dexp_inv_matrix(&v).unwrap();
            assert!((prod - Matrix3::identity()).amax() <= 1e-12);
        }
    }

    #[test]
    fn dexp_inv_rejects_angle_past_pi() {
        let v = AlgebraVector::new(3.2, 0.0, 0.0);
        assert!(matches!(
            dexp_inv_matrix(&v),
            Err(Error::AngleNearPi { .. })
        ));
    }

    #[test]
    fn rotation_validation_rejects_non_rotations() {
        let skewed = Matrix3::new(1.0, 0.001, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            RotationMatrix::new(skewed),
            Err(Error::NotARotation { .. })
        ));
        assert!(RotationMatrix::new(Matrix3::identity()).is_ok());
    }

    #[test]
    fn exp_produces_valid_rotations_up_to_norm_three() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..500 {
            let v = random_algebra(&mut rng, 3.0);
            let r = exp_so3(&v);
            assert!(r.orthogonality_defect() <= 1e-12);
            assert!((r.determinant() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_exp_componentwise_inside_ball() {
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..500 {
            let v = random_algebra(&mut rng, PI - 1e-3);
            let back = log_so3(&exp_so3(&v)).unwrap();
            let err = (back.0 - v.0).amax();
            assert!(err <= 1e-10, "roundtrip error {err} for {v:?}");
        }
    }

    #[test]
    fn adjoint_composes_and_dualizes() {
        let mut rng = StdRng::seed_from_u64(47);
        for _ in 0..50 {
            let r = exp_so3(&random_algebra(&mut rng, 2.0));
            let s = exp_so3(&random_algebra(&mut rng, 2.0));
            let v = random_algebra(&mut rng, 3.0);
            let lhs = adjoint(&r, &adjoint(&s, &v));
            let rhs = adjoint(&(&r * &s), &v);
            assert!((lhs.0 - rhs.0).amax() <= 1e-13);

            // Ad*_{R⁻¹} is the transpose-inverse of Ad_R in coordinates.
            let ad = r.0;
            let coad = ad.transpose().try_inverse().unwrap();
            let a = CovectorAlgebra(random_algebra(&mut rng, 1.0).0);
            assert!((coadjoint(&r, &a).0 - coad * a.0).amax() <= 1e-13);
        }
    }
}
