//! Rotation and rigid-transform groups SO(3) / SE(3).
//!
//! Elements are stored as rotation matrices (plus a translation column for
//! poses). Tangent vectors are plain `nalgebra` vectors: a rotation vector
//! `omega` (axis times angle, radians) and a 6-vector `(omega, u)` for poses,
//! rotation part first.
//!
//! `exp`/`log` use the Rodrigues closed form with a second-order series below
//! [`SMALL_ANGLE`]. The logarithm is canonical: it returns `|omega| <= pi`,
//! and at exactly `pi` the axis sign is fixed so that its largest-magnitude
//! component is positive.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Axis-angle tangent vector of SO(3).
pub type RotationVector = Vector3<f64>;

/// Tangent vector of SE(3), ordered `(omega, u)`.
pub type PoseVector = Vector6<f64>;

/// Below this angle (radians) the closed forms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Tolerance on `R^T R = I` and `det R = 1` when validating rotations.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

// Series cutoff for the left-Jacobian coefficients, whose closed forms lose
// digits to cancellation well above `SMALL_ANGLE`.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not a rotation: orthogonality defect {orthogonality:.3e}, det {det:.12}")]
    InvalidRotation { orthogonality: f64, det: f64 },
    #[error("matrix is not a rigid transform: bottom row {0:?}")]
    InvalidTransform([f64; 4]),
    #[error("non-finite tangent vector")]
    NonFinite,
}

/// Skew-symmetric matrix with `hat3(w) * v == w.cross(v)`.
pub fn hat3(omega: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -omega.z, omega.y, //
        omega.z, 0.0, -omega.x, //
        -omega.y, omega.x, 0.0,
    )
}

/// Inverse of [`hat3`]; reads the antisymmetric part only.
pub fn vee3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and orientation before wrapping `m`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, LieError> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !m.iter().all(|v| v.is_finite())
            || orthogonality > ORTHONORMAL_TOL
            || (det - 1.0).abs() > ORTHONORMAL_TOL
        {
            return Err(LieError::InvalidRotation { orthogonality, det });
        }
        Ok(Self(m))
    }

    /// Row-major 9 values.
    pub fn from_row_slice(values: &[f64; 9]) -> Result<Self, LieError> {
        Self::from_matrix(Matrix3::from_row_slice(values))
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn exp(omega: &RotationVector) -> Self {
        Self(exp_so3_matrix(omega))
    }

    pub fn log(&self) -> RotationVector {
        log_so3_unchecked(&self.0)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let (_, angle) = cos_sin_angle(&self.0);
        angle
    }

    pub fn about_z(yaw: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, yaw))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[f64; 9]> for Rotation {
    type Error = LieError;

    fn try_from(values: [f64; 9]) -> Result<Self, Self::Error> {
        Self::from_row_slice(&values)
    }
}

impl From<Rotation> for [f64; 9] {
    fn from(r: Rotation) -> Self {
        r.to_row_array()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

/// Element of SE(3): `[R t; 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, LieError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        let tol = ORTHONORMAL_TOL;
        if bottom[0].abs() > tol
            || bottom[1].abs() > tol
            || bottom[2].abs() > tol
            || (bottom[3] - 1.0).abs() > tol
        {
            return Err(LieError::InvalidTransform(bottom));
        }
        let rotation = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Self::new(rotation, m.fixed_view::<3, 1>(0, 3).into_owned()))
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn exp(epsilon: &PoseVector) -> Self {
        exp_se3(epsilon)
    }

    pub fn log(&self) -> PoseVector {
        log_se3(self)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        compose(&self, &rhs)
    }
}

fn exp_so3_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = hat3(omega);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k2
    } else {
        let half = 0.5 * theta;
        // (1 - cos t) / t^2 written without cancellation
        let b = 2.0 * (half.sin() / theta).powi(2);
        Matrix3::identity() + (theta.sin() / theta) * k + b * k2
    }
}

/// `exp(omega^)` on SO(3).
pub fn exp_so3(omega: &RotationVector) -> Rotation {
    Rotation::exp(omega)
}

/// Canonical `log` on SO(3). Validates `m` first.
pub fn log_so3(m: &Matrix3<f64>) -> Result<RotationVector, LieError> {
    Ok(Rotation::from_matrix(*m)?.log())
}

// Returns (sin(theta) * axis, theta) from a rotation matrix.
fn cos_sin_angle(m: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    let cos = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let sin_axis = vee3(m);
    (sin_axis, sin_axis.norm().atan2(cos))
}

fn log_so3_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    let (sin_axis, theta) = cos_sin_angle(m);
    let cos = theta.cos();
    if theta < SMALL_ANGLE {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return sin_axis * (1.0 + theta * theta / 6.0);
    }
    if cos > -0.9 {
        return sin_axis * (theta / theta.sin());
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part B = cos I + (1 - cos) a a^T instead.
    let sym = 0.5 * (m + m.transpose());
    let one_minus_cos = 1.0 - cos;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap_or(0);
    let ak = ((sym[(k, k)] - cos) / one_minus_cos).max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = if j == k {
            ak
        } else {
            sym[(k, j)] / (one_minus_cos * ak)
        };
    }
    axis.normalize_mut();
    // The sign comes from the antisymmetric part when it is resolvable;
    // otherwise axis[k] > 0 is kept, i.e. the largest component is positive.
    if sin_axis.dot(&axis) < -1e-12 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian `V(omega)` of SO(3), mapping `u` to the translation of `exp((omega, u))`.
pub fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = hat3(omega);
    let k2 = k * k;
    let (a, b) = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let half = 0.5 * theta;
        (
            2.0 * (half.sin() / theta).powi(2),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    Matrix3::identity() + a * k + b * k2
}

/// Closed-form inverse of [`left_jacobian`].
pub fn left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = hat3(omega);
    let k2 = k * k;
    let c = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - 0.5 * k + c * k2
}

/// `exp(epsilon^)` on SE(3); `epsilon = (omega, u)`.
pub fn exp_se3(epsilon: &PoseVector) -> Pose {
    let omega: Vector3<f64> = epsilon.fixed_rows::<3>(0).into_owned();
    let u: Vector3<f64> = epsilon.fixed_rows::<3>(3).into_owned();
    Pose::new(Rotation::exp(&omega), left_jacobian(&omega) * u)
}

/// Canonical `log` on SE(3).
pub fn log_se3(pose: &Pose) -> PoseVector {
    let omega = pose.rotation.log();
    let u = left_jacobian_inverse(&omega) * pose.translation;
    PoseVector::new(omega.x, omega.y, omega.z, u.x, u.y, u.z)
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation.compose(&b.rotation),
        a.rotation.rotate(&b.translation) + a.translation,
    )
}

pub fn inverse(p: &Pose) -> Pose {
    let r_inv = p.rotation.inverse();
    Pose::new(r_inv, -r_inv.rotate(&p.translation))
}

/// Whether `omega` is within `margin` of the log branch cut at `pi`.
pub fn near_branch_cut(omega: &Vector3<f64>, margin: f64) -> bool {
    omega.norm() > PI - margin
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn omega_strategy(max: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0..max).prop_filter_map(
            "axis",
            |(x, y, z, a)| {
                let v = Vector3::new(x, y, z);
                (v.norm() > 1e-3).then(|| v.normalize() * a)
            },
        )
    }

    proptest! {
        #[test]
        fn exp_is_orthonormal(w in omega_strategy(20.0)) {
            let r = exp_so3(&w);
            let m = r.matrix();
            prop_assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn log_norm_bounded(w in omega_strategy(20.0)) {
            prop_assert!(exp_so3(&w).log().norm() <= PI + 1e-9);
        }

        #[test]
        fn log_inverts_exp(w in omega_strategy(PI - 1e-6)) {
            prop_assert!((exp_so3(&w).log() - w).norm() < 1e-9);
        }
    }
}
