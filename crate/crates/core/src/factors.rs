//! Constraint residuals, robust loss and weights.
//!
//! Scalar constraints (range, trajectory smoothness) cost `w * rho(e)`.
//! Vector constraints (relative translation / rotation / transform and the
//! pose smoothness constraint) cost `rho(sqrt(e^T W e))`.
//!
//! `rho` is the Pseudo-Huber loss `xi^2 (sqrt(1 + (r / xi)^2) - 1)`:
//! quadratic for `|r| << xi` and linear in the tails.

use crate::lie::{log_se3, Pose, PoseVector, Rotation, RotationVector};
use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Robot closer than this to an anchor makes the range gradient undefined.
pub const SINGULAR_RANGE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("robot within {distance:.3e} m of anchor; range gradient undefined")]
    SingularGeometry { distance: f64 },
    #[error("weight matrix is not symmetric positive semidefinite")]
    InvalidWeight,
    #[error("invalid factor parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Pseudo-Huber loss with slope parameter `xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLoss {
    xi: f64,
}

impl RobustLoss {
    pub fn new(xi: f64) -> Result<Self, FactorError> {
        if xi > 0.0 && xi.is_finite() {
            Ok(Self { xi })
        } else {
            Err(FactorError::InvalidParameter(
                "pseudo-huber slope must be positive",
            ))
        }
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn value(&self, r: f64) -> f64 {
        pseudo_huber(r, self.xi).0
    }

    /// `d rho / d r`.
    pub fn first(&self, r: f64) -> f64 {
        pseudo_huber(r, self.xi).1
    }

    /// `d^2 rho / d r^2 = (1 + (r/xi)^2)^(-3/2)`.
    pub fn second(&self, r: f64) -> f64 {
        let s2 = 1.0 + (r / self.xi).powi(2);
        1.0 / (s2 * s2.sqrt())
    }

    /// `rho(sqrt(q))` for a squared Mahalanobis norm `q >= 0`, together with
    /// its first and second derivatives in `q`. Smooth at `q = 0`.
    pub fn of_squared(&self, q: f64) -> (f64, f64, f64) {
        let xi2 = self.xi * self.xi;
        let s = (1.0 + q / xi2).sqrt();
        let value = xi2 * (s - 1.0);
        let d1 = 0.5 / s;
        let d2 = -0.25 / (xi2 * s * s * s);
        (value, d1, d2)
    }
}

impl Default for RobustLoss {
    fn default() -> Self {
        Self { xi: 1.0 }
    }
}

/// Pseudo-Huber value and its derivative `r / sqrt(1 + (r/xi)^2)`.
pub fn pseudo_huber(r: f64, xi: f64) -> (f64, f64) {
    let ratio = r / xi;
    let s = (1.0 + ratio * ratio).sqrt();
    // xi^2 (s - 1) == r^2 / (s + 1), which keeps precision for small r
    (r * r / (s + 1.0), r / s)
}

/// Constraint weight `iota^2 / (sigma^2 + iota^2)`, always in `(0, 1]`.
pub fn weight_from_variance(sigma_sq: f64, iota: f64) -> f64 {
    let iota2 = iota * iota;
    iota2 / (sigma_sq + iota2)
}

/// Range noise variance from a noise bound via the 3-sigma rule.
pub fn range_variance(eta: f64) -> f64 {
    eta * eta / 9.0
}

/// Smoothness variance `(v_max * dt)^2 / 9`.
pub fn smoothness_variance(v_max: f64, dt: f64) -> f64 {
    (v_max * dt).powi(2) / 9.0
}

fn check_spsd<const D: usize>(w: &SMatrix<f64, D, D>) -> Result<(), FactorError> {
    let scale = w.abs().max().max(1.0);
    if (w - w.transpose()).abs().max() > 1e-12 * scale {
        return Err(FactorError::InvalidWeight);
    }
    let dyn_w = nalgebra::DMatrix::from_iterator(D, D, w.iter().copied());
    let eig = dyn_w.symmetric_eigenvalues();
    if eig.iter().any(|&l| l < -1e-12 * scale || !l.is_finite()) {
        return Err(FactorError::InvalidWeight);
    }
    Ok(())
}

/// `rho(sqrt(e^T W e))`.
pub fn robust_quadratic<const D: usize>(
    e: &SVector<f64, D>,
    w: &SMatrix<f64, D, D>,
    loss: &RobustLoss,
) -> f64 {
    let q = (e.transpose() * w * e)[(0, 0)].max(0.0);
    loss.of_squared(q).0
}

/// Range to an anchor at a known position.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeFactor {
    pub d: f64,
    pub anchor: Vector3<f64>,
    pub w_r: f64,
    pub loss: RobustLoss,
}

impl RangeFactor {
    pub fn new(
        d: f64,
        anchor: Vector3<f64>,
        w_r: f64,
        loss: RobustLoss,
    ) -> Result<Self, FactorError> {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(FactorError::InvalidParameter("range must be non-negative"));
        }
        if !(w_r > 0.0 && w_r <= 1.0) {
            return Err(FactorError::InvalidParameter(
                "range weight must lie in (0, 1]",
            ));
        }
        Ok(Self {
            d,
            anchor,
            w_r,
            loss,
        })
    }

    /// Weight from the noise bound `eta` via the 3-sigma rule.
    pub fn from_noise_bound(
        d: f64,
        anchor: Vector3<f64>,
        eta: f64,
        iota: f64,
        loss: RobustLoss,
    ) -> Result<Self, FactorError> {
        Self::new(
            d,
            anchor,
            weight_from_variance(range_variance(eta), iota),
            loss,
        )
    }

    pub fn cost(&self, t: &Vector3<f64>) -> Result<f64, FactorError> {
        let (e, _) = range_residual(t, self)?;
        Ok(self.w_r * self.loss.value(e))
    }

    /// Cost, gradient and Hessian with respect to the robot translation.
    pub fn derivatives(
        &self,
        t: &Vector3<f64>,
    ) -> Result<(f64, Vector3<f64>, Matrix3<f64>), FactorError> {
        let diff = t - self.anchor;
        let dist = diff.norm();
        if dist < SINGULAR_RANGE {
            return Err(FactorError::SingularGeometry { distance: dist });
        }
        let h = diff / dist;
        let e = self.d - dist;
        let (rho, y) = pseudo_huber(e, self.loss.xi());
        let l = self.loss.second(e);
        let grad = -self.w_r * y * h;
        // w (l h h^T - y (I - h h^T) / dist)
        let hht = h * h.transpose();
        let hess = self.w_r * (l * hht - (y / dist) * (Matrix3::identity() - hht));
        Ok((self.w_r * rho, grad, hess))
    }

    /// Hessian without the curvature term of the range itself; always PSD.
    pub fn gauss_newton_hessian(&self, t: &Vector3<f64>) -> Result<Matrix3<f64>, FactorError> {
        let diff = t - self.anchor;
        let dist = diff.norm();
        if dist < SINGULAR_RANGE {
            return Err(FactorError::SingularGeometry { distance: dist });
        }
        let h = diff / dist;
        Ok(self.w_r * self.loss.second(self.d - dist) * (h * h.transpose()))
    }
}

/// `e_r = d - |t - anchor|` and `d e_r / d t`.
pub fn range_residual(
    t: &Vector3<f64>,
    f: &RangeFactor,
) -> Result<(f64, Vector3<f64>), FactorError> {
    let diff = t - f.anchor;
    let dist = diff.norm();
    if dist < SINGULAR_RANGE {
        return Err(FactorError::SingularGeometry { distance: dist });
    }
    Ok((f.d - dist, -diff / dist))
}

/// Range residual of a pose against an anchor pose; only translations matter.
pub fn range_residual_pose(pose: &Pose, anchor: &Pose, d: f64) -> Result<f64, FactorError> {
    // (P_k - P_a) (0,0,0,1)^T selects the translation column difference
    let dist = (pose.translation - anchor.translation).norm();
    if dist < SINGULAR_RANGE {
        return Err(FactorError::SingularGeometry { distance: dist });
    }
    Ok(d - dist)
}

/// Trajectory smoothness between consecutive translations.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessFactor {
    pub w_s: f64,
    pub dt: f64,
    pub v_max: f64,
    pub loss: RobustLoss,
}

impl SmoothnessFactor {
    /// Weight derived from `(v_max * dt)^2 / 9` and `iota`.
    pub fn new(dt: f64, v_max: f64, iota: f64, loss: RobustLoss) -> Result<Self, FactorError> {
        let w_s = weight_from_variance(smoothness_variance(v_max, dt), iota);
        Self::with_weight(w_s, dt, v_max, loss)
    }

    pub fn with_weight(
        w_s: f64,
        dt: f64,
        v_max: f64,
        loss: RobustLoss,
    ) -> Result<Self, FactorError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FactorError::InvalidParameter(
                "smoothness interval must be positive",
            ));
        }
        if !(v_max > 0.0 && v_max.is_finite()) {
            return Err(FactorError::InvalidParameter(
                "maximum velocity must be positive",
            ));
        }
        if !(w_s > 0.0 && w_s <= 1.0) {
            return Err(FactorError::InvalidParameter(
                "smoothness weight must lie in (0, 1]",
            ));
        }
        Ok(Self {
            w_s,
            dt,
            v_max,
            loss,
        })
    }

    pub fn cost(&self, t_k: &Vector3<f64>, t_prev: &Vector3<f64>) -> f64 {
        self.w_s * self.loss.value(smoothness_residual(t_k, t_prev))
    }

    /// Cost, gradient with respect to `t_k` (the gradient for `t_prev` is its
    /// negation) and the 3x3 curvature block `X`; the full 6x6 Hessian is
    /// `[X -X; -X X]`.
    pub fn derivatives(
        &self,
        t_k: &Vector3<f64>,
        t_prev: &Vector3<f64>,
    ) -> (f64, Vector3<f64>, Matrix3<f64>) {
        let delta = t_k - t_prev;
        let xi2 = self.loss.xi() * self.loss.xi();
        let n2 = delta.norm_squared();
        let s2 = 1.0 + n2 / xi2;
        let s = s2.sqrt();
        let grad = self.w_s * delta / s;
        let curv = ((xi2 + n2) * Matrix3::identity() - delta * delta.transpose()) / (xi2 * s2 * s);
        (self.w_s * self.loss.value(n2.sqrt()), grad, self.w_s * curv)
    }
}

/// `e_s = |t_k - t_prev|`.
pub fn smoothness_residual(t_k: &Vector3<f64>, t_prev: &Vector3<f64>) -> f64 {
    (t_k - t_prev).norm()
}

/// Relative translation measurement `l_ij` between two nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RelTranslationFactor {
    pub l: Vector3<f64>,
    pub weight: Matrix3<f64>,
    pub loss: RobustLoss,
}

impl RelTranslationFactor {
    pub fn new(
        l: Vector3<f64>,
        weight: Matrix3<f64>,
        loss: RobustLoss,
    ) -> Result<Self, FactorError> {
        check_spsd(&weight)?;
        Ok(Self { l, weight, loss })
    }

    pub fn cost(&self, t_i: &Vector3<f64>, t_j: &Vector3<f64>) -> f64 {
        robust_quadratic(
            &rel_translation_residual(t_i, t_j, self),
            &self.weight,
            &self.loss,
        )
    }

    /// Cost, gradient with respect to `t_i` (negate for `t_j`) and the 3x3
    /// block `H` such that the full Hessian is `[H -H; -H H]`.
    pub fn derivatives(
        &self,
        t_i: &Vector3<f64>,
        t_j: &Vector3<f64>,
    ) -> (f64, Vector3<f64>, Matrix3<f64>) {
        let e = rel_translation_residual(t_i, t_j, self);
        let we = self.weight * e;
        let q = e.dot(&we).max(0.0);
        let (value, d1, d2) = self.loss.of_squared(q);
        // de/dt_i = -I
        let dq = -2.0 * we;
        let grad = d1 * dq;
        let hess = d2 * dq * dq.transpose() + 2.0 * d1 * self.weight;
        (value, grad, hess)
    }

    /// Curvature block without the negative robust term; always PSD.
    pub fn gauss_newton_block(&self, t_i: &Vector3<f64>, t_j: &Vector3<f64>) -> Matrix3<f64> {
        let e = rel_translation_residual(t_i, t_j, self);
        let q = e.dot(&(self.weight * e)).max(0.0);
        2.0 * self.loss.of_squared(q).1 * self.weight
    }
}

/// `e_t = l_ij - (t_i - t_j)`.
pub fn rel_translation_residual(
    t_i: &Vector3<f64>,
    t_j: &Vector3<f64>,
    f: &RelTranslationFactor,
) -> Vector3<f64> {
    f.l - (t_i - t_j)
}

/// Relative rotation measurement `u_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelRotationFactor {
    pub u: Rotation,
    pub weight: Matrix3<f64>,
    pub loss: RobustLoss,
}

impl RelRotationFactor {
    pub fn new(u: Rotation, weight: Matrix3<f64>, loss: RobustLoss) -> Result<Self, FactorError> {
        check_spsd(&weight)?;
        Ok(Self { u, weight, loss })
    }

    pub fn cost(&self, r_i: &Rotation, r_j: &Rotation) -> f64 {
        robust_quadratic(
            &rel_rotation_residual(r_i, r_j, self),
            &self.weight,
            &self.loss,
        )
    }
}

/// `e_o = log(u_ij (R_i R_j)^-1)`.
pub fn rel_rotation_residual(
    r_i: &Rotation,
    r_j: &Rotation,
    f: &RelRotationFactor,
) -> RotationVector {
    f.u.compose(&r_i.compose(r_j).inverse()).log()
}

/// Relative transform measurement `q_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelTransformFactor {
    pub q: Pose,
    pub weight: Matrix6<f64>,
    pub loss: RobustLoss,
}

impl RelTransformFactor {
    pub fn new(q: Pose, weight: Matrix6<f64>, loss: RobustLoss) -> Result<Self, FactorError> {
        check_spsd(&weight)?;
        Ok(Self { q, weight, loss })
    }

    pub fn cost(&self, p_i: &Pose, p_j: &Pose) -> f64 {
        robust_quadratic(
            &rel_transform_residual(p_i, p_j, self),
            &self.weight,
            &self.loss,
        )
    }
}

/// `e_p = log(q_ij (P_i P_j)^-1)`.
pub fn rel_transform_residual(p_i: &Pose, p_j: &Pose, f: &RelTransformFactor) -> PoseVector {
    log_se3(&f.q.compose(&p_i.compose(p_j).inverse()))
}

/// Smoothness between consecutive poses using two orientation-sensor readings.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSmoothnessFactor {
    pub r_meas_prev: Rotation,
    pub r_meas_curr: Rotation,
    pub weight: Matrix6<f64>,
    pub loss: RobustLoss,
}

impl PoseSmoothnessFactor {
    /// Block-diagonal weight `diag(w_o, w_s I)`.
    pub fn new(
        r_meas_prev: Rotation,
        r_meas_curr: Rotation,
        w_o: Matrix3<f64>,
        w_s: f64,
        loss: RobustLoss,
    ) -> Result<Self, FactorError> {
        check_spsd(&w_o)?;
        if !(w_s > 0.0 && w_s <= 1.0) {
            return Err(FactorError::InvalidParameter(
                "smoothness weight must lie in (0, 1]",
            ));
        }
        let mut weight = Matrix6::zeros();
        weight.fixed_view_mut::<3, 3>(0, 0).copy_from(&w_o);
        weight
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(w_s * Matrix3::identity()));
        Ok(Self {
            r_meas_prev,
            r_meas_curr,
            weight,
            loss,
        })
    }

    pub fn cost(&self, p_k: &Pose, p_prev: &Pose) -> f64 {
        robust_quadratic(
            &pose_smoothness_residual(p_k, p_prev, self),
            &self.weight,
            &self.loss,
        )
    }
}

/// `log([R̆_prev^-1 R̆_curr, 0; 0, 1] P_k^-1 P_prev)`.
pub fn pose_smoothness_residual(p_k: &Pose, p_prev: &Pose, f: &PoseSmoothnessFactor) -> PoseVector {
    let measured = Pose::from_rotation(f.r_meas_prev.inverse().compose(&f.r_meas_curr));
    log_se3(&measured.compose(&p_k.inverse()).compose(p_prev))
}
