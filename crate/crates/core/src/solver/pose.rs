//! Pose windows optimized over global log coordinates.
//!
//! Each free node is parameterized by `eps = log(P)` and mapped back through
//! `exp`. Residual Jacobians in these coordinates come from central
//! differences; the curvature is the reweighted Gauss-Newton matrix
//! `c rho'(sqrt q) / sqrt q * J^T W J`, which is PSD by construction.

use super::{levenberg_marquardt, HessianBuilder, LmConfig, SolveReport, SolverError};
use crate::factors::{
    pose_smoothness_residual, range_residual_pose, rel_rotation_residual, rel_transform_residual,
    FactorError, RobustLoss,
};
use crate::graph::{Factor, FactorGraph, Slot, StateVector};
use crate::lie::{exp_se3, log_se3, Pose, PoseVector};
use nalgebra::{DMatrix, DVector, SMatrix};
use std::f64::consts::PI;

/// Rotation angles closer than this to pi are refused as start points.
pub const BRANCH_MARGIN: f64 = 1e-3;

const FD_STEP: f64 = 1e-6;

/// Log coordinates of every pose in `x`, stacked.
pub fn pose_coordinates(x: &StateVector<Pose>) -> Result<DVector<f64>, SolverError> {
    let mut v = DVector::zeros(6 * x.len());
    for (k, p) in x.blocks().iter().enumerate() {
        let eps = log_se3(p);
        let angle = eps.fixed_rows::<3>(0).norm();
        if angle > PI - BRANCH_MARGIN {
            return Err(SolverError::BranchCut { node: k, angle });
        }
        v.fixed_rows_mut::<6>(6 * k).copy_from(&eps);
    }
    Ok(v)
}

fn poses_from(v: &DVector<f64>) -> StateVector<Pose> {
    StateVector::new(
        (0..v.len() / 6)
            .map(|k| exp_se3(&v.fixed_rows::<6>(6 * k).into_owned()))
            .collect(),
    )
}

/// Residual, weight and scale such that the cost is `c * rho(sqrt(r^T W r))`.
fn weighted_residual(
    factor: &Factor,
    a: &Pose,
    b: Option<&Pose>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64, RobustLoss), FactorError> {
    let b = || {
        b.ok_or(FactorError::InvalidParameter(
            "binary factor needs two nodes",
        ))
    };
    let dyn_w = |w: &[f64], n: usize| DMatrix::from_column_slice(n, n, w);
    Ok(match factor {
        Factor::Range(f) => {
            let e = range_residual_pose(a, &Pose::from_translation(f.anchor), f.d)?;
            (
                DVector::from_element(1, e),
                DMatrix::identity(1, 1),
                f.w_r,
                f.loss,
            )
        }
        Factor::Smoothness(f) => {
            let r = a.translation - b()?.translation;
            (
                DVector::from_column_slice(r.as_slice()),
                DMatrix::identity(3, 3),
                f.w_s,
                f.loss,
            )
        }
        Factor::RelTranslation(f) => {
            let r = crate::factors::rel_translation_residual(&a.translation, &b()?.translation, f);
            (
                DVector::from_column_slice(r.as_slice()),
                dyn_w(f.weight.as_slice(), 3),
                1.0,
                f.loss,
            )
        }
        Factor::RelRotation(f) => {
            let r = rel_rotation_residual(&a.rotation, &b()?.rotation, f);
            (
                DVector::from_column_slice(r.as_slice()),
                dyn_w(f.weight.as_slice(), 3),
                1.0,
                f.loss,
            )
        }
        Factor::RelTransform(f) => {
            let r: PoseVector = rel_transform_residual(a, b()?, f);
            (
                DVector::from_column_slice(r.as_slice()),
                dyn_w(f.weight.as_slice(), 6),
                1.0,
                f.loss,
            )
        }
        Factor::PoseSmoothness(f) => {
            let r = pose_smoothness_residual(a, b()?, f);
            (
                DVector::from_column_slice(r.as_slice()),
                dyn_w(f.weight.as_slice(), 6),
                1.0,
                f.loss,
            )
        }
    })
}

fn perturbed(eps: &PoseVector, i: usize, h: f64) -> Pose {
    let mut e = *eps;
    e[i] += h;
    exp_se3(&e)
}

type Linear = (DVector<f64>, super::HessianApprox<6>);

fn linearize_pose(g: &FactorGraph<Pose>, v: &DVector<f64>) -> Result<Linear, SolverError> {
    let x = poses_from(v);
    let n = x.len();
    let mut grad = DVector::zeros(6 * n);
    let mut hb = HessianBuilder::<6>::new(n, g.is_chain());
    let eps_of = |k: usize| -> PoseVector { v.fixed_rows::<6>(6 * k).into_owned() };
    for edge in g.edges() {
        let (sa, sb) = g.edge_slots(edge)?;
        let resolve = |s: Slot<'_, Pose>| match s {
            Slot::Free(k) => (Some(k), x.blocks()[k]),
            Slot::Fixed(p) => (None, *p),
        };
        let (ia, pa) = resolve(sa);
        let second = sb.map(resolve);
        let pb = second.map(|s| s.1);
        let (r, w, c, loss) = match weighted_residual(&edge.factor, &pa, pb.as_ref()) {
            Ok(v) => v,
            Err(FactorError::SingularGeometry { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let d = r.len();
        // Jacobian columns for each free endpoint
        let mut jac: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(2);
        let endpoints = [(ia, true), (second.and_then(|s| s.0), false)];
        for (slot, first) in endpoints {
            let Some(k) = slot else { continue };
            let eps = eps_of(k);
            let mut j = DMatrix::zeros(d, 6);
            for i in 0..6 {
                let eval = |h: f64| -> Result<DVector<f64>, FactorError> {
                    let p = perturbed(&eps, i, h);
                    if first {
                        Ok(weighted_residual(&edge.factor, &p, pb.as_ref())?.0)
                    } else {
                        Ok(weighted_residual(&edge.factor, &pa, Some(&p))?.0)
                    }
                };
                let col = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
                j.set_column(i, &col);
            }
            jac.push((k, j));
        }
        let wr = &w * &r;
        let q = r.dot(&wr).max(0.0);
        let d1 = loss.of_squared(q).1;
        let scale = 2.0 * c * d1;
        for (k, j) in &jac {
            let gk = scale * j.transpose() * &wr;
            let mut view = grad.fixed_rows_mut::<6>(6 * k);
            view += gk;
        }
        for (ka, ja) in &jac {
            for (kb, jb) in &jac {
                if kb < ka {
                    continue;
                }
                let blk: SMatrix<f64, 6, 6> = (scale * ja.transpose() * &w * jb)
                    .fixed_view::<6, 6>(0, 0)
                    .into_owned();
                if ka == kb {
                    hb.add(*ka, *ka, &blk);
                } else {
                    hb.add(*ka, *kb, &blk);
                }
            }
        }
    }
    Ok((grad, hb.finish()))
}

/// Minimizes a pose graph in log coordinates starting from `x0`.
pub fn lm_minimize_pose(
    g: &FactorGraph<Pose>,
    x0: &StateVector<Pose>,
    cfg: &LmConfig,
) -> Result<(StateVector<Pose>, SolveReport), SolverError> {
    g.check_state(x0)?;
    let v0 = pose_coordinates(x0)?;
    let (v, report) = levenberg_marquardt::<6>(
        v0,
        cfg,
        |v| {
            let e = g.cost_detailed(&poses_from(v))?;
            Ok((e.cost, e.skipped))
        },
        |v| linearize_pose(g, v),
    )?;
    Ok((poses_from(&v), report))
}
