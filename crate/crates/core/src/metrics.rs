//! Accuracy metrics of an estimate stream against ground truth.

use crate::measurement::StampedPose;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CDF bin width in metres.
pub const CDF_BIN: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no estimate falls inside the truth time span")]
    EmptyOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfBin {
    /// Upper edge of the bin in metres.
    pub upper: f64,
    pub count: usize,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    #[serde(rename = "E_T")]
    pub e_t: f64,
    #[serde(rename = "E_RMSE")]
    pub e_rmse: f64,
    /// Mean Frobenius norm of `R_est R_true^T - I`; only when both carry rotations.
    #[serde(rename = "E_O")]
    pub e_o: Option<f64>,
    /// Mean absolute error per axis.
    pub axis_mean: [f64; 3],
    pub cdf: Vec<CdfBin>,
    pub rejections: usize,
    pub mean_solve_time: Option<f64>,
}

/// Pairs every estimate inside the truth span with the truth sample nearest in time.
pub fn align<'a>(
    estimates: &'a [StampedPose],
    truth: &'a [StampedPose],
) -> Vec<(&'a StampedPose, &'a StampedPose)> {
    let (Some(first), Some(last)) = (truth.first(), truth.last()) else {
        return Vec::new();
    };
    estimates
        .iter()
        .filter(|e| e.t >= first.t - 1e-9 && e.t <= last.t + 1e-9)
        .map(|e| {
            let i = truth.partition_point(|s| s.t < e.t);
            let pick = if i == 0 {
                0
            } else if i == truth.len() || e.t - truth[i - 1].t <= truth[i].t - e.t {
                i - 1
            } else {
                i
            };
            (e, &truth[pick])
        })
        .collect()
}

pub fn rotation_error(est: &crate::lie::Rotation, truth: &crate::lie::Rotation) -> f64 {
    (est.matrix() * truth.matrix().transpose() - Matrix3::identity()).norm()
}

pub fn compute_metrics(
    estimates: &[StampedPose],
    truth: &[StampedPose],
) -> Result<MetricsReport, MetricsError> {
    let pairs = align(estimates, truth);
    if pairs.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    let errs: Vec<Vector3<f64>> = pairs.iter().map(|(e, t)| e.position - t.position).collect();
    let k = errs.len() as f64;
    let norms: Vec<f64> = errs.iter().map(|e| e.norm()).collect();
    let e_t = norms.iter().sum::<f64>() / k;
    let e_rmse = (norms.iter().map(|n| n * n).sum::<f64>() / k).sqrt();
    let axis = errs.iter().map(|e| e.abs()).sum::<Vector3<f64>>() / k;
    let rot: Vec<f64> = pairs
        .iter()
        .filter_map(|(e, t)| Some(rotation_error(e.rotation.as_ref()?, t.rotation.as_ref()?)))
        .collect();
    let e_o = (!rot.is_empty()).then(|| rot.iter().sum::<f64>() / rot.len() as f64);
    Ok(MetricsReport {
        count: errs.len(),
        e_t,
        e_rmse,
        e_o,
        axis_mean: [axis.x, axis.y, axis.z],
        cdf: cdf(&norms),
        rejections: 0,
        mean_solve_time: None,
    })
}

/// Histogram of errors in 1 cm bins with the running fraction.
pub fn cdf(errors: &[f64]) -> Vec<CdfBin> {
    if errors.is_empty() {
        return Vec::new();
    }
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let bins = ((max / CDF_BIN).floor() as usize) + 1;
    let mut counts = vec![0usize; bins];
    for e in errors {
        counts[((e / CDF_BIN).floor() as usize).min(bins - 1)] += 1;
    }
    let mut acc = 0;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            acc += count;
            CdfBin {
                upper: (i + 1) as f64 * CDF_BIN,
                count,
                cumulative: acc as f64 / errors.len() as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{exp_so3, Rotation};

    fn pose(t: f64, p: [f64; 3]) -> StampedPose {
        StampedPose {
            t,
            position: Vector3::from(p),
            rotation: None,
        }
    }

    #[test]
    fn identical_streams_are_zero() {
        let truth: Vec<_> = (0..10)
            .map(|i| StampedPose {
                rotation: Some(Rotation::about_z(i as f64)),
                ..pose(i as f64, [i as f64, 1.0, 2.0])
            })
            .collect();
        let m = compute_metrics(&truth, &truth).unwrap();
        assert_eq!((m.e_t, m.e_rmse), (0.0, 0.0));
        assert!(m.e_o.unwrap() < 1e-14);
    }

    #[test]
    fn hand_values() {
        let m = compute_metrics(&[pose(0.0, [0.03, 0.04, 0.0])], &[pose(0.0, [0.0; 3])]).unwrap();
        assert!((m.e_t - 0.05).abs() < 1e-15 && (m.e_rmse - 0.05).abs() < 1e-15);
        let m = compute_metrics(
            &[pose(0.0, [0.1, 0.0, 0.0]), pose(1.0, [0.0, 0.3, 0.0])],
            &[pose(0.0, [0.0; 3]), pose(1.0, [0.0; 3])],
        )
        .unwrap();
        assert!((m.e_t - 0.2).abs() < 1e-15);
        assert!((m.e_rmse - 0.05f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.axis_mean, [0.05, 0.15, 0.0]);
    }

    #[test]
    fn spreadsheet_fixture() {
        // ten samples worked by hand: errors are 3-4-5 multiples and unit axes
        let offs = [
            [0.03, 0.04, 0.0],
            [0.0, 0.0, 0.02],
            [0.06, 0.08, 0.0],
            [0.01, 0.0, 0.0],
            [0.0, 0.05, 0.0],
            [0.0, 0.0, 0.0],
            [0.09, 0.12, 0.0],
            [0.0, 0.0, 0.1],
            [0.02, 0.0, 0.0],
            [0.0, 0.03, 0.04],
        ];
        let est: Vec<_> = offs
            .iter()
            .enumerate()
            .map(|(i, o)| pose(i as f64, *o))
            .collect();
        let truth: Vec<_> = (0..10).map(|i| pose(i as f64, [0.0; 3])).collect();
        let m = compute_metrics(&est, &truth).unwrap();
        let norms = [0.05, 0.02, 0.1, 0.01, 0.05, 0.0, 0.15, 0.1, 0.02, 0.05];
        let e_t: f64 = norms.iter().sum::<f64>() / 10.0;
        let e_rmse = (norms.iter().map(|n| n * n).sum::<f64>() / 10.0).sqrt();
        assert!((m.e_t - 0.055).abs() < 1e-12 && (m.e_t - e_t).abs() < 1e-12);
        assert!((m.e_rmse - e_rmse).abs() < 1e-12);
        assert!(m.e_t <= m.e_rmse);
        assert_eq!(m.cdf.iter().map(|b| b.count).sum::<usize>(), 10);
        assert_eq!(m.cdf.last().unwrap().cumulative, 1.0);
        assert!(m.cdf.windows(2).all(|w| w[0].cumulative <= w[1].cumulative));
    }

    #[test]
    fn nearest_truth_alignment() {
        let truth = vec![pose(0.0, [0.0; 3]), pose(1.0, [1.0, 0.0, 0.0])];
        let m =
            compute_metrics(&[pose(0.4, [0.0; 3]), pose(0.6, [1.0, 0.0, 0.0])], &truth).unwrap();
        assert_eq!(m.e_t, 0.0);
        assert_eq!(
            compute_metrics(&[pose(5.0, [0.0; 3])], &truth),
            Err(MetricsError::EmptyOverlap)
        );
    }

    #[test]
    fn rotation_error_small_angle() {
        let a = exp_so3(&Vector3::new(0.0, 0.0, 0.001));
        // Frobenius norm of a small rotation minus identity is about sqrt(2) theta
        assert!((rotation_error(&a, &Rotation::identity()) - 2f64.sqrt() * 0.001).abs() < 1e-9);
    }
}
