//! Levenberg-Marquardt minimization of window costs.
//!
//! Translation windows use the analytic gradient and Hessian; pose windows
//! are optimized in global log coordinates (one `se(3)` vector per node,
//! mapped back through `exp`).

mod assemble;
mod blocktri;
mod pose;

pub use assemble::{assemble_gradient, assemble_hessian, linearize, Linearization};
pub use blocktri::{BlockCholesky, BlockTridiagonal};
pub use pose::{lm_minimize_pose, pose_coordinates, BRANCH_MARGIN};

use crate::factors::FactorError;
use crate::graph::{FactorGraph, GraphError, StateVector};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

pub const LAMBDA_MIN: f64 = 1e-12;
pub const LAMBDA_MAX: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("damped Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error(
        "node {node} rotation angle {angle:.6} rad is at the log branch cut; re-anchor the window"
    )]
    BranchCut { node: usize, angle: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<FactorError> for SolverError {
    fn from(e: FactorError) -> Self {
        SolverError::Graph(GraphError::Factor(e))
    }
}

/// Which curvature the solver uses for `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    /// The full analytic Hessian; may be indefinite, damping restores definiteness.
    #[default]
    Exact,
    /// Drops the range-curvature and negative robust terms; always PSD.
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub cost_threshold: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub min_step_norm: f64,
    pub hessian: HessianMode,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            cost_threshold: 1e-10,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.3,
            min_step_norm: 1e-10,
            hessian: HessianMode::Exact,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidConfig(
                "max_iterations must be positive",
            ));
        }
        if !(self.cost_threshold >= 0.0) {
            return Err(SolverError::InvalidConfig(
                "cost_threshold must be non-negative",
            ));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(SolverError::InvalidConfig("lambda_init must be positive"));
        }
        if !(self.lambda_up > 1.0 && self.lambda_up.is_finite()) {
            return Err(SolverError::InvalidConfig("lambda_up must exceed 1"));
        }
        if !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(SolverError::InvalidConfig("lambda_down must lie in (0, 1)"));
        }
        if !(self.min_step_norm >= 0.0) {
            return Err(SolverError::InvalidConfig(
                "min_step_norm must be non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    CostThreshold,
    SmallStep,
    MaxIterations,
    /// Damping reached its ceiling without finding a descent step.
    LambdaLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Outer iterations started.
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub gradient_norm: f64,
    /// Damping value of every linear solve attempted, in order.
    pub lambdas: Vec<f64>,
    /// Damping of the first accepted step.
    pub first_accepted_lambda: Option<f64>,
    pub converged: bool,
    pub termination: Termination,
    pub wall_time: f64,
    /// Seconds spent in each outer iteration.
    pub iteration_times: Vec<f64>,
    /// Factors skipped at singular geometry in the final evaluation.
    pub skipped_factors: usize,
}

/// Hessian approximation over the window state.
#[derive(Debug, Clone, PartialEq)]
pub enum HessianApprox<const B: usize> {
    Tridiagonal(BlockTridiagonal<B>),
    /// Used when the graph is not a chain.
    Dense(DMatrix<f64>),
}

impl<const B: usize> HessianApprox<B> {
    pub fn dim(&self) -> usize {
        match self {
            HessianApprox::Tridiagonal(m) => m.dim(),
            HessianApprox::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            HessianApprox::Tridiagonal(m) => m.to_dense(),
            HessianApprox::Dense(m) => m.clone(),
        }
    }

    pub fn structural_nonzeros(&self) -> usize {
        match self {
            HessianApprox::Tridiagonal(m) => m.structural_nonzeros(),
            HessianApprox::Dense(m) => m.nrows() * m.ncols(),
        }
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            HessianApprox::Tridiagonal(m) => m.mul_vec(v),
            HessianApprox::Dense(m) => m * v,
        }
    }
}

/// Accumulates Hessian blocks into the tridiagonal or the dense layout.
pub(crate) enum HessianBuilder<const B: usize> {
    Tri(BlockTridiagonal<B>),
    Dense(DMatrix<f64>),
}

impl<const B: usize> HessianBuilder<B> {
    pub(crate) fn new(blocks: usize, chain: bool) -> Self {
        if chain {
            HessianBuilder::Tri(BlockTridiagonal::zeros(blocks))
        } else {
            HessianBuilder::Dense(DMatrix::zeros(B * blocks, B * blocks))
        }
    }

    /// Adds `m` at block `(i, j)` and its transpose at `(j, i)`.
    pub(crate) fn add(&mut self, i: usize, j: usize, m: &nalgebra::SMatrix<f64, B, B>) {
        match self {
            HessianBuilder::Tri(t) => t.add_block(i, j, m),
            HessianBuilder::Dense(d) => {
                let mut v = d.fixed_view_mut::<B, B>(B * i, B * j);
                v += m;
                if i != j {
                    let mut v = d.fixed_view_mut::<B, B>(B * j, B * i);
                    v += m.transpose();
                }
            }
        }
    }

    pub(crate) fn finish(self) -> HessianApprox<B> {
        match self {
            HessianBuilder::Tri(t) => HessianApprox::Tridiagonal(t),
            HessianBuilder::Dense(d) => HessianApprox::Dense(d),
        }
    }
}

/// Solves `(B + lambda I) delta = rhs`.
pub fn sparse_solve<const B: usize>(
    b: &HessianApprox<B>,
    lambda: f64,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>, SolverError> {
    match b {
        HessianApprox::Tridiagonal(m) => m
            .damped(lambda)
            .cholesky()
            .map(|c| c.solve(rhs))
            .ok_or(SolverError::NotPositiveDefinite),
        HessianApprox::Dense(m) => {
            let damped = m + DMatrix::identity(m.nrows(), m.ncols()) * lambda;
            damped
                .cholesky()
                .map(|c| c.solve(rhs))
                .ok_or(SolverError::NotPositiveDefinite)
        }
    }
}

/// Shared damped iteration over a flat parameter vector. `cost` returns the
/// value and the number of skipped factors; `linearize` returns the gradient
/// and the curvature at a point.
pub(crate) fn levenberg_marquardt<const B: usize>(
    v0: DVector<f64>,
    cfg: &LmConfig,
    mut cost: impl FnMut(&DVector<f64>) -> Result<(f64, usize), SolverError>,
    mut linearize: impl FnMut(&DVector<f64>) -> Result<(DVector<f64>, HessianApprox<B>), SolverError>,
) -> Result<(DVector<f64>, SolveReport), SolverError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut v = v0;
    let (mut f, mut skipped) = cost(&v)?;
    let mut report = SolveReport {
        iterations: 0,
        accepted_steps: 0,
        initial_cost: f,
        final_cost: f,
        gradient_norm: f64::NAN,
        lambdas: Vec::new(),
        first_accepted_lambda: None,
        converged: false,
        termination: Termination::MaxIterations,
        wall_time: 0.0,
        iteration_times: Vec::new(),
        skipped_factors: skipped,
    };
    let mut lambda = cfg.lambda_init.clamp(LAMBDA_MIN, LAMBDA_MAX);
    let mut gradient_fresh = false;

    for _ in 0..cfg.max_iterations {
        if f < cfg.cost_threshold {
            report.converged = true;
            report.termination = Termination::CostThreshold;
            break;
        }
        let iter_start = Instant::now();
        report.iterations += 1;
        let (g, b) = linearize(&v)?;
        report.gradient_norm = g.norm();
        let rhs = -&g;
        let mut accepted = None;
        loop {
            report.lambdas.push(lambda);
            match sparse_solve(&b, lambda, &rhs) {
                Ok(step) => {
                    let candidate = &v + &step;
                    let (f_new, sk) = cost(&candidate)?;
                    if f_new <= f && f_new.is_finite() {
                        accepted = Some((candidate, step.norm(), f_new, sk));
                        break;
                    }
                }
                Err(SolverError::NotPositiveDefinite) => {}
                Err(e) => return Err(e),
            }
            if lambda >= LAMBDA_MAX {
                break;
            }
            lambda = (lambda * cfg.lambda_up).min(LAMBDA_MAX);
        }
        report
            .iteration_times
            .push(iter_start.elapsed().as_secs_f64());
        match accepted {
            Some((candidate, step_norm, f_new, sk)) => {
                report.first_accepted_lambda.get_or_insert(lambda);
                report.accepted_steps += 1;
                v = candidate;
                f = f_new;
                skipped = sk;
                gradient_fresh = false;
                lambda = (lambda * cfg.lambda_down).max(LAMBDA_MIN);
                if step_norm < cfg.min_step_norm {
                    report.converged = true;
                    report.termination = Termination::SmallStep;
                    break;
                }
            }
            None => {
                gradient_fresh = true;
                report.termination = Termination::LambdaLimit;
                break;
            }
        }
    }
    if f < cfg.cost_threshold && !report.converged {
        report.converged = true;
        report.termination = Termination::CostThreshold;
    }
    if !gradient_fresh {
        if let Ok((g, _)) = linearize(&v) {
            report.gradient_norm = g.norm();
        }
    }
    report.final_cost = f;
    report.skipped_factors = skipped;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((v, report))
}

/// Minimizes the cost of a translation graph starting from `x0`.
pub fn lm_minimize(
    g: &FactorGraph<Vector3<f64>>,
    x0: &StateVector<Vector3<f64>>,
    cfg: &LmConfig,
) -> Result<(StateVector<Vector3<f64>>, SolveReport), SolverError> {
    let v0 = x0.to_dvector();
    // validates dimensions before the loop
    g.check_state(x0)?;
    let (v, report) = levenberg_marquardt::<3>(
        v0,
        cfg,
        |v| {
            let e = g.cost_detailed(&StateVector::from_dvector(v))?;
            Ok((e.cost, e.skipped))
        },
        |v| {
            let lin = linearize(g, &StateVector::from_dvector(v), cfg.hessian)?;
            Ok((lin.gradient, lin.hessian))
        },
    )?;
    Ok((StateVector::from_dvector(&v), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{RangeFactor, RobustLoss, SmoothnessFactor};
    use crate::graph::{EdgeNodes, Factor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchors() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(3.0, 3.0, 1.95),
            Vector3::new(3.0, -3.0, 0.53),
            Vector3::new(-3.0, 3.0, 0.54),
            Vector3::new(-3.0, -3.0, 1.98),
        ]
    }

    /// Noiseless window on a circle at `speed` m/s with a fixed prior at the true position.
    fn window(n: usize, speed: f64) -> (FactorGraph<Vector3<f64>>, Vec<Vector3<f64>>) {
        let f = 32.46;
        let iota = 1.0;
        let loss = RobustLoss::default();
        let truth: Vec<_> = (0..=n)
            .map(|k| {
                let a = 0.5 * speed * k as f64 / f;
                Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 1.0)
            })
            .collect();
        let mut g = FactorGraph::new();
        g.add_fixed_node(0, truth[0]).unwrap();
        for k in 1..=n {
            g.add_node(k, truth[k]).unwrap();
            let a = anchors()[k % 4];
            let d = (truth[k] - a).norm();
            let rf = RangeFactor::from_noise_bound(d, a, 0.0, iota, loss).unwrap();
            g.add_factor(EdgeNodes::Unary(k), Factor::Range(rf))
                .unwrap();
            let sf = SmoothnessFactor::new(1.0 / f, 1.0, iota, loss).unwrap();
            g.add_factor(EdgeNodes::Binary(k, k - 1), Factor::Smoothness(sf))
                .unwrap();
        }
        (g, truth[1..].to_vec())
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::default().validate().is_ok());
        let bad = LmConfig {
            lambda_up: 1.0,
            ..LmConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LmConfig {
            lambda_down: 1.0,
            ..LmConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_b_gives_negative_gradient() {
        let b = HessianApprox::Tridiagonal(BlockTridiagonal::<3>::zeros(4));
        let g = DVector::from_fn(12, |i, _| i as f64 - 5.0);
        let step = sparse_solve(&b, 1.0, &(-&g)).unwrap();
        assert!((step + g).norm() < 1e-15);
    }

    #[test]
    fn zero_cost_start_is_returned() {
        let loss = RobustLoss::default();
        let mut g = FactorGraph::new();
        let t = Vector3::new(1.0, 2.0, 0.5);
        g.add_node(0, t).unwrap();
        for a in anchors() {
            let f = RangeFactor::new((t - a).norm(), a, 1.0, loss).unwrap();
            g.add_factor(EdgeNodes::Unary(0), Factor::Range(f)).unwrap();
        }
        let (x, rep) = lm_minimize(&g, &g.initial_state(), &LmConfig::default()).unwrap();
        assert_eq!(x.blocks()[0], t);
        assert_eq!(rep.accepted_steps, 0);
        assert!(rep.converged);
    }

    #[test]
    fn recovers_truth_from_perturbed_start() {
        // a static robot makes the truth the exact minimum
        let (g, truth) = window(10, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x0 = StateVector::new(
            truth
                .iter()
                .map(|t| {
                    let d = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    t + d.normalize() * 0.1
                })
                .collect(),
        );
        let (x, rep) = lm_minimize(&g, &x0, &LmConfig::default()).unwrap();
        assert!(rep.iterations <= 10);
        assert!(rep.final_cost <= rep.initial_cost);
        for (e, t) in x.blocks().iter().zip(&truth) {
            assert!((e - t).norm() < 1e-4, "err {}", (e - t).norm());
        }
    }

    #[test]
    fn accepted_costs_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let (g, truth) = window(6, 0.5);
            let x0 = StateVector::new(
                truth
                    .iter()
                    .map(|t| {
                        t + Vector3::new(
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-1.0..1.0),
                        )
                    })
                    .collect(),
            );
            let (x, rep) = lm_minimize(&g, &x0, &LmConfig::default()).unwrap();
            assert!(rep.final_cost <= rep.initial_cost);
            assert!(g.total_cost(&x).unwrap() <= g.total_cost(&x0).unwrap());
            assert_eq!(rep.iteration_times.len(), rep.iterations);
        }
    }

    #[test]
    fn gauss_newton_mode_converges() {
        let (g, truth) = window(10, 0.0);
        let x0 = StateVector::new(
            truth
                .iter()
                .map(|t| t + Vector3::new(0.05, -0.05, 0.02))
                .collect(),
        );
        let cfg = LmConfig {
            hessian: HessianMode::GaussNewton,
            max_iterations: 30,
            ..LmConfig::default()
        };
        let (x, rep) = lm_minimize(&g, &x0, &cfg).unwrap();
        assert!(rep.final_cost < rep.initial_cost);
        assert!((x.last().unwrap() - truth.last().unwrap()).norm() < 1e-4);
    }
}
