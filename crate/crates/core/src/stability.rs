//! Curvature diagnostics for the range-only window and the resulting error bound.

use crate::graph::{FactorGraph, StateVector};
use crate::pipeline::WindowProblem;
use crate::solver::{assemble_gradient, assemble_hessian, HessianApprox, HessianMode, SolverError};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERATIONS: usize = 200;
/// Rejection fraction above which sampling is declared failed.
pub const MAX_REJECTION_RATE: f64 = 0.999;
const CONTAIN_TOL: f64 = 1e-9;
/// Proposals per node before the whole chain is redrawn.
const NODE_RETRIES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("feasible-set sampling rejected {rejected} of {attempts} proposals")]
    SamplingFailure { rejected: usize, attempts: usize },
    #[error("alpha = {alpha} >= 1 at step {step}; the error bound is undefined")]
    BoundUndefined { step: usize, alpha: f64 },
    #[error("no stability reports to aggregate")]
    Empty,
    #[error("invalid stability input: {0}")]
    InvalidInput(&'static str),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Range balls `|t_i - a_i| <= d_i + eta` and steps `|t_i - t_{i-1}| <= step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSetSpec {
    pub anchors: Vec<Vector3<f64>>,
    pub ranges: Vec<f64>,
    pub eta: f64,
    /// `v_max * T` with `T` the largest time step in the window.
    pub step: f64,
}

impl FeasibleSetSpec {
    pub fn from_problem(p: &WindowProblem, eta: f64, v_max: f64) -> Self {
        Self {
            anchors: p.anchors.clone(),
            ranges: p.ranges.clone(),
            eta,
            step: v_max * p.max_dt(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn in_ball(&self, i: usize, t: &Vector3<f64>) -> bool {
        (t - self.anchors[i]).norm() <= self.ranges[i] + self.eta + CONTAIN_TOL
    }

    pub fn contains(&self, x: &StateVector<Vector3<f64>>) -> bool {
        let b = x.blocks();
        b.len() == self.len()
            && b.iter().enumerate().all(|(i, t)| self.in_ball(i, t))
            && b.windows(2)
                .all(|w| (w[1] - w[0]).norm() <= self.step + CONTAIN_TOL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBounds {
    pub delta_s: f64,
    pub delta_l: f64,
    pub samples_used: usize,
    pub rejected: usize,
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn dense_spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.amax()
}

/// Spectral norm of a symmetric operator by Lanczos iteration (power
/// iteration with Krylov acceleration) and full reorthogonalization.
pub fn power_spectral_norm(dim: usize, apply: impl Fn(&DVector<f64>) -> DVector<f64>) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    let mut q = DVector::from_fn(dim, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    q.normalize_mut();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let (mut diag, mut off) = (Vec::new(), Vec::new());
    let (mut est, mut settled) = (0.0, 0);
    for _ in 0..POWER_MAX_ITERATIONS.min(dim) {
        let mut w = apply(&q);
        let a = q.dot(&w);
        basis.push(q.clone());
        diag.push(a);
        for b in &basis {
            let c = b.dot(&w);
            w -= b * c;
        }
        let k = diag.len();
        let t = DMatrix::from_fn(k, k, |i, j| match i.abs_diff(j) {
            0 => diag[i],
            1 => off[i.min(j)],
            _ => 0.0,
        });
        let next = t.symmetric_eigen().eigenvalues.amax();
        let beta = w.norm();
        if beta <= 1e-14 * next.max(f64::MIN_POSITIVE) {
            return next;
        }
        settled = if (next - est).abs() <= POWER_TOL * next {
            settled + 1
        } else {
            0
        };
        est = next;
        if settled >= 2 {
            break;
        }
        off.push(beta);
        q = w / beta;
    }
    est
}

fn hessian_norm(
    g: &FactorGraph<Vector3<f64>>,
    x: &StateVector<Vector3<f64>>,
) -> Result<f64, StabilityError> {
    Ok(dense_spectral_norm(
        &assemble_hessian(g, x, HessianMode::Exact)?.to_dense(),
    ))
}

fn lerp(
    a: &StateVector<Vector3<f64>>,
    b: &StateVector<Vector3<f64>>,
    theta: f64,
) -> StateVector<Vector3<f64>> {
    StateVector::new(
        a.blocks()
            .iter()
            .zip(b.blocks())
            .map(|(p, q)| p * theta + q * (1.0 - theta))
            .collect(),
    )
}

fn in_unit_ball(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0));
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

/// One feasible point near `x_bar`: the first node within `N * step` of
/// `x_bar`, then increments within `step` that roughly follow `x_bar`.
fn propose(
    x_bar: &StateVector<Vector3<f64>>,
    spec: &FeasibleSetSpec,
    rng: &mut ChaCha8Rng,
    budget: &mut usize,
    rejected: &mut usize,
) -> Option<StateVector<Vector3<f64>>> {
    let xb = x_bar.blocks();
    let radius = spec.step * xb.len() as f64;
    'chain: loop {
        let mut out: Vec<Vector3<f64>> = Vec::with_capacity(xb.len());
        for i in 0..xb.len() {
            let mut tries = 0;
            loop {
                if *budget == 0 {
                    return None;
                }
                *budget -= 1;
                let t = match out.last() {
                    None => xb[0] + in_unit_ball(rng) * radius,
                    Some(prev) => {
                        // follow x_bar's direction, capped at half the step bound
                        let dx = xb[i] - xb[i - 1];
                        let n = dx.norm();
                        let drift = if n > 0.5 * spec.step {
                            dx * (0.5 * spec.step / n)
                        } else {
                            dx
                        };
                        prev + drift + in_unit_ball(rng) * (spec.step - drift.norm())
                    }
                };
                let step_ok = out
                    .last()
                    .is_none_or(|p| (t - p).norm() <= spec.step + CONTAIN_TOL);
                if step_ok && spec.in_ball(i, &t) {
                    out.push(t);
                    break;
                }
                *rejected += 1;
                tries += 1;
                if i > 0 && tries >= NODE_RETRIES {
                    continue 'chain;
                }
            }
        }
        return Some(StateVector::new(out));
    }
}

/// Monte-Carlo estimate of the smallest and largest Hessian norm over
/// `theta t + (1 - theta) x_bar` with `t` feasible. This is an inner
/// approximation of the true extremes. `x_bar` and every probe are included
/// at both segment ends.
pub fn estimate_delta_bounds(
    g: &FactorGraph<Vector3<f64>>,
    x_bar: &StateVector<Vector3<f64>>,
    spec: &FeasibleSetSpec,
    samples: usize,
    seed: u64,
    probes: &[StateVector<Vector3<f64>>],
) -> Result<DeltaBounds, StabilityError> {
    if samples == 0 {
        return Err(StabilityError::InvalidInput("samples must be positive"));
    }
    if spec.len() != x_bar.len() {
        return Err(StabilityError::InvalidInput(
            "feasible set and state sizes differ",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = hessian_norm(g, x_bar)?;
    let (mut lo, mut hi) = (base, base);
    let mut include = |v: f64| {
        lo = lo.min(v);
        hi = hi.max(v);
    };
    for p in probes {
        include(hessian_norm(g, p)?);
    }
    let attempts = samples * x_bar.len().max(1) * 1000;
    let mut budget = attempts;
    let mut rejected = 0;
    let mut used = 0;
    while used < samples {
        let Some(t) = propose(x_bar, spec, &mut rng, &mut budget, &mut rejected) else {
            break;
        };
        let theta: f64 = rng.random_range(0.0..=1.0);
        include(hessian_norm(g, &lerp(&t, x_bar, theta))?);
        if used == 0 {
            include(hessian_norm(g, &t)?);
        }
        used += 1;
    }
    let tried = attempts - budget;
    if used < samples || (tried > 0 && rejected as f64 / tried as f64 > MAX_REJECTION_RATE) {
        return Err(StabilityError::SamplingFailure {
            rejected,
            attempts: tried,
        });
    }
    Ok(DeltaBounds {
        delta_s: lo,
        delta_l: hi,
        samples_used: used,
        rejected,
    })
}

/// `mu = |B + lambda I|_2` and `alpha = max(|1 - delta_s/mu|, |1 - delta_l/mu|)`.
pub fn compute_alpha(delta_s: f64, delta_l: f64, b: &HessianApprox<3>, lambda: f64) -> (f64, f64) {
    let mu = power_spectral_norm(b.dim(), |v| b.mul_vec(v) + v * lambda);
    (mu, alpha_from(delta_s, delta_l, mu))
}

pub fn alpha_from(delta_s: f64, delta_l: f64, mu: f64) -> f64 {
    (1.0 - delta_s / mu).abs().max((1.0 - delta_l / mu).abs())
}

/// `beta / (1 - alpha) + alpha c / (1 - alpha)`, defined for `alpha < 1`.
pub fn asymptotic_bound(alpha: f64, beta: f64, c: f64) -> Option<f64> {
    (alpha < 1.0).then(|| beta / (1.0 - alpha) + alpha * c / (1.0 - alpha))
}

/// Bound after `m` steps from an initial window error `e0`.
pub fn finite_bound(alpha: f64, beta: f64, c: f64, e0: f64, m: usize) -> f64 {
    let am = alpha.powi(m as i32);
    let geometric = if (1.0 - alpha).abs() < 1e-15 {
        m as f64
    } else {
        (1.0 - am) / (1.0 - alpha)
    };
    am * e0 + beta * geometric + alpha * c * geometric
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub step: usize,
    pub t: f64,
    pub delta_s: f64,
    pub delta_l: f64,
    pub mu: f64,
    pub alpha: f64,
    /// `|grad F(truth)| / mu`; absent without ground truth.
    pub beta: Option<f64>,
    /// `(3N - 1) xi / mu`.
    pub beta_limit: f64,
    pub c: f64,
    pub lambda: f64,
    /// `beta/(1-alpha) + alpha c/(1-alpha)` with this step's values, falling
    /// back to `beta_limit` when `beta` is absent.
    pub bound: Option<f64>,
    pub samples_used: usize,
    /// Stacked window error against truth, when known.
    pub window_error: Option<f64>,
    /// The extremes are sampled, not proven.
    pub inner_approximation: bool,
}

impl StabilityReport {
    pub fn compliant(&self) -> bool {
        self.alpha < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub samples: usize,
    pub seed: u64,
    pub eta: f64,
    pub v_max: f64,
    pub xi: f64,
    /// Curvature used for `B`; should match the solver.
    pub hessian: HessianMode,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            eta: 0.2,
            v_max: 1.0,
            xi: 1.0,
            hessian: HessianMode::Exact,
        }
    }
}

/// Diagnoses one solved window; `truth` holds the true free-node translations.
pub fn diagnose_window(
    step: usize,
    p: &WindowProblem,
    truth: Option<&[Vector3<f64>]>,
    cfg: &StabilityConfig,
) -> Result<StabilityReport, StabilityError> {
    let n = p.initial.len();
    let spec = FeasibleSetSpec::from_problem(p, cfg.eta, cfg.v_max);
    let truth = match truth {
        Some(t) if t.len() != n => {
            return Err(StabilityError::InvalidInput(
                "truth length differs from window",
            ))
        }
        Some(t) => Some(StateVector::new(t.to_vec())),
        None => None,
    };
    let probes: Vec<_> = truth.iter().filter(|t| spec.contains(t)).cloned().collect();
    let d = estimate_delta_bounds(
        &p.graph,
        &p.initial,
        &spec,
        cfg.samples,
        cfg.seed.wrapping_add(step as u64),
        &probes,
    )?;
    let b = assemble_hessian(&p.graph, &p.initial, cfg.hessian)?;
    let lambda = p
        .report
        .first_accepted_lambda
        .or_else(|| p.report.lambdas.first().copied())
        .unwrap_or(0.0);
    let (mu, alpha) = compute_alpha(d.delta_s, d.delta_l, &b, lambda);
    let beta = match &truth {
        Some(t) => Some(assemble_gradient(&p.graph, t)?.norm() / mu),
        None => None,
    };
    let beta_limit = (3 * n - 1) as f64 * cfg.xi / mu;
    let c = n as f64 * cfg.v_max * p.max_dt();
    let window_error = truth.as_ref().map(|t| {
        p.estimate
            .blocks()
            .iter()
            .zip(t.blocks())
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    });
    Ok(StabilityReport {
        step,
        t: p.times.last().copied().unwrap_or(0.0),
        delta_s: d.delta_s,
        delta_l: d.delta_l,
        mu,
        alpha,
        beta,
        beta_limit,
        c,
        lambda,
        bound: asymptotic_bound(alpha, beta.unwrap_or(beta_limit), c),
        samples_used: d.samples_used,
        window_error,
        inner_approximation: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub asymptotic: f64,
    /// Bound after all aggregated steps, given the initial window error.
    pub finite: f64,
}

/// Aggregates per-step reports by taking the maxima of alpha, beta and c.
pub fn error_bound(
    reports: &[StabilityReport],
    initial_error: f64,
) -> Result<ErrorBound, StabilityError> {
    if reports.is_empty() {
        return Err(StabilityError::Empty);
    }
    if let Some(r) = reports.iter().find(|r| !r.compliant()) {
        return Err(StabilityError::BoundUndefined {
            step: r.step,
            alpha: r.alpha,
        });
    }
    let alpha = reports.iter().map(|r| r.alpha).fold(0.0, f64::max);
    let beta = reports
        .iter()
        .map(|r| r.beta.unwrap_or(r.beta_limit))
        .fold(0.0, f64::max);
    let c = reports.iter().map(|r| r.c).fold(0.0, f64::max);
    Ok(ErrorBound {
        alpha,
        beta,
        c,
        asymptotic: asymptotic_bound(alpha, beta, c).expect("alpha < 1 checked"),
        finite: finite_bound(alpha, beta, c, initial_error, reports.len()),
    })
}
