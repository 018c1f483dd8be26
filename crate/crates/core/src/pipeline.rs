//! The online sliding-window estimator.

use crate::factors::{
    range_variance, weight_from_variance, FactorError, PoseSmoothnessFactor, RangeFactor,
    RobustLoss, SmoothnessFactor,
};
use crate::graph::{EdgeNodes, Factor, FactorGraph, GraphError, StateVector};
use crate::lie::{Pose, Rotation};
use crate::measurement::{AnchorId, OrientationMeasurement, RangeMeasurement, StampedPose};
use crate::sim::{max_tetrahedron_volume, AnchorSet, COPLANAR_VOLUME_TOL};
use crate::solver::{lm_minimize, lm_minimize_pose, LmConfig, SolveReport, SolverError};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("measurement at t={t} does not follow t={previous}")]
    OutOfOrder { previous: f64, t: f64 },
    #[error("unknown anchor {0}")]
    UnknownAnchor(AnchorId),
    #[error("range-orientation mode needs an orientation sample with every range")]
    MissingOrientation,
    #[error("orientation stream is empty")]
    EmptyOrientationStream,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Factor(#[from] FactorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    #[default]
    RangeOnly,
    #[serde(alias = "fused")]
    RangeOrientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Window length N.
    pub window: usize,
    pub v_max: f64,
    /// Range noise bound.
    pub eta: f64,
    /// Range rate in Hz, used by the outlier gate.
    pub f: f64,
    /// Gate multiplier and restart threshold.
    pub gamma: f64,
    /// Overrides `gamma` in the gate only.
    pub gate_gamma: Option<f64>,
    /// Overrides `gamma` as the consecutive-rejection limit.
    pub restart_gamma: Option<f64>,
    pub iota: f64,
    pub xi: f64,
    pub lm: LmConfig,
    /// Solver settings for the bootstrap solve from a random guess.
    pub bootstrap_lm: LmConfig,
    pub mode: EstimatorMode,
    /// Orientation sensor noise, radians; sets the rotation weight.
    pub sigma_o: f64,
    /// Seeds the bootstrap guess.
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: 10,
            v_max: 1.0,
            eta: 0.2,
            f: 32.46,
            gamma: 3.0,
            gate_gamma: None,
            restart_gamma: None,
            iota: 1.0,
            xi: 1.0,
            lm: LmConfig::default(),
            bootstrap_lm: LmConfig {
                max_iterations: 100,
                ..LmConfig::default()
            },
            mode: EstimatorMode::RangeOnly,
            sigma_o: 0.01,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.window == 0 {
            return Err(PipelineError::InvalidConfig("window must be positive"));
        }
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(PipelineError::InvalidConfig("f must be positive"));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(PipelineError::InvalidConfig("v_max must be positive"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(PipelineError::InvalidConfig("eta must be non-negative"));
        }
        if !(self.gamma >= 1.0) || self.gate_gamma.is_some_and(|g| !(g > 0.0)) {
            return Err(PipelineError::InvalidConfig("gamma must be at least 1"));
        }
        if self.restart_gamma.is_some_and(|g| !(g >= 1.0)) {
            return Err(PipelineError::InvalidConfig(
                "restart_gamma must be at least 1",
            ));
        }
        if !(self.iota > 0.0 && self.iota.is_finite()) {
            return Err(PipelineError::InvalidConfig("iota must be positive"));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(PipelineError::InvalidConfig("xi must be positive"));
        }
        if !(self.sigma_o >= 0.0 && self.sigma_o.is_finite()) {
            return Err(PipelineError::InvalidConfig("sigma_o must be non-negative"));
        }
        self.lm.validate()?;
        self.bootstrap_lm.validate()?;
        Ok(())
    }

    /// Gate half-width `gamma * v_max / f`.
    pub fn gate_threshold(&self) -> f64 {
        self.gate_gamma.unwrap_or(self.gamma) * self.v_max / self.f
    }

    pub fn restart_limit(&self) -> f64 {
        self.restart_gamma.unwrap_or(self.gamma)
    }
}

/// True if `d` disagrees with the range predicted from `estimate` by more than the gate.
pub fn is_outlier(
    estimate: &Vector3<f64>,
    anchor: &Vector3<f64>,
    d: f64,
    cfg: &EstimatorConfig,
) -> bool {
    ((estimate - anchor).norm() - d).abs() > cfg.gate_threshold()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Warning {
    /// The bootstrap window did not see four non-coplanar anchors.
    InsufficientGeometry {
        distinct_anchors: usize,
        volume: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub estimate: StampedPose,
    pub report: SolveReport,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Update {
    Buffering {
        buffered: usize,
        needed: usize,
    },
    Bootstrapped(StepOutput),
    Accepted(StepOutput),
    Rejected {
        consecutive: usize,
    },
    /// Too many consecutive rejections; the window was cleared.
    RestartRequired {
        consecutive: usize,
    },
}

impl Update {
    pub fn output(&self) -> Option<&StepOutput> {
        match self {
            Update::Bootstrapped(o) | Update::Accepted(o) => Some(o),
            _ => None,
        }
    }

    pub fn estimate(&self) -> Option<&StampedPose> {
        self.output().map(|o| &o.estimate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    t: f64,
    anchor: Vector3<f64>,
    d: f64,
    orientation: Option<Rotation>,
    state: Pose,
}

/// The translation-mode window solved at the latest step.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowProblem {
    /// Free nodes are `1..=N`; node 0 is the fixed prior when present.
    pub graph: FactorGraph<Vector3<f64>>,
    /// Linearization point: the warm-started initial guess.
    pub initial: StateVector<Vector3<f64>>,
    pub estimate: StateVector<Vector3<f64>>,
    pub times: Vec<f64>,
    pub anchors: Vec<Vector3<f64>>,
    pub ranges: Vec<f64>,
    pub prior: Option<(f64, Vector3<f64>)>,
    pub report: SolveReport,
}

impl WindowProblem {
    /// Largest time step in the window, including the step from the prior.
    pub fn max_dt(&self) -> f64 {
        let mut ts: Vec<f64> = self.prior.iter().map(|p| p.0).collect();
        ts.extend_from_slice(&self.times);
        ts.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub received: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub restarts: usize,
    pub bootstraps: usize,
}

/// Single-stream estimator; feed measurements in time order.
#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: EstimatorConfig,
    anchors: AnchorSet,
    loss: RobustLoss,
    rng: ChaCha8Rng,
    window: VecDeque<Node>,
    prior: Option<Node>,
    bootstrapped: bool,
    k_c: usize,
    last_t: Option<f64>,
    latest: Option<StampedPose>,
    problem: Option<WindowProblem>,
    stats: EstimatorStats,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, anchors: AnchorSet) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            loss: RobustLoss::new(cfg.xi)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            anchors,
            window: VecDeque::new(),
            prior: None,
            bootstrapped: false,
            k_c: 1,
            last_t: None,
            latest: None,
            problem: None,
            stats: EstimatorStats::default(),
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn stats(&self) -> EstimatorStats {
        self.stats
    }

    /// Latest emitted estimate.
    pub fn latest(&self) -> Option<&StampedPose> {
        self.latest.as_ref()
    }

    pub fn consecutive_rejections(&self) -> usize {
        self.k_c - 1
    }

    pub fn is_bootstrapped(&self) -> bool {
        self.bootstrapped
    }

    /// Number of states currently held in the window or bootstrap buffer.
    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Window problem of the latest solve in range-only mode.
    pub fn last_problem(&self) -> Option<&WindowProblem> {
        self.problem.as_ref()
    }

    pub fn process_range(&mut self, m: &RangeMeasurement) -> Result<Update, PipelineError> {
        if self.cfg.mode == EstimatorMode::RangeOrientation {
            return Err(PipelineError::MissingOrientation);
        }
        self.process(m, None)
    }

    pub fn process_range_orientation(
        &mut self,
        m: &RangeMeasurement,
        o: &OrientationMeasurement,
    ) -> Result<Update, PipelineError> {
        self.process(m, Some(o.rotation))
    }

    fn process(
        &mut self,
        m: &RangeMeasurement,
        orientation: Option<Rotation>,
    ) -> Result<Update, PipelineError> {
        if let Some(prev) = self.last_t {
            if !(m.t > prev) {
                return Err(PipelineError::OutOfOrder {
                    previous: prev,
                    t: m.t,
                });
            }
        }
        if !m.t.is_finite() || !m.d.is_finite() {
            return Err(PipelineError::InvalidConfig("non-finite measurement"));
        }
        let anchor = self
            .anchors
            .position(m.anchor)
            .ok_or(PipelineError::UnknownAnchor(m.anchor))?;
        self.last_t = Some(m.t);
        self.stats.received += 1;
        let fused = self.cfg.mode == EstimatorMode::RangeOrientation;
        let orientation = if fused {
            Some(orientation.ok_or(PipelineError::MissingOrientation)?)
        } else {
            None
        };

        if !self.bootstrapped {
            self.window.push_back(Node {
                t: m.t,
                anchor,
                d: m.d,
                orientation,
                state: Pose::from_rotation(orientation.unwrap_or_default()),
            });
            if self.window.len() < self.cfg.window {
                return Ok(Update::Buffering {
                    buffered: self.window.len(),
                    needed: self.cfg.window,
                });
            }
            return self.bootstrap().map(Update::Bootstrapped);
        }

        let newest = self
            .window
            .back()
            .expect("bootstrapped window is full")
            .state;
        if is_outlier(&newest.translation, &anchor, m.d, &self.cfg) {
            self.stats.rejected += 1;
            self.k_c += 1;
            if self.k_c as f64 > self.cfg.restart_limit() {
                let consecutive = self.k_c - 1;
                self.restart();
                return Ok(Update::RestartRequired { consecutive });
            }
            return Ok(Update::Rejected {
                consecutive: self.k_c - 1,
            });
        }

        let initial_rotation = orientation.unwrap_or(newest.rotation);
        let mut window = self.window.clone();
        let mut prior = self.prior;
        window.push_back(Node {
            t: m.t,
            anchor,
            d: m.d,
            orientation,
            state: Pose::new(initial_rotation, newest.translation),
        });
        if window.len() > self.cfg.window {
            prior = window.pop_front();
        }
        let out = self.solve(window, prior, &self.cfg.lm.clone(), Vec::new())?;
        self.stats.accepted += 1;
        self.k_c = 1;
        Ok(Update::Accepted(out))
    }

    fn bootstrap(&mut self) -> Result<StepOutput, PipelineError> {
        let mut warnings = Vec::new();
        let mut distinct: Vec<Vector3<f64>> = Vec::new();
        for n in &self.window {
            if !distinct.contains(&n.anchor) {
                distinct.push(n.anchor);
            }
        }
        let volume = max_tetrahedron_volume(&distinct);
        if distinct.len() < 4 || volume <= COPLANAR_VOLUME_TOL {
            log::warn!(
                "bootstrap window sees {} distinct anchors, best tetrahedron volume {volume:.3e}",
                distinct.len()
            );
            warnings.push(Warning::InsufficientGeometry {
                distinct_anchors: distinct.len(),
                volume,
            });
        }
        let (lo, hi) = self.anchors.bounding_box();
        let guess = Vector3::from_fn(|i, _| {
            if hi[i] > lo[i] {
                self.rng.random_range(lo[i]..hi[i])
            } else {
                lo[i]
            }
        });
        let mut window = std::mem::take(&mut self.window);
        for n in window.iter_mut() {
            n.state.translation = guess;
        }
        if self.cfg.mode == EstimatorMode::RangeOrientation {
            // Rotations only enter through relative terms, so a pose solve from a
            // distant translation guess drags them away from the sensor readings.
            let (graph, initial) = self.translation_graph(&window, None)?;
            let (x, _) = lm_minimize(&graph, &initial, &self.cfg.bootstrap_lm)?;
            for (n, t) in window.iter_mut().zip(x.blocks()) {
                n.state.translation = *t;
            }
        }
        let out = self.solve(window, None, &self.cfg.bootstrap_lm.clone(), warnings)?;
        self.bootstrapped = true;
        self.k_c = 1;
        self.stats.bootstraps += 1;
        self.stats.accepted += 1;
        Ok(out)
    }

    fn restart(&mut self) {
        self.window.clear();
        self.prior = None;
        self.bootstrapped = false;
        self.k_c = 1;
        self.problem = None;
        self.stats.restarts += 1;
    }

    fn solve(
        &mut self,
        mut window: VecDeque<Node>,
        prior: Option<Node>,
        lm: &LmConfig,
        warnings: Vec<Warning>,
    ) -> Result<StepOutput, PipelineError> {
        let report = match self.cfg.mode {
            EstimatorMode::RangeOnly => {
                let (graph, initial) = self.translation_graph(&window, prior.as_ref())?;
                let (x, report) = lm_minimize(&graph, &initial, lm)?;
                for (n, t) in window.iter_mut().zip(x.blocks()) {
                    n.state.translation = *t;
                }
                self.problem = Some(WindowProblem {
                    graph,
                    initial,
                    estimate: x,
                    times: window.iter().map(|n| n.t).collect(),
                    anchors: window.iter().map(|n| n.anchor).collect(),
                    ranges: window.iter().map(|n| n.d).collect(),
                    prior: prior.map(|p| (p.t, p.state.translation)),
                    report: report.clone(),
                });
                report
            }
            EstimatorMode::RangeOrientation => {
                // Solve in a frame aligned with the newest orientation reading so
                // the window's rotations stay far from the log branch cut.
                let reference = window
                    .back()
                    .and_then(|n| n.orientation)
                    .unwrap_or_default();
                let to_local = Pose::from_rotation(reference.inverse());
                let (graph, initial) = self.pose_graph(&window, prior.as_ref(), &to_local)?;
                let (x, report) = lm_minimize_pose(&graph, &initial, lm)?;
                let to_world = Pose::from_rotation(reference);
                for (n, p) in window.iter_mut().zip(x.blocks()) {
                    n.state = to_world * *p;
                }
                self.problem = None;
                report
            }
        };
        let newest = window.back().expect("window is never empty when solving");
        let estimate = StampedPose {
            t: newest.t,
            position: newest.state.translation,
            rotation: (self.cfg.mode == EstimatorMode::RangeOrientation)
                .then_some(newest.state.rotation),
        };
        self.window = window;
        self.prior = prior;
        self.latest = Some(estimate);
        Ok(StepOutput {
            estimate,
            report,
            warnings,
        })
    }

    fn translation_graph(
        &self,
        window: &VecDeque<Node>,
        prior: Option<&Node>,
    ) -> Result<(FactorGraph<Vector3<f64>>, StateVector<Vector3<f64>>), PipelineError> {
        let mut g = FactorGraph::new();
        if let Some(p) = prior {
            g.add_fixed_node(0, p.state.translation)?;
        }
        for (i, n) in window.iter().enumerate() {
            g.add_node(i + 1, n.state.translation)?;
        }
        let mut prev = prior.map(|p| p.t);
        for (i, n) in window.iter().enumerate() {
            let id = i + 1;
            g.add_factor(
                EdgeNodes::Unary(id),
                Factor::Range(RangeFactor::from_noise_bound(
                    n.d,
                    n.anchor,
                    self.cfg.eta,
                    self.cfg.iota,
                    self.loss,
                )?),
            )?;
            if let Some(t_prev) = prev {
                let s =
                    SmoothnessFactor::new(n.t - t_prev, self.cfg.v_max, self.cfg.iota, self.loss)?;
                g.add_factor(EdgeNodes::Binary(id, id - 1), Factor::Smoothness(s))?;
            }
            prev = Some(n.t);
        }
        let initial = g.initial_state();
        Ok((g, initial))
    }

    fn pose_graph(
        &self,
        window: &VecDeque<Node>,
        prior: Option<&Node>,
        to_local: &Pose,
    ) -> Result<(FactorGraph<Pose>, StateVector<Pose>), PipelineError> {
        let w_r = weight_from_variance(range_variance(self.cfg.eta), self.cfg.iota);
        let w_o =
            Matrix3::identity() * weight_from_variance(self.cfg.sigma_o.powi(2), self.cfg.iota);
        let mut g = FactorGraph::new();
        if let Some(p) = prior {
            g.add_fixed_node(0, *to_local * p.state)?;
        }
        for (i, n) in window.iter().enumerate() {
            g.add_node(i + 1, *to_local * n.state)?;
        }
        let mut prev = prior;
        for (i, n) in window.iter().enumerate() {
            let id = i + 1;
            let anchor = to_local.transform_point(&n.anchor);
            g.add_factor(
                EdgeNodes::Unary(id),
                Factor::Range(RangeFactor::new(n.d, anchor, w_r, self.loss)?),
            )?;
            if let Some(p) = prev {
                let s = SmoothnessFactor::new(n.t - p.t, self.cfg.v_max, self.cfg.iota, self.loss)?;
                let f = PoseSmoothnessFactor::new(
                    p.orientation.unwrap_or_default(),
                    n.orientation.unwrap_or_default(),
                    w_o,
                    s.w_s,
                    self.loss,
                )?;
                g.add_factor(EdgeNodes::Binary(id, id - 1), Factor::PoseSmoothness(f))?;
            }
            prev = Some(n);
        }
        let initial = g.initial_state();
        Ok((g, initial))
    }
}

/// Pairs each range with the orientation sample nearest in time; ties go to the earlier sample.
pub fn synchronize(
    ranges: &[RangeMeasurement],
    orientations: &[OrientationMeasurement],
) -> Result<Vec<(RangeMeasurement, OrientationMeasurement)>, PipelineError> {
    if orientations.is_empty() {
        return Err(PipelineError::EmptyOrientationStream);
    }
    Ok(ranges
        .iter()
        .map(|r| {
            let i = orientations.partition_point(|o| o.t < r.t);
            let pick = if i == 0 {
                0
            } else if i == orientations.len()
                || r.t - orientations[i - 1].t <= orientations[i].t - r.t
            {
                i - 1
            } else {
                i
            };
            (*r, orientations[pick])
        })
        .collect())
}

/// Everything a batch run produces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub estimates: Vec<StampedPose>,
    pub reports: Vec<SolveReport>,
    pub warnings: Vec<Warning>,
    /// Index into the range stream of every rejected measurement.
    pub rejected: Vec<usize>,
    /// Index into the range stream of every restart.
    pub restarts: Vec<usize>,
    pub stats: EstimatorStats,
}

impl Estimator {
    /// Feeds a whole stream; orientations are synchronized in range-orientation mode.
    pub fn run(
        &mut self,
        ranges: &[RangeMeasurement],
        orientations: &[OrientationMeasurement],
    ) -> Result<RunOutput, PipelineError> {
        let mut out = RunOutput::default();
        let pairs: Vec<(RangeMeasurement, Option<OrientationMeasurement>)> = match self.cfg.mode {
            EstimatorMode::RangeOnly => ranges.iter().map(|r| (*r, None)).collect(),
            EstimatorMode::RangeOrientation => synchronize(ranges, orientations)?
                .into_iter()
                .map(|(r, o)| (r, Some(o)))
                .collect(),
        };
        for (i, (r, o)) in pairs.iter().enumerate() {
            let update = match o {
                Some(o) => self.process_range_orientation(r, o)?,
                None => self.process_range(r)?,
            };
            match update {
                Update::Bootstrapped(s) | Update::Accepted(s) => {
                    out.estimates.push(s.estimate);
                    out.reports.push(s.report);
                    out.warnings.extend(s.warnings);
                }
                Update::Rejected { .. } => out.rejected.push(i),
                Update::RestartRequired { .. } => {
                    out.rejected.push(i);
                    out.restarts.push(i);
                }
                Update::Buffering { .. } => {}
            }
        }
        out.stats = self.stats;
        Ok(out)
    }
}
