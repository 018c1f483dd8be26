//! The subcommands, callable without a process boundary.

use crate::config::RunConfig;
use crate::error::CliError;
use nalgebra::Vector3;
use rangeloc::io::{read_anchors, read_jsonl, read_ranges, write_atomic, write_json, write_jsonl};
use rangeloc::measurement::{Anchor, OrientationMeasurement, StampedPose};
use rangeloc::metrics::{align, compute_metrics, rotation_error, MetricsReport};
use rangeloc::pipeline::{Estimator, EstimatorMode, EstimatorStats, RunOutput, Update, Warning};
use rangeloc::solver::SolveReport;
use rangeloc::stability::{
    diagnose_window, error_bound, ErrorBound, StabilityConfig, StabilityReport,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const ANCHORS_FILE: &str = "anchors.jsonl";
pub const RANGES_FILE: &str = "ranges.jsonl";
pub const ORIENTATIONS_FILE: &str = "orientations.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const ESTIMATES_FILE: &str = "estimates.jsonl";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CDF_FILE: &str = "cdf.csv";
pub const STABILITY_FILE: &str = "stability.jsonl";
pub const DIAGNOSE_FILE: &str = "diagnose.json";
pub const BENCH_FILE: &str = "bench.json";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}

/// Where each input stream is read from: `paths.*` first, then the input directory.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub anchors: PathBuf,
    pub ranges: PathBuf,
    pub orientations: PathBuf,
    pub truth: PathBuf,
    pub estimates: PathBuf,
}

impl Inputs {
    pub fn resolve(cfg: &RunConfig, dir: &Path) -> Self {
        let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| dir.join(name));
        Self {
            anchors: pick(&cfg.paths.anchors, ANCHORS_FILE),
            ranges: pick(&cfg.paths.ranges, RANGES_FILE),
            orientations: pick(&cfg.paths.orientations, ORIENTATIONS_FILE),
            truth: pick(&cfg.paths.truth, TRUTH_FILE),
            estimates: pick(&cfg.paths.estimates, ESTIMATES_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub ranges: usize,
    pub orientations: usize,
    pub truth: usize,
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary, CliError> {
    let scenario = cfg.scenario()?;
    let sim = scenario
        .generate(cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(out)?;
    write_jsonl(&out.join(ANCHORS_FILE), scenario.anchors.anchors())?;
    write_jsonl(&out.join(RANGES_FILE), &sim.ranges)?;
    write_jsonl(&out.join(ORIENTATIONS_FILE), &sim.orientations)?;
    write_jsonl(&out.join(TRUTH_FILE), &sim.truth)?;
    Ok(SimulateSummary {
        ranges: sim.ranges.len(),
        orientations: sim.orientations.len(),
        truth: sim.truth.len(),
    })
}

/// Solve report of one estimate, keyed by its timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: f64,
    #[serde(flatten)]
    pub report: SolveReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stats: EstimatorStats,
    pub estimates: usize,
    pub rejected: Vec<usize>,
    pub restarts: Vec<usize>,
    pub warnings: Vec<Warning>,
    pub mean_solve_time: Option<f64>,
}

fn load_estimator(cfg: &RunConfig, inputs: &Inputs) -> Result<Estimator, CliError> {
    let anchors = read_anchors(&inputs.anchors)?;
    if anchors.len() < 4 || !anchors.is_non_coplanar() {
        return Err(CliError::Geometry(format!(
            "{} anchors, largest tetrahedron volume {:.3e}",
            anchors.len(),
            anchors.max_tetrahedron_volume()
        )));
    }
    Estimator::new(cfg.estimator_config(), anchors).map_err(|e| CliError::Config(e.to_string()))
}

fn run_stream(cfg: &RunConfig, inputs: &Inputs) -> Result<RunOutput, CliError> {
    let mut est = load_estimator(cfg, inputs)?;
    let ranges = read_ranges(&inputs.ranges)?;
    let orientations: Vec<OrientationMeasurement> = match cfg.estimator.mode {
        EstimatorMode::RangeOnly => Vec::new(),
        EstimatorMode::RangeOrientation => {
            if !inputs.orientations.exists() {
                return Err(CliError::Config(format!(
                    "fused mode needs an orientation file, {} not found",
                    inputs.orientations.display()
                )));
            }
            read_jsonl(&inputs.orientations)?
        }
    };
    est.run(&ranges, &orientations).map_err(|e| match e {
        rangeloc::pipeline::PipelineError::EmptyOrientationStream
        | rangeloc::pipeline::PipelineError::InvalidConfig(_)
        | rangeloc::pipeline::PipelineError::UnknownAnchor(_) => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values
        .into_iter()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

/// Writes estimates, per-step reports and the run summary; fails with the restart
/// status after writing when restarts exceed `max_restarts`.
pub fn localize(cfg: &RunConfig, inputs: &Inputs, out: &Path) -> Result<RunSummary, CliError> {
    let run = run_stream(cfg, inputs)?;
    ensure_dir(out)?;
    write_jsonl(&out.join(ESTIMATES_FILE), &run.estimates)?;
    let steps: Vec<StepReport> = run
        .estimates
        .iter()
        .zip(&run.reports)
        .map(|(e, r)| StepReport {
            t: e.t,
            report: r.clone(),
        })
        .collect();
    write_jsonl(&out.join(REPORTS_FILE), &steps)?;
    let summary = RunSummary {
        stats: run.stats,
        estimates: run.estimates.len(),
        rejected: run.rejected,
        restarts: run.restarts,
        warnings: run.warnings,
        mean_solve_time: mean(run.reports.iter().map(|r| r.wall_time)),
    };
    write_json(&out.join(RUN_FILE), &summary)?;
    if summary.stats.restarts > cfg.max_restarts {
        return Err(CliError::RestartRequired {
            restarts: summary.stats.restarts,
            limit: cfg.max_restarts,
        });
    }
    Ok(summary)
}

/// Rotation reference for `E_O`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationReference {
    #[default]
    Truth,
    Orientation,
}

pub struct EvaluateArgs<'a> {
    pub estimates: &'a Path,
    pub truth: &'a Path,
    pub orientations: Option<&'a Path>,
    pub run: Option<&'a Path>,
    pub reference: RotationReference,
}

pub fn evaluate(args: &EvaluateArgs, out: &Path) -> Result<MetricsReport, CliError> {
    let estimates: Vec<StampedPose> = read_jsonl(args.estimates)?;
    let truth: Vec<StampedPose> = read_jsonl(args.truth)?;
    let mut m =
        compute_metrics(&estimates, &truth).map_err(|e| CliError::Runtime(e.to_string()))?;
    if args.reference == RotationReference::Orientation {
        let path = args.orientations.ok_or_else(|| {
            CliError::Config("orientation reference needs an orientation file".into())
        })?;
        let reference: Vec<StampedPose> = read_jsonl::<OrientationMeasurement>(path)?
            .into_iter()
            .map(|o| StampedPose {
                t: o.t,
                position: Vector3::zeros(),
                rotation: Some(o.rotation),
            })
            .collect();
        m.e_o =
            mean(align(&estimates, &reference).iter().filter_map(|(e, r)| {
                Some(rotation_error(e.rotation.as_ref()?, r.rotation.as_ref()?))
            }));
    }
    if let Some(run) = args.run {
        let text = std::fs::read_to_string(run)
            .map_err(|e| CliError::Config(format!("{}: {e}", run.display())))?;
        let summary: RunSummary =
            serde_json::from_str(&text).map_err(|e| CliError::Parse(e.to_string()))?;
        m.rejections = summary.stats.rejected;
        m.mean_solve_time = summary.mean_solve_time;
    }
    ensure_dir(out)?;
    write_json(&out.join(METRICS_FILE), &m)?;
    write_atomic(&out.join(CDF_FILE), cdf_table(&m).as_bytes())?;
    Ok(m)
}

pub fn cdf_table(m: &MetricsReport) -> String {
    let mut s = String::from("upper_m,count,cumulative\n");
    for b in &m.cdf {
        s.push_str(&format!("{:.2},{},{:.6}\n", b.upper, b.count, b.cumulative));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub steps: usize,
    /// Steps whose alpha is at least one.
    pub non_compliant: Vec<usize>,
    pub max_alpha: f64,
    /// Steps where the window error exceeds that step's bound.
    pub bound_exceeded: Vec<usize>,
    pub aggregate: Option<ErrorBound>,
}

impl DiagnoseSummary {
    pub fn compliant(&self) -> bool {
        self.non_compliant.is_empty()
    }
}

fn nearest_truth(truth: &[StampedPose], t: f64) -> Vector3<f64> {
    let probe = [StampedPose {
        t,
        position: Vector3::zeros(),
        rotation: None,
    }];
    align(&probe, truth)
        .first()
        .map(|(_, s)| s.position)
        .unwrap_or_else(|| truth.last().map(|s| s.position).unwrap_or_default())
}

/// Runs the range-only estimator and diagnoses the post-bootstrap windows.
pub fn diagnose(
    cfg: &RunConfig,
    inputs: &Inputs,
    out: &Path,
) -> Result<(Vec<StabilityReport>, DiagnoseSummary), CliError> {
    if cfg.estimator.mode != EstimatorMode::RangeOnly {
        return Err(CliError::Config("diagnose supports range-only mode".into()));
    }
    let mut est = load_estimator(cfg, inputs)?;
    let ranges = read_ranges(&inputs.ranges)?;
    let truth: Option<Vec<StampedPose>> = if inputs.truth.exists() {
        Some(read_jsonl(&inputs.truth)?)
    } else {
        None
    };
    let scfg = StabilityConfig {
        samples: cfg.stability.samples,
        seed: cfg.seed,
        eta: cfg.estimator.eta,
        v_max: cfg.estimator.v_max,
        xi: cfg.estimator.xi,
        hessian: cfg.lm.hessian,
    };
    let mut reports = Vec::new();
    let mut step = 0usize;
    for r in &ranges {
        let update = est
            .process_range(r)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        // the bootstrap starts from a random guess, outside any feasible set
        if !matches!(update, Update::Accepted(_)) {
            continue;
        }
        step += 1;
        if (step - 1) % cfg.stability.every != 0 {
            continue;
        }
        let p = est
            .last_problem()
            .expect("range-only step keeps its window");
        let window_truth: Option<Vec<Vector3<f64>>> = truth
            .as_ref()
            .map(|tr| p.times.iter().map(|&t| nearest_truth(tr, t)).collect());
        let report = diagnose_window(step - 1, p, window_truth.as_deref(), &scfg)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        reports.push(report);
    }
    let summary = DiagnoseSummary {
        steps: reports.len(),
        non_compliant: reports
            .iter()
            .filter(|r| !r.compliant())
            .map(|r| r.step)
            .collect(),
        max_alpha: reports.iter().map(|r| r.alpha).fold(0.0, f64::max),
        bound_exceeded: reports
            .iter()
            .filter(|r| matches!((r.window_error, r.bound), (Some(e), Some(b)) if e > b))
            .map(|r| r.step)
            .collect(),
        aggregate: error_bound(
            &reports,
            reports.first().and_then(|r| r.window_error).unwrap_or(0.0),
        )
        .ok(),
    };
    ensure_dir(out)?;
    write_jsonl(&out.join(STABILITY_FILE), &reports)?;
    write_json(&out.join(DIAGNOSE_FILE), &summary)?;
    Ok((reports, summary))
}

/// Budget for one window solve: the range sampling period.
pub const SOLVE_BUDGET: f64 = 1.0 / 32.46;
/// Twice the reference desktop solve time.
pub const STRETCH_TARGET: f64 = 2.0 * 0.0019;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub window: usize,
    pub iterations: usize,
    pub steps: usize,
    /// Mean time of one estimator step, including graph construction.
    pub mean_step_time: f64,
    pub max_step_time: f64,
    /// Mean time inside the solver.
    pub mean_solve_time: f64,
    /// Mean time of the i-th solver iteration over the steps that reached it.
    pub per_iteration: Vec<f64>,
    pub mean_iterations: f64,
    pub budget: f64,
    pub within_budget: bool,
    pub stretch_target: f64,
    pub within_stretch: bool,
}

/// Times every post-bootstrap window solve on a simulated stream.
pub fn bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport, CliError> {
    let scenario = cfg.scenario()?;
    let sim = scenario
        .generate(cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(out)?;
    let anchors: &[Anchor] = scenario.anchors.anchors();
    write_jsonl(&out.join(ANCHORS_FILE), anchors)?;
    write_jsonl(&out.join(RANGES_FILE), &sim.ranges)?;
    write_jsonl(&out.join(ORIENTATIONS_FILE), &sim.orientations)?;
    let ecfg = cfg.estimator_config();
    let mut est = Estimator::new(ecfg.clone(), scenario.anchors.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let pairs = match ecfg.mode {
        EstimatorMode::RangeOnly => sim.ranges.iter().map(|r| (*r, None)).collect::<Vec<_>>(),
        EstimatorMode::RangeOrientation => {
            rangeloc::pipeline::synchronize(&sim.ranges, &sim.orientations)
                .map_err(|e| CliError::Config(e.to_string()))?
                .into_iter()
                .map(|(r, o)| (r, Some(o)))
                .collect()
        }
    };
    let mut step_times = Vec::new();
    let mut reports = Vec::new();
    for (r, o) in &pairs {
        let start = Instant::now();
        let update = match o {
            Some(o) => est.process_range_orientation(r, o),
            None => est.process_range(r),
        }
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        let elapsed = start.elapsed().as_secs_f64();
        if let Update::Accepted(s) = update {
            step_times.push(elapsed);
            reports.push(s.report);
        }
    }
    if step_times.is_empty() {
        return Err(CliError::Config(
            "simulated stream too short to time any window solve".into(),
        ));
    }
    let depth = reports
        .iter()
        .map(|r| r.iteration_times.len())
        .max()
        .unwrap_or(0);
    let per_iteration = (0..depth)
        .map(|i| {
            mean(
                reports
                    .iter()
                    .filter_map(|r| r.iteration_times.get(i).copied()),
            )
            .unwrap_or(0.0)
        })
        .collect();
    let mean_step_time = mean(step_times.iter().copied()).unwrap_or(0.0);
    let report = BenchReport {
        window: ecfg.window,
        iterations: ecfg.lm.max_iterations,
        steps: step_times.len(),
        mean_step_time,
        max_step_time: step_times.iter().cloned().fold(0.0, f64::max),
        mean_solve_time: mean(reports.iter().map(|r| r.wall_time)).unwrap_or(0.0),
        per_iteration,
        mean_iterations: mean(reports.iter().map(|r| r.iterations as f64)).unwrap_or(0.0),
        budget: SOLVE_BUDGET,
        within_budget: mean_step_time <= SOLVE_BUDGET,
        stretch_target: STRETCH_TARGET,
        within_stretch: mean_step_time <= STRETCH_TARGET,
    };
    write_json(&out.join(BENCH_FILE), &report)?;
    Ok(report)
}
