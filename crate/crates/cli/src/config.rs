//! Run configuration: defaults, then a preset, then the config file, then flags.

use crate::error::CliError;
use nalgebra::Vector3;
use rangeloc::pipeline::{EstimatorConfig, EstimatorMode};
use rangeloc::sim::{AnchorSet, NoiseSpec, Preset, Scenario, Shape, TrajectorySpec};
use rangeloc::solver::LmConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Estimator keys; LM settings live in their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub window: usize,
    pub v_max: f64,
    pub eta: f64,
    pub f: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restart_gamma: Option<f64>,
    pub iota: f64,
    pub xi: f64,
    pub mode: EstimatorMode,
    pub sigma_o: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            window: d.window,
            v_max: d.v_max,
            eta: d.eta,
            f: d.f,
            gamma: d.gamma,
            gate_gamma: d.gate_gamma,
            restart_gamma: d.restart_gamma,
            iota: d.iota,
            xi: d.xi,
            mode: d.mode,
            sigma_o: d.sigma_o,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub shape: Shape,
    pub speed: f64,
    pub duration: f64,
    pub f: f64,
    pub f_imu: f64,
    pub roll_amplitude: f64,
    pub roll_period: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<[f64; 3]>>,
    pub noise: NoiseSpec,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            shape: Shape::Circle {
                center: Vector3::new(0.0, 0.0, 1.2),
                radius: 2.0,
            },
            speed: 0.5,
            duration: 60.0,
            f: 32.46,
            f_imu: 100.3,
            roll_amplitude: 0.0,
            roll_period: 10.0,
            anchors: None,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchors: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranges: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orientations: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub samples: usize,
    /// Diagnose every n-th accepted step.
    pub every: usize,
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self {
            samples: 1000,
            every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// More restarts than this make `localize` exit with the restart status.
    pub max_restarts: usize,
    pub estimator: EstimatorSection,
    pub lm: LmConfig,
    pub bootstrap_lm: LmConfig,
    pub sim: SimSection,
    pub paths: PathsSection,
    pub stability: StabilitySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            seed: 0,
            preset: None,
            max_restarts: 10,
            estimator: EstimatorSection::default(),
            lm: d.lm,
            bootstrap_lm: d.bootstrap_lm,
            sim: SimSection::default(),
            paths: PathsSection::default(),
            stability: StabilitySection::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub mode: Option<EstimatorMode>,
    pub window: Option<usize>,
    pub iters: Option<usize>,
}

fn apply_preset(cfg: &mut RunConfig, p: &Preset) {
    cfg.preset = Some(p.name.to_string());
    cfg.estimator.eta = p.eta;
    cfg.estimator.f = p.f;
    cfg.estimator.v_max = p.v_max;
    cfg.sim.f = p.f;
    cfg.sim.f_imu = p.f_imu;
    cfg.sim.noise.eta = p.eta;
    cfg.sim.anchors = Some(
        p.anchors
            .anchors()
            .iter()
            .map(|a| a.position.into())
            .collect(),
    );
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        let preset = match &overrides.preset {
            Some(p) => Some(p.clone()),
            None => match file.get("preset") {
                Some(toml::Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(CliError::Config("preset must be a string".into())),
                None => None,
            },
        };
        let mut base = RunConfig::default();
        if let Some(name) = &preset {
            apply_preset(
                &mut base,
                &Preset::by_name(name).map_err(|e| CliError::Config(e.to_string()))?,
            );
        }
        let mut table = toml::Table::try_from(&base).expect("defaults serialize");
        merge(&mut table, file);
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.preset = preset;
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(m) = overrides.mode {
            cfg.estimator.mode = m;
        }
        if let Some(n) = overrides.window {
            cfg.estimator.window = n;
        }
        if let Some(m) = overrides.iters {
            cfg.lm.max_iterations = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.estimator_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.sim
            .noise
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.stability.every == 0 || self.stability.samples == 0 {
            return Err(CliError::Config(
                "stability.every and stability.samples must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        let e = &self.estimator;
        EstimatorConfig {
            window: e.window,
            v_max: e.v_max,
            eta: e.eta,
            f: e.f,
            gamma: e.gamma,
            gate_gamma: e.gate_gamma,
            restart_gamma: e.restart_gamma,
            iota: e.iota,
            xi: e.xi,
            lm: self.lm.clone(),
            bootstrap_lm: self.bootstrap_lm.clone(),
            mode: e.mode,
            sigma_o: e.sigma_o,
            seed: self.seed,
        }
    }

    pub fn anchors(&self) -> Result<AnchorSet, CliError> {
        let positions = self.sim.anchors.as_ref().ok_or_else(|| {
            CliError::Config("no anchors: set sim.anchors or use --preset".into())
        })?;
        AnchorSet::from_positions(positions).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        let trajectory = TrajectorySpec {
            shape: self.sim.shape.clone(),
            speed: self.sim.speed,
            duration: self.sim.duration,
            rate: self.sim.f,
            v_max: self.estimator.v_max,
            roll_amplitude: self.sim.roll_amplitude,
            roll_period: self.sim.roll_period,
        };
        trajectory
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Scenario {
            anchors: self.anchors()?,
            trajectory,
            f: self.sim.f,
            f_imu: self.sim.f_imu,
            noise: self.sim.noise.clone(),
        })
    }
}
