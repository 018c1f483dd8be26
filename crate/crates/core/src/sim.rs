//! Ground-truth trajectories, anchor layouts and simulated sensor streams.

use crate::lie::{exp_so3, Pose, Rotation};
use crate::measurement::{Anchor, AnchorId, OrientationMeasurement, RangeMeasurement, StampedPose};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Smallest tetrahedron volume (m^3) for a layout to count as non-coplanar.
pub const COPLANAR_VOLUME_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory speed {speed} m/s exceeds v_max {v_max} m/s")]
    InfeasibleSpeed { speed: f64, v_max: f64 },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(&'static str),
    #[error("invalid noise specification: {0}")]
    InvalidNoise(&'static str),
    #[error("anchor id {0} appears twice")]
    DuplicateAnchor(AnchorId),
    #[error("anchor set is empty")]
    NoAnchors,
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

/// Anchors ordered by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Anchor>", into = "Vec<Anchor>")]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
}

impl TryFrom<Vec<Anchor>> for AnchorSet {
    type Error = SimError;
    fn try_from(v: Vec<Anchor>) -> Result<Self, SimError> {
        AnchorSet::new(v)
    }
}

impl From<AnchorSet> for Vec<Anchor> {
    fn from(a: AnchorSet) -> Self {
        a.anchors
    }
}

impl AnchorSet {
    pub fn new(mut anchors: Vec<Anchor>) -> Result<Self, SimError> {
        if anchors.is_empty() {
            return Err(SimError::NoAnchors);
        }
        anchors.sort_by_key(|a| a.id);
        for w in anchors.windows(2) {
            if w[0].id == w[1].id {
                return Err(SimError::DuplicateAnchor(w[0].id));
            }
        }
        Ok(Self { anchors })
    }

    pub fn from_positions(positions: &[[f64; 3]]) -> Result<Self, SimError> {
        Self::new(
            positions
                .iter()
                .enumerate()
                .map(|(i, p)| Anchor {
                    id: i as AnchorId,
                    position: Vector3::from(*p),
                })
                .collect(),
        )
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn position(&self, id: AnchorId) -> Option<Vector3<f64>> {
        self.anchors
            .binary_search_by_key(&id, |a| a.id)
            .ok()
            .map(|i| self.anchors[i].position)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for a in &self.anchors {
            lo = lo.inf(&a.position);
            hi = hi.sup(&a.position);
        }
        (lo, hi)
    }

    /// Volume of the largest tetrahedron spanned by four anchors.
    pub fn max_tetrahedron_volume(&self) -> f64 {
        max_tetrahedron_volume(&self.anchors.iter().map(|a| a.position).collect::<Vec<_>>())
    }

    pub fn is_non_coplanar(&self) -> bool {
        self.max_tetrahedron_volume() > COPLANAR_VOLUME_TOL
    }
}

/// Largest tetrahedron volume over all 4-subsets of `points`.
pub fn max_tetrahedron_volume(points: &[Vector3<f64>]) -> f64 {
    let n = points.len();
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let a = points[j] - points[i];
                    let b = points[k] - points[i];
                    let c = points[l] - points[i];
                    best = best.max(a.dot(&b.cross(&c)).abs() / 6.0);
                }
            }
        }
    }
    best
}

/// Named hardware settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub anchors: AnchorSet,
    /// Range noise bound in metres.
    pub eta: f64,
    /// Range rate in Hz.
    pub f: f64,
    /// Orientation sensor rate in Hz.
    pub f_imu: f64,
    pub v_max: f64,
}

pub const PRESET_NAMES: [&str; 2] = ["paper-indoor", "paper-outdoor"];

impl Preset {
    pub fn by_name(name: &str) -> Result<Self, SimError> {
        let positions: [[f64; 3]; 4] = match name {
            "paper-indoor" => [
                [3.0, 3.0, 1.95],
                [3.0, -3.0, 0.53],
                [-3.0, 3.0, 0.54],
                [-3.0, -3.0, 1.98],
            ],
            "paper-outdoor" => [
                [0.0, 0.0, 0.79],
                [6.0, 0.0, 5.0],
                [6.0, 8.0, 1.52],
                [0.0, 8.0, 5.52],
            ],
            _ => return Err(SimError::UnknownPreset(name.to_string())),
        };
        Ok(Self {
            name: if name == "paper-indoor" {
                "paper-indoor"
            } else {
                "paper-outdoor"
            },
            anchors: AnchorSet::from_positions(&positions)?,
            eta: 0.2,
            f: 32.46,
            f_imu: 100.3,
            v_max: 1.0,
        })
    }

    pub fn paper_indoor() -> Self {
        Self::by_name("paper-indoor").expect("built-in preset")
    }

    pub fn paper_outdoor() -> Self {
        Self::by_name("paper-outdoor").expect("built-in preset")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Static {
        position: Vector3<f64>,
    },
    /// Horizontal circle through `center`, counter-clockwise.
    Circle {
        center: Vector3<f64>,
        radius: f64,
    },
    /// Axis-aligned horizontal rectangle of `width` (x) by `length` (y).
    Rectangle {
        center: Vector3<f64>,
        width: f64,
        length: f64,
    },
    /// Circle whose height bounces between `z_min` and `z_max` at `climb_rate`.
    Helix {
        center: Vector3<f64>,
        radius: f64,
        z_min: f64,
        z_max: f64,
        climb_rate: f64,
    },
    Waypoints {
        points: Vec<Vector3<f64>>,
        #[serde(default)]
        closed: bool,
    },
}

/// A continuous ground-truth path traversed at constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub shape: Shape,
    /// Path speed in m/s.
    pub speed: f64,
    pub duration: f64,
    /// Truth sample rate in Hz.
    pub rate: f64,
    pub v_max: f64,
    /// Roll oscillation amplitude in radians; heading always follows travel.
    #[serde(default)]
    pub roll_amplitude: f64,
    #[serde(default = "default_roll_period")]
    pub roll_period: f64,
}

fn default_roll_period() -> f64 {
    10.0
}

impl TrajectorySpec {
    pub fn new(shape: Shape, speed: f64, duration: f64, rate: f64, v_max: f64) -> Self {
        Self {
            shape,
            speed,
            duration,
            rate,
            v_max,
            roll_amplitude: 0.0,
            roll_period: default_roll_period(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(SimError::InvalidTrajectory("duration must be non-negative"));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(SimError::InvalidTrajectory("rate must be positive"));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err(SimError::InvalidTrajectory("speed must be non-negative"));
        }
        if !(self.roll_period > 0.0) {
            return Err(SimError::InvalidTrajectory("roll period must be positive"));
        }
        if self.speed > self.v_max * (1.0 + 1e-12) {
            return Err(SimError::InfeasibleSpeed {
                speed: self.speed,
                v_max: self.v_max,
            });
        }
        match &self.shape {
            Shape::Static { .. } => {}
            Shape::Circle { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(SimError::InvalidTrajectory(
                        "circle radius must be positive",
                    ));
                }
            }
            Shape::Rectangle { width, length, .. } => {
                if !(*width > 0.0 && *length > 0.0) {
                    return Err(SimError::InvalidTrajectory(
                        "rectangle sides must be positive",
                    ));
                }
            }
            Shape::Helix {
                radius,
                z_min,
                z_max,
                climb_rate,
                ..
            } => {
                if !(*radius > 0.0) {
                    return Err(SimError::InvalidTrajectory("helix radius must be positive"));
                }
                if !(z_max >= z_min) {
                    return Err(SimError::InvalidTrajectory("helix z_max below z_min"));
                }
                if !(*climb_rate >= 0.0 && *climb_rate <= self.speed) {
                    return Err(SimError::InvalidTrajectory(
                        "climb rate must lie in [0, speed]",
                    ));
                }
            }
            Shape::Waypoints { points, .. } => {
                if points.is_empty() {
                    return Err(SimError::InvalidTrajectory("waypoint list is empty"));
                }
            }
        }
        Ok(())
    }

    /// Position at time `t`.
    pub fn position(&self, t: f64) -> Vector3<f64> {
        let s = self.speed * t;
        match &self.shape {
            Shape::Static { position } => *position,
            Shape::Circle { center, radius } => {
                let a = s / radius;
                center + Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
            }
            Shape::Rectangle {
                center,
                width,
                length,
            } => {
                let (hw, hl) = (width / 2.0, length / 2.0);
                let corners = [
                    Vector3::new(-hw, -hl, 0.0),
                    Vector3::new(hw, -hl, 0.0),
                    Vector3::new(hw, hl, 0.0),
                    Vector3::new(-hw, hl, 0.0),
                ];
                center + along_polyline(&corners, true, s)
            }
            Shape::Helix {
                center,
                radius,
                z_min,
                z_max,
                climb_rate,
            } => {
                let vh = (self.speed.powi(2) - climb_rate.powi(2)).max(0.0).sqrt();
                let a = vh * t / radius;
                let span = z_max - z_min;
                let z = if span > 0.0 {
                    let u = (climb_rate * t).rem_euclid(2.0 * span);
                    z_min + if u <= span { u } else { 2.0 * span - u }
                } else {
                    *z_min
                };
                Vector3::new(center.x + radius * a.cos(), center.y + radius * a.sin(), z)
            }
            Shape::Waypoints { points, closed } => along_polyline(points, *closed, s),
        }
    }

    /// Pose at time `t`: heading along the horizontal velocity plus roll.
    pub fn pose(&self, t: f64) -> Pose {
        let h = 1e-4;
        let (t0, t1) = if t >= h {
            (t - h, t + h)
        } else {
            (t, t + 2.0 * h)
        };
        let d = self.position(t1) - self.position(t0);
        let yaw = if d.xy().norm() > 1e-9 {
            d.y.atan2(d.x)
        } else {
            0.0
        };
        let roll = self.roll_amplitude * (2.0 * PI * t / self.roll_period).sin();
        let rotation = Rotation::about_z(yaw) * exp_so3(&Vector3::new(roll, 0.0, 0.0));
        Pose::new(rotation, self.position(t))
    }

    /// Samples at `n / rate` for `n < floor(duration * rate)`.
    pub fn sample_times(&self, rate: f64) -> impl Iterator<Item = f64> {
        let count = (self.duration * rate + 1e-9).floor() as usize;
        (0..count).map(move |n| n as f64 / rate)
    }
}

fn along_polyline(points: &[Vector3<f64>], closed: bool, s: f64) -> Vector3<f64> {
    let n = points.len();
    if n == 1 {
        return points[0];
    }
    let segs = if closed { n } else { n - 1 };
    let seg = |i: usize| (points[i], points[(i + 1) % n]);
    let total: f64 = (0..segs).map(|i| (seg(i).1 - seg(i).0).norm()).sum();
    if total <= 0.0 {
        return points[0];
    }
    let mut rem = if closed {
        s.rem_euclid(total)
    } else {
        s.clamp(0.0, total)
    };
    for i in 0..segs {
        let (a, b) = seg(i);
        let len = (b - a).norm();
        if rem <= len && len > 0.0 {
            return a + (b - a) * (rem / len);
        }
        rem -= len;
    }
    seg(segs - 1).1
}

/// Ground-truth poses sampled at the trajectory rate.
pub fn generate_truth(spec: &TrajectorySpec) -> Result<Vec<StampedPose>, SimError> {
    spec.validate()?;
    Ok(spec
        .sample_times(spec.rate)
        .map(|t| {
            let p = spec.pose(t);
            StampedPose {
                t,
                position: p.translation,
                rotation: Some(p.rotation),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeNoiseKind {
    /// Normal with sigma = eta / 3, clipped to [-eta, eta].
    #[default]
    TruncatedNormal,
    Uniform,
}

/// A bias added to one anchor's ranges for `start <= t < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierWindow {
    pub anchor: AnchorId,
    pub start: f64,
    pub end: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub eta: f64,
    pub kind: RangeNoiseKind,
    /// Standard deviation of the orientation noise rotation vector, radians.
    pub sigma_o: f64,
    pub outliers: Vec<OutlierWindow>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            eta: 0.2,
            kind: RangeNoiseKind::TruncatedNormal,
            sigma_o: 0.0,
            outliers: Vec::new(),
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            eta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(SimError::InvalidNoise("eta must be non-negative"));
        }
        if !(self.sigma_o >= 0.0 && self.sigma_o.is_finite()) {
            return Err(SimError::InvalidNoise("sigma_o must be non-negative"));
        }
        if self
            .outliers
            .iter()
            .any(|o| !(o.end >= o.start) || !o.bias.is_finite())
        {
            return Err(SimError::InvalidNoise(
                "outlier window must have end >= start",
            ));
        }
        Ok(())
    }

    fn bias(&self, anchor: AnchorId, t: f64) -> f64 {
        self.outliers
            .iter()
            .filter(|o| o.anchor == anchor && t >= o.start && t < o.end)
            .map(|o| o.bias)
            .sum()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        match self.kind {
            RangeNoiseKind::TruncatedNormal => {
                let n = Normal::new(0.0, self.eta / 3.0).expect("positive sigma");
                n.sample(rng).clamp(-self.eta, self.eta)
            }
            RangeNoiseKind::Uniform => rng.random_range(-self.eta..=self.eta),
        }
    }
}

/// Round-robin ranges at `f` Hz: measurement `n` goes to `ids[n mod |anchors|]`.
pub fn simulate_ranges(
    trajectory: &TrajectorySpec,
    anchors: &AnchorSet,
    f: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<RangeMeasurement>, SimError> {
    trajectory.validate()?;
    noise.validate()?;
    if !(f > 0.0) {
        return Err(SimError::InvalidTrajectory("range rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let list = anchors.anchors();
    Ok(trajectory
        .sample_times(f)
        .enumerate()
        .map(|(n, t)| {
            let a = list[n % list.len()];
            let truth = (trajectory.position(t) - a.position).norm();
            let d = truth + noise.sample(&mut rng) + noise.bias(a.id, t);
            RangeMeasurement {
                t,
                anchor: a.id,
                d: d.max(0.0),
            }
        })
        .collect())
}

/// Orientation readings `R_true exp(n)` with `n ~ N(0, sigma_o^2 I)`.
pub fn simulate_orientation(
    trajectory: &TrajectorySpec,
    f_imu: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<OrientationMeasurement>, SimError> {
    trajectory.validate()?;
    noise.validate()?;
    if !(f_imu > 0.0) {
        return Err(SimError::InvalidTrajectory(
            "orientation rate must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let normal = Normal::new(0.0, noise.sigma_o.max(f64::MIN_POSITIVE)).expect("valid sigma");
    Ok(trajectory
        .sample_times(f_imu)
        .map(|t| {
            let r = trajectory.pose(t).rotation;
            let rotation = if noise.sigma_o > 0.0 {
                let n = Vector3::from_fn(|_, _| normal.sample(&mut rng));
                r * exp_so3(&n)
            } else {
                r
            };
            OrientationMeasurement { t, rotation }
        })
        .collect())
}

/// Everything needed to simulate one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub anchors: AnchorSet,
    pub trajectory: TrajectorySpec,
    pub f: f64,
    pub f_imu: f64,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Truth at the range timestamps.
    pub truth: Vec<StampedPose>,
    pub ranges: Vec<RangeMeasurement>,
    pub orientations: Vec<OrientationMeasurement>,
}

impl Scenario {
    /// A preset's anchors, rates and noise bound with the given path.
    pub fn from_preset(preset: &Preset, shape: Shape, speed: f64, duration: f64) -> Self {
        Self {
            anchors: preset.anchors.clone(),
            trajectory: TrajectorySpec::new(shape, speed, duration, preset.f, preset.v_max),
            f: preset.f,
            f_imu: preset.f_imu,
            noise: NoiseSpec {
                eta: preset.eta,
                ..NoiseSpec::default()
            },
        }
    }

    pub fn generate(&self, seed: u64) -> Result<SimOutput, SimError> {
        let mut spec = self.trajectory.clone();
        spec.rate = self.f;
        Ok(SimOutput {
            truth: generate_truth(&spec)?,
            ranges: simulate_ranges(&self.trajectory, &self.anchors, self.f, &self.noise, seed)?,
            orientations: simulate_orientation(&self.trajectory, self.f_imu, &self.noise, seed)?,
        })
    }
}
