//! Sliding-window graph optimization for range-based robot localization.

pub mod factors;
pub mod graph;
pub mod io;
pub mod lie;
pub mod measurement;
pub mod metrics;
pub mod pipeline;
pub mod sim;
pub mod solver;
pub mod stability;

pub use lie::{Pose, Rotation};
pub use measurement::{Anchor, AnchorId, OrientationMeasurement, RangeMeasurement, StampedPose};
pub use metrics::{compute_metrics, MetricsReport};
pub use pipeline::{Estimator, EstimatorConfig, EstimatorMode, Update};
pub use sim::{AnchorSet, Preset, Scenario};
pub use solver::{LmConfig, SolveReport};
