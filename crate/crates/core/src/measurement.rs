//! Sensor records shared by the simulator, the estimator and the file formats.

use crate::lie::Rotation;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type AnchorId = u32;

/// One two-way time-of-flight range to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeMeasurement {
    pub t: f64,
    pub anchor: AnchorId,
    pub d: f64,
}

/// One orientation-sensor reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrientationMeasurement {
    pub t: f64,
    #[serde(rename = "R")]
    pub rotation: Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub id: AnchorId,
    #[serde(rename = "p")]
    pub position: Vector3<f64>,
}

/// A timestamped position with an optional rotation; used for estimates and truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StampedPose {
    pub t: f64,
    #[serde(rename = "p")]
    pub position: Vector3<f64>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Rotation>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_formats() {
        let r = RangeMeasurement {
            t: 1.5,
            anchor: 2,
            d: 3.25,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"t":1.5,"anchor":2,"d":3.25}"#
        );
        let a = Anchor {
            id: 1,
            position: Vector3::new(3.0, -3.0, 0.53),
        };
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            r#"{"id":1,"p":[3.0,-3.0,0.53]}"#
        );
        let p = StampedPose {
            t: 0.0,
            position: Vector3::new(1.0, 2.0, 3.0),
            rotation: None,
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"t":0.0,"p":[1.0,2.0,3.0]}"#
        );
        let o: OrientationMeasurement =
            serde_json::from_str(r#"{"t":0.5,"R":[1,0,0,0,1,0,0,0,1]}"#).unwrap();
        assert_eq!(o.rotation, Rotation::identity());
        assert!(
            serde_json::from_str::<RangeMeasurement>(r#"{"t":1,"anchor":0,"d":1,"x":2}"#).is_err()
        );
    }
}
