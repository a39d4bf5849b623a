//! openxr-26 skeleton records to 21-landmark frames.
//!
//! The conversion is a name lookup driven by a mapping table, so inputs with
//! extra joints or a different joint order convert the same way.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use teleop_core::hand::NUM_LANDMARKS;

use crate::stream::{TrackedFrame, TrackingRecord, WirePose};

/// Joint names of the openxr-26 schema, in their canonical order.
pub const OPENXR_26: [&str; 26] = [
    "palm",
    "wrist",
    "thumb_metacarpal",
    "thumb_proximal",
    "thumb_distal",
    "thumb_tip",
    "index_metacarpal",
    "index_proximal",
    "index_intermediate",
    "index_distal",
    "index_tip",
    "middle_metacarpal",
    "middle_proximal",
    "middle_intermediate",
    "middle_distal",
    "middle_tip",
    "ring_metacarpal",
    "ring_proximal",
    "ring_intermediate",
    "ring_distal",
    "ring_tip",
    "little_metacarpal",
    "little_proximal",
    "little_intermediate",
    "little_distal",
    "little_tip",
];

pub const MAP_FORMAT: &str = "openxr-26-map";
/// Shipped mapping table.
pub const DEFAULT_MAP: &str = include_str!("../../../fixtures/openxr26_to_mediapipe21.toml");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OpenXrError {
    #[error("missing joint \"{0}\"")]
    MissingJoint(String),
    #[error("joint \"{0}\" appears twice")]
    DuplicateJoint(String),
    #[error("invalid mapping table: {0}")]
    BadMap(String),
    #[error("invalid skeleton: {0}")]
    Invalid(String),
}

/// Landmark `i` takes the position of joint `landmarks[i]`; the wrist pose
/// is the pose of joint `wrist_pose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointMap {
    pub format: String,
    pub wrist_pose: String,
    pub landmarks: Vec<String>,
}

impl Default for JointMap {
    fn default() -> Self {
        JointMap::parse(DEFAULT_MAP).expect("shipped map is valid")
    }
}

impl JointMap {
    pub fn parse(text: &str) -> Result<Self, OpenXrError> {
        let map: JointMap = toml::from_str(text).map_err(|e| OpenXrError::BadMap(e.to_string()))?;
        if map.format != MAP_FORMAT {
            return Err(OpenXrError::BadMap(format!("format \"{}\"", map.format)));
        }
        if map.landmarks.len() != NUM_LANDMARKS {
            return Err(OpenXrError::BadMap(format!(
                "{} landmarks, expected {NUM_LANDMARKS}",
                map.landmarks.len()
            )));
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OpenXrError> {
        let text = std::fs::read_to_string(path).map_err(|e| OpenXrError::BadMap(e.to_string()))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenXrJoint {
    pub name: String,
    pub p: [f64; 3],
    pub q: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenXrRecord {
    pub t: f64,
    pub joints: Vec<OpenXrJoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engage: Option<bool>,
}

pub fn convert_openxr(rec: &OpenXrRecord, map: &JointMap) -> Result<TrackedFrame, OpenXrError> {
    let mut by_name: HashMap<&str, &OpenXrJoint> = HashMap::with_capacity(rec.joints.len());
    for j in &rec.joints {
        if by_name.insert(j.name.as_str(), j).is_some() {
            return Err(OpenXrError::DuplicateJoint(j.name.clone()));
        }
    }
    let get = |name: &str| {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| OpenXrError::MissingJoint(name.to_string()))
    };
    let wrist = get(&map.wrist_pose)?;
    let landmarks = map
        .landmarks
        .iter()
        .map(|n| get(n).map(|j| j.p))
        .collect::<Result<Vec<_>, _>>()?;
    TrackingRecord {
        t: rec.t,
        wrist: WirePose {
            p: wrist.p,
            q: wrist.q,
        },
        landmarks,
        engage: rec.engage,
    }
    .validate()
    .map_err(OpenXrError::Invalid)
}
