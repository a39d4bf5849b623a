//! Session configuration file (TOML). Model paths are relative to the
//! directory of the configuration file.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Matrix3};
use serde::{Deserialize, Serialize};
use teleop_core::arm_ik::IkConfig;
use teleop_core::kinematics::ModelDocument;
use teleop_core::{
    fixtures, ArmIk, FrameMap, HandRetargeter, KinematicModel, Limits, RedundancyWeights, RetargetConfig, ACTION_DIM,
    ARM_DOF, HAND_DOF,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

/// Named preset or explicit row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameMapSpec {
    Named(String),
    Matrix([[f64; 3]; 3]),
}

impl Default for FrameMapSpec {
    fn default() -> Self {
        FrameMapSpec::Named(FrameMap::DEFAULT_NAME.into())
    }
}

impl FrameMapSpec {
    pub fn build(&self) -> Result<FrameMap, ConfigError> {
        match self {
            FrameMapSpec::Named(n) => {
                FrameMap::by_name(n).ok_or_else(|| ConfigError::Invalid(format!("unknown frame map \"{n}\"")))
            }
            FrameMapSpec::Matrix(r) => {
                let m = Matrix3::from_fn(|i, j| r[i][j]);
                FrameMap::new(m).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }
}

/// Redundancy weights; absent diagonals default to `1 / joint range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    pub w_m: f64,
    pub w_n: f64,
    pub w_c: f64,
    #[serde(default)]
    pub neutral_diag: Option<Vec<f64>>,
    #[serde(default)]
    pub continuity_diag: Option<Vec<f64>>,
}

impl Default for WeightsSpec {
    fn default() -> Self {
        WeightsSpec {
            w_m: 1.0,
            w_n: 0.5,
            w_c: 2.0,
            neutral_diag: None,
            continuity_diag: None,
        }
    }
}

/// When the operator's reference wrist pose is captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngagePolicy {
    /// First record with `engage: true`; the first record when it carries
    /// no flag.
    #[default]
    Marker,
    /// First record, ignoring flags.
    First,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    #[serde(default)]
    pub engage: EngagePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub arm_model: PathBuf,
    pub hand_model: PathBuf,
    #[serde(default = "default_ee")]
    pub ee_frame: String,
    #[serde(default)]
    pub frame_map: FrameMapSpec,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default)]
    pub retarget: RetargetConfig,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    #[serde(default = "default_task")]
    pub task: String,
}

fn default_ee() -> String {
    "ee".into()
}

fn default_task() -> String {
    "teleop".into()
}

/// Everything a session needs, loaded and validated.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: SessionConfig,
    pub arm: KinematicModel,
    pub hand: KinematicModel,
    pub frame_map: FrameMap,
    pub weights: RedundancyWeights,
    pub limits: Vec<Limits>,
}

fn load_model_file(path: &Path) -> Result<KinematicModel, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    ModelDocument::parse(&text)
        .and_then(KinematicModel::from_document)
        .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
}

impl SessionConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file and everything it references.
    pub fn load(path: impl AsRef<Path>) -> Result<Session, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let arm = load_model_file(&base.join(&cfg.arm_model))?;
        let hand = load_model_file(&base.join(&cfg.hand_model))?;
        Session::new(cfg, arm, hand)
    }
}

impl Session {
    pub fn new(config: SessionConfig, arm: KinematicModel, hand: KinematicModel) -> Result<Self, ConfigError> {
        if arm.dof() != ARM_DOF {
            return Err(ConfigError::Invalid(format!("arm model has {} DOF, expected {ARM_DOF}", arm.dof())));
        }
        if hand.dof() != HAND_DOF {
            return Err(ConfigError::Invalid(format!("hand model has {} DOF, expected {HAND_DOF}", hand.dof())));
        }
        if !arm.has_frame(&config.ee_frame) {
            return Err(ConfigError::Invalid(format!("arm model has no frame \"{}\"", config.ee_frame)));
        }
        let frame_map = config.frame_map.build()?;
        let mut weights = RedundancyWeights::default_for(&arm);
        weights.w_m = config.weights.w_m;
        weights.w_n = config.weights.w_n;
        weights.w_c = config.weights.w_c;
        if let Some(d) = &config.weights.neutral_diag {
            weights.neutral_diag = DVector::from_column_slice(d);
        }
        if let Some(d) = &config.weights.continuity_diag {
            weights.continuity_diag = DVector::from_column_slice(d);
        }
        weights.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config
            .retarget
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config
            .limits
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let limits = vec![config.limits; ACTION_DIM];
        Ok(Session {
            config,
            arm,
            hand,
            frame_map,
            weights,
            limits,
        })
    }

    /// The shipped fixture models with default settings.
    pub fn fixture() -> Self {
        let config = SessionConfig {
            arm_model: "arm7_generic.model".into(),
            hand_model: "hand12_generic.model".into(),
            ee_frame: default_ee(),
            frame_map: FrameMapSpec::default(),
            weights: WeightsSpec::default(),
            retarget: RetargetConfig::default(),
            limits: Limits::default(),
            calibration: CalibrationSpec::default(),
            task: default_task(),
        };
        Session::new(config, fixtures::arm7_generic(), fixtures::hand12_generic()).expect("fixture session is valid")
    }

    pub fn arm_ik(&self) -> ArmIk {
        let cfg = IkConfig {
            ee_frame: self.config.ee_frame.clone(),
            ..IkConfig::default()
        };
        ArmIk::new(self.arm.clone(), cfg).expect("validated arm model")
    }

    pub fn retargeter(&self) -> HandRetargeter {
        HandRetargeter::new(self.hand.clone(), self.config.retarget.clone()).expect("validated hand model")
    }
}
