//! Arm and hand teleoperation math: pose algebra, kinematic trees,
//! redundancy-resolving arm IK, dexterous hand retargeting and jerk-limited
//! trajectory generation.

pub mod arm_ik;
pub mod brent;
pub mod fixtures;
pub mod hand;
pub mod kinematics;
pub mod se3;
pub mod traj;
pub mod types;

pub use arm_ik::{ArmIk, IkConfig, IkError, IkRequest, IkSolution, RedundancyWeights};
pub use hand::{HandFrame, HandRetargeter, HandSession, RetargetConfig};
pub use kinematics::{load_model, JointVector, KinematicModel, ModelError};
pub use se3::{DifferentialIntent, FrameMap, Pose, Quat};
pub use traj::{Bridge, Limits, Profile};
pub use types::{ActionVector, ACTION_DIM, ARM_DOF, HAND_DOF};
