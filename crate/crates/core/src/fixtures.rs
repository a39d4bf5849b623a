//! Shipped test models. Their parameters are repository fixtures, not
//! measured hardware data; replace them with real model documents for a
//! physical robot.

use std::f64::consts::FRAC_PI_2;

use crate::kinematics::{KinematicModel, ModelDocument};

pub const ARM7_GENERIC: &str = include_str!("../../../fixtures/arm7_generic.model");
pub const HAND12_GENERIC: &str = include_str!("../../../fixtures/hand12_generic.model");
pub const ARM7_HAND12: &str = include_str!("../../../fixtures/arm7_hand12.model");

/// Joint on the arm that carries the hand.
pub const HAND_MOUNT_JOINT: &str = "arm_flange";
/// Hand fingers point along the flange z axis.
pub const HAND_MOUNT_RPY: [f64; 3] = [0.0, -FRAC_PI_2, 0.0];

pub fn arm7_generic() -> KinematicModel {
    KinematicModel::from_document(ModelDocument::parse(ARM7_GENERIC).expect("fixture parses"))
        .expect("fixture validates")
}

pub fn hand12_generic() -> KinematicModel {
    KinematicModel::from_document(ModelDocument::parse(HAND12_GENERIC).expect("fixture parses"))
        .expect("fixture validates")
}

/// The 19-DOF arm+hand composite (arm joints first).
pub fn arm7_hand12() -> KinematicModel {
    KinematicModel::from_document(ModelDocument::parse(ARM7_HAND12).expect("fixture parses"))
        .expect("fixture validates")
}

/// Builds the composite document from the two part documents.
pub fn compose_arm_hand(arm: &ModelDocument, hand: &ModelDocument) -> ModelDocument {
    arm.attach(hand, HAND_MOUNT_JOINT, [0.0; 3], HAND_MOUNT_RPY, "arm7-hand12")
        .expect("fixture models attach")
}
