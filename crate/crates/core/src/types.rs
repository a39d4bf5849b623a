//! Shared action layout: 7 arm joints followed by 12 hand joints.

use serde::{Deserialize, Serialize};

pub const ARM_DOF: usize = 7;
pub const HAND_DOF: usize = 12;
pub const ACTION_DIM: usize = ARM_DOF + HAND_DOF;

/// A timestamped 19-D joint target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub timestamp_us: u64,
    pub targets: Vec<f64>,
}

impl ActionVector {
    pub fn new(timestamp_us: u64, targets: Vec<f64>) -> Self {
        ActionVector {
            timestamp_us,
            targets,
        }
    }

    pub fn from_parts(timestamp_us: u64, arm: &[f64], hand: &[f64]) -> Self {
        let mut targets = Vec::with_capacity(arm.len() + hand.len());
        targets.extend_from_slice(arm);
        targets.extend_from_slice(hand);
        ActionVector {
            timestamp_us,
            targets,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.targets.len() == ACTION_DIM && self.targets.iter().all(|v| v.is_finite())
    }

    pub fn arm(&self) -> &[f64] {
        &self.targets[..ARM_DOF.min(self.targets.len())]
    }

    pub fn hand(&self) -> &[f64] {
        &self.targets[ARM_DOF.min(self.targets.len())..]
    }
}

/// Timestamp in microseconds of the `i`-th step of a fixed-rate stream.
pub fn step_timestamp_us(i: u64, rate_hz: u32) -> u64 {
    let rate = rate_hz as u128;
    ((i as u128 * 2_000_000 + rate) / (2 * rate)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_timestamps_round_to_nearest() {
        assert_eq!(step_timestamp_us(0, 30), 0);
        assert_eq!(step_timestamp_us(1, 30), 33_333);
        assert_eq!(step_timestamp_us(2, 30), 66_667);
        assert_eq!(step_timestamp_us(3, 30), 100_000);
        assert_eq!(step_timestamp_us(90, 30), 3_000_000);
    }

    #[test]
    fn parts_split() {
        let a = ActionVector::from_parts(5, &[1.0; 7], &[2.0; 12]);
        assert!(a.is_valid());
        assert_eq!(a.arm(), &[1.0; 7]);
        assert_eq!(a.hand(), &[2.0; 12]);
    }
}
