//! Synthetic tracking input: a wrist drifting through a small reachable
//! motion while the fingers open and close, with landmarks read off the
//! robot hand itself.

use std::f64::consts::PI;

use nalgebra::Vector3;
use teleop_core::hand::synthetic_landmarks;
use teleop_core::{HandFrame, JointVector, KinematicModel, Pose, Quat};

use crate::stream::{to_stream_string, TrackedFrame, RATE_HZ};

pub const DEMO_FRAMES: usize = 90;

/// Hand configuration at `t`: between 20% and 60% of each joint's range.
pub fn demo_hand_q(model: &KinematicModel, t: f64) -> JointVector {
    let s = 0.4 + 0.2 * (2.0 * PI * 0.5 * t).sin();
    let lo = model.limits_lo();
    let hi = model.limits_hi();
    let q: Vec<f64> = lo.0.iter().zip(hi.0.iter()).map(|(l, h)| l + s * (h - l)).collect();
    JointVector::from_slice(&q)
}

/// Wrist pose at `t` in tracking coordinates.
pub fn demo_wrist(t: f64) -> Pose {
    let w = 2.0 * PI * 0.5 * t;
    let p = Vector3::new(0.05 * w.sin(), 1.2 + 0.03 * (1.0 - w.cos()), -0.4 + 0.04 * w.sin());
    let q = Quat::from_rpy(0.1 * w.sin(), 0.05 * (1.0 - w.cos()), -0.1 * w.sin());
    Pose::new(p, q)
}

pub fn demo_frame(hand: &KinematicModel, t: f64) -> TrackedFrame {
    let wrist = demo_wrist(t);
    let local = synthetic_landmarks(hand, &demo_hand_q(hand, t)).expect("hand model provides the landmark frames");
    let landmarks = local.map(|l| wrist.transform_point(&l));
    TrackedFrame {
        frame: HandFrame { t, wrist, landmarks },
        engage: None,
    }
}

/// `n` frames at the stream rate.
pub fn demo_stream(hand: &KinematicModel, n: usize) -> Vec<TrackedFrame> {
    (0..n).map(|i| demo_frame(hand, i as f64 / f64::from(RATE_HZ))).collect()
}

/// Contents of `fixtures/tracking_3s.stream`.
pub fn demo_stream_text(hand: &KinematicModel) -> String {
    to_stream_string(&demo_stream(hand, DEMO_FRAMES))
}
