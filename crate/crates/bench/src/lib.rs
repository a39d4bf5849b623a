//! Workloads shared by the benchmarks and the budget tests.

use std::time::{Duration, Instant};

use teleop_core::se3::{compose_target, compute_intent, map_intent};
use teleop_core::traj::{Bridge, Limits};
use teleop_core::{fixtures, ActionVector, ArmIk, HandSession, IkRequest, JointVector, Pose, ACTION_DIM};
use teleop_io::stream::TrackedFrame;
use teleop_io::synth::{demo_stream, DEMO_FRAMES};
use teleop_io::Session;

/// Both branches of the pipeline without the network.
pub struct FrameWork {
    session: Session,
    ik: ArmIk,
    hand: HandSession,
    ee_0: Pose,
    wrist_0: Pose,
    arm_q: JointVector,
}

impl FrameWork {
    pub fn new(first: &TrackedFrame) -> Self {
        let session = Session::fixture();
        let ik = session.arm_ik();
        let arm_q = session.arm.neutral();
        let ee_0 = ik.fk(&arm_q).unwrap();
        let hand = HandSession::new(session.retargeter(), session.hand.neutral()).unwrap();
        FrameWork {
            ik,
            hand,
            ee_0,
            wrist_0: first.frame.wrist,
            arm_q,
            session,
        }
    }

    pub fn step(&mut self, f: &TrackedFrame, ts: u64) -> ActionVector {
        let mapped = map_intent(&compute_intent(&self.wrist_0, &f.frame.wrist), &self.session.frame_map);
        let req = IkRequest {
            target: compose_target(&self.ee_0, &mapped),
            q_prev: self.arm_q.clone(),
            q_neutral: self.session.arm.neutral(),
        };
        if let Ok(sol) = self.ik.resolve(&req, &self.session.weights) {
            self.arm_q = sol.q;
        }
        let hand_q = self.hand.step(&f.frame).map(|s| s.smoothed).unwrap_or_else(|_| self.session.hand.neutral());
        ActionVector::from_parts(ts, self.arm_q.as_slice(), hand_q.as_slice())
    }
}

pub fn demo_frames() -> Vec<TrackedFrame> {
    demo_stream(&fixtures::hand12_generic(), DEMO_FRAMES)
}

/// Wall time of each frame of the demo stream through both branches.
pub fn frame_times() -> Vec<Duration> {
    let frames = demo_frames();
    let mut work = FrameWork::new(&frames[0]);
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let start = Instant::now();
            std::hint::black_box(work.step(f, i as u64));
            start.elapsed()
        })
        .collect()
}

/// A 19-axis bridge in motion, re-targeted every call.
pub struct Replanner {
    bridge: Bridge,
    k: u64,
}

impl Default for Replanner {
    fn default() -> Self {
        Replanner {
            bridge: Bridge::new(vec![0.0; ACTION_DIM], vec![Limits::default(); ACTION_DIM]).unwrap(),
            k: 0,
        }
    }
}

impl Replanner {
    /// Re-plans all axes toward a fresh target and samples one tick.
    pub fn replan_and_tick(&mut self) {
        self.k += 1;
        let k = self.k as f64;
        let targets: Vec<f64> = (0..ACTION_DIM).map(|j| (k * 0.37 + j as f64).sin() * 2.0).collect();
        self.bridge.push_now(targets).unwrap();
        std::hint::black_box(self.bridge.tick());
    }

    /// Wall time of `n` re-plans, each followed by 33 plain ticks.
    pub fn times(&mut self, n: usize) -> Vec<Duration> {
        (0..n)
            .map(|_| {
                let start = Instant::now();
                self.replan_and_tick();
                let took = start.elapsed();
                for _ in 0..33 {
                    std::hint::black_box(self.bridge.tick());
                }
                took
            })
            .collect()
    }
}

/// Value at quantile `p` in [0, 1] (nearest rank).
pub fn quantile(mut v: Vec<Duration>, p: f64) -> Duration {
    v.sort();
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}
