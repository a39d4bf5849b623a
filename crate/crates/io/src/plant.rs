//! Simulated 19-DOF arm+hand plant driven by the rate bridge.

use teleop_core::traj::{Bridge, Limits, TickSample, TrajError, TICK_S};
use teleop_core::{KinematicModel, ACTION_DIM};

use crate::protocol::StateMsg;

/// Integrates the bridge's sampled velocities: `q <- clamp(q + v dt)`.
#[derive(Debug, Clone)]
pub struct Plant {
    bridge: Bridge,
    lo: Vec<f64>,
    hi: Vec<f64>,
    q: Vec<f64>,
    dq: Vec<f64>,
    t_us: u64,
    timeouts: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("plant needs a {ACTION_DIM}-DOF model, got {0}")]
    Dof(usize),
    #[error(transparent)]
    Traj(#[from] TrajError),
}

impl Plant {
    /// Starts at rest at the model's neutral configuration.
    pub fn new(model: &KinematicModel, limits: Vec<Limits>) -> Result<Self, PlantError> {
        let q0 = model.neutral().to_vec();
        Self::with_initial(model, limits, q0)
    }

    pub fn with_initial(model: &KinematicModel, limits: Vec<Limits>, q0: Vec<f64>) -> Result<Self, PlantError> {
        if model.dof() != ACTION_DIM {
            return Err(PlantError::Dof(model.dof()));
        }
        let lo = model.limits_lo().to_vec();
        let hi = model.limits_hi().to_vec();
        let q: Vec<f64> = q0.iter().enumerate().map(|(i, v)| v.clamp(lo[i], hi[i])).collect();
        let bridge = Bridge::new(q.clone(), limits)?.with_position_bounds(lo.clone(), hi.clone());
        Ok(Plant {
            bridge,
            lo,
            hi,
            dq: vec![0.0; q.len()],
            q,
            t_us: 0,
            timeouts: 0,
        })
    }

    pub fn bridge(&self) -> &Bridge {
        &self.bridge
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn dq(&self) -> &[f64] {
        &self.dq
    }

    pub fn next_tick(&self) -> u64 {
        self.bridge.next_tick()
    }

    /// Ticks flagged as command timeouts so far.
    pub fn timeouts(&self) -> u64 {
        self.timeouts
    }

    /// Queues a timestamped target.
    pub fn command(&mut self, timestamp_us: u64, targets: &[f64]) -> Result<(), TrajError> {
        self.bridge.push(timestamp_us, targets.to_vec())
    }

    /// Queues a target for the next tick.
    pub fn command_now(&mut self, targets: &[f64]) -> Result<(), TrajError> {
        self.bridge.push_now(targets.to_vec())
    }

    /// Runs one 1 ms control tick.
    pub fn step(&mut self) -> TickSample {
        let sample = self.bridge.tick();
        for i in 0..self.q.len() {
            let v = sample.state.v[i];
            self.q[i] = (self.q[i] + v * TICK_S).clamp(self.lo[i], self.hi[i]);
            self.dq[i] = v;
            assert!(
                self.q[i] >= self.lo[i] && self.q[i] <= self.hi[i],
                "plant left joint limits"
            );
        }
        self.t_us = sample.t_us;
        if sample.timeout {
            self.timeouts += 1;
        }
        sample
    }

    pub fn state_msg(&self) -> StateMsg {
        let mut q = [0.0; ACTION_DIM];
        let mut dq = [0.0; ACTION_DIM];
        q.copy_from_slice(&self.q);
        dq.copy_from_slice(&self.dq);
        StateMsg {
            timestamp_us: self.t_us,
            q,
            dq,
        }
    }
}
