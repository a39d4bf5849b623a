//! Loopback round-trip measurement against a running server.
//!
//! One sample is a `COMMAND` holding the last observed state followed by a
//! `HEARTBEAT`, timed until the echo arrives. The server echoes after the
//! tick that consumed the command, so the state reflecting the command has
//! been received by then.

use std::net::ToSocketAddrs;
use std::time::{Duration, Instant};

use serde::Serialize;
use teleop_core::traj::TICK_US;

use crate::client::{Client, ClientError, ClientOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub n: usize,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
    pub mean_us: f64,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyReport {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        LatencyReport {
            n,
            p50_us: percentile(&samples, 50.0),
            p99_us: percentile(&samples, 99.0),
            max_us: samples[n - 1],
            mean_us: samples.iter().sum::<f64>() / n as f64,
        }
    }
}

pub fn measure(addr: impl ToSocketAddrs, n: usize) -> Result<LatencyReport, ClientError> {
    assert!(n > 0, "need at least one sample");
    let client = Client::connect_with(addr, ClientOptions::lockstep())?;
    let timeout = Duration::from_secs(5);
    let mut last = match client.sync(0, timeout)?.pop() {
        Some(s) => s,
        None => client.next_state(timeout)?,
    };
    let mut ts = last.timestamp_us;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        ts += TICK_US;
        let start = Instant::now();
        client.send_command(ts, &last.q)?;
        let states = client.sync(ts, timeout)?;
        samples.push(start.elapsed().as_secs_f64() * 1e6);
        if let Some(s) = states.into_iter().last() {
            last = s;
        }
    }
    client.close();
    Ok(LatencyReport::from_samples(samples))
}
