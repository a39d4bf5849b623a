//! Online jerk-limited trajectory generation.
//!
//! Each axis is planned independently as a sequence of constant-jerk
//! segments taking the current `(p, v, a)` to rest at the target. A plan has
//! three parts: a velocity change to a peak velocity `vp` (ending with zero
//! acceleration), an optional cruise at `vp`, and a velocity change from
//! `vp` to zero. `vp` is found by bisection on the stopping displacement.
//!
//! [`Bridge`] turns a stream of timestamped targets into one sample per
//! control tick, re-planning from the current sampled state whenever a new
//! target becomes due.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub const TICK_US: u64 = 1_000;
pub const TICK_S: f64 = 1e-3;
pub const DEFAULT_TIMEOUT_US: u64 = 500_000;
/// Slack allowed on an initial state before it is rejected as infeasible.
pub const LIMIT_SLACK: f64 = 1e-9;
const BISECT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajError {
    #[error("initial state exceeds limits (v = {v}, a = {a})")]
    Infeasible { v: f64, a: f64 },
    #[error("invalid limits: {0}")]
    BadLimits(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("expected {expected} axes, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("command timestamp {got} precedes {last}")]
    NonMonotone { last: u64, got: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            v_max: 2.0,
            a_max: 10.0,
            j_max: 1000.0,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<(), TrajError> {
        let ok = [self.v_max, self.a_max, self.j_max]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0);
        if ok {
            Ok(())
        } else {
            Err(TrajError::BadLimits(format!("{self:?}")))
        }
    }

    /// Rest-to-rest duration when the move reaches the velocity plateau.
    pub fn plateau_duration(&self, distance: f64) -> f64 {
        distance.abs() / self.v_max + self.v_max / self.a_max + self.a_max / self.j_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisState {
    pub p: f64,
    pub v: f64,
    pub a: f64,
}

impl AxisState {
    pub fn at_rest(p: f64) -> Self {
        AxisState { p, v: 0.0, a: 0.0 }
    }

    /// State after applying constant jerk `j` for `tau` seconds.
    pub fn advance(&self, j: f64, tau: f64) -> AxisState {
        AxisState {
            p: self.p + tau * (self.v + tau * (self.a / 2.0 + tau * j / 6.0)),
            v: self.v + tau * (self.a + tau * j / 2.0),
            a: self.a + tau * j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration: f64,
    pub jerk: f64,
}

fn run(mut s: AxisState, segs: &[Segment]) -> AxisState {
    for seg in segs {
        s = s.advance(seg.jerk, seg.duration);
    }
    s
}

/// Jerk-limited change from `(v0, a0)` to velocity `vt` with zero final
/// acceleration: ramp the acceleration to a peak, hold, ramp to zero.
fn velocity_change(v0: f64, a0: f64, vt: f64, lim: &Limits) -> [Segment; 3] {
    let j = lim.j_max;
    let v_nat = v0 + a0 * a0.abs() / (2.0 * j);
    let sign = if vt >= v_nat { 1.0 } else { -1.0 };
    let (v0, a0, vt) = (sign * v0, sign * a0, sign * vt);
    let dv = vt - v0;
    let mut ap = (dv * j + a0 * a0 / 2.0).max(0.0).sqrt().max(a0);
    let mut hold = 0.0;
    if ap > lim.a_max {
        ap = lim.a_max.max(a0);
        hold = ((dv - (2.0 * ap * ap - a0 * a0) / (2.0 * j)) / ap).max(0.0);
    }
    [
        Segment {
            duration: ((ap - a0) / j).max(0.0),
            jerk: sign * j,
        },
        Segment {
            duration: hold,
            jerk: 0.0,
        },
        Segment {
            duration: (ap / j).max(0.0),
            jerk: -sign * j,
        },
    ]
}

/// A planned single-axis motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub start: AxisState,
    pub target: f64,
    pub segments: Vec<Segment>,
    pub duration: f64,
}

impl Profile {
    pub fn hold(p: f64) -> Self {
        Profile {
            start: AxisState::at_rest(p),
            target: p,
            segments: Vec::new(),
            duration: 0.0,
        }
    }

    /// Plans a motion from `start` to rest at `target`.
    pub fn plan(start: AxisState, target: f64, lim: &Limits) -> Result<Profile, TrajError> {
        lim.validate()?;
        if !(start.p.is_finite() && start.v.is_finite() && start.a.is_finite() && target.is_finite()) {
            return Err(TrajError::NonFinite);
        }
        if start.v.abs() > lim.v_max + LIMIT_SLACK || start.a.abs() > lim.a_max + LIMIT_SLACK {
            return Err(TrajError::Infeasible {
                v: start.v,
                a: start.a,
            });
        }
        let v0 = start.v.clamp(-lim.v_max, lim.v_max);
        let a0 = start.a.clamp(-lim.a_max, lim.a_max);
        let dp = target - start.p;
        if v0 == 0.0 && a0 == 0.0 && dp == 0.0 {
            return Ok(Profile::hold(target));
        }

        let origin = AxisState { p: 0.0, v: v0, a: a0 };
        let parts = |vp: f64| {
            let up = velocity_change(v0, a0, vp, lim);
            let mid = run(origin, &up);
            let down = velocity_change(vp, 0.0, 0.0, lim);
            let end = run(AxisState { a: 0.0, ..mid }, &down);
            (up, down, end.p)
        };
        let disp = |vp: f64| parts(vp).2;

        let d_stop = disp(0.0);
        let (lo, hi, bound) = if dp >= d_stop {
            (0.0, lim.v_max, lim.v_max)
        } else {
            (-lim.v_max, 0.0, -lim.v_max)
        };
        let d_bound = disp(bound);
        let (vp, cruise) = if (dp >= d_stop && d_bound <= dp) || (dp < d_stop && d_bound >= dp) {
            (bound, (dp - d_bound) / bound)
        } else {
            // disp(lo) <= dp <= disp(hi) holds on the bracket
            let (mut lo, mut hi) = (lo, hi);
            while hi - lo > BISECT_TOL {
                let mid = 0.5 * (lo + hi);
                if disp(mid) <= dp {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let vp = if dp >= d_stop { lo } else { hi };
            (vp, 0.0)
        };

        let (up, down, _) = parts(vp);
        let mut segments: Vec<Segment> = up.to_vec();
        segments.push(Segment {
            duration: cruise.max(0.0),
            jerk: 0.0,
        });
        segments.extend_from_slice(&down);
        segments.retain(|s| s.duration > 0.0);
        let duration = segments.iter().map(|s| s.duration).sum();
        Ok(Profile {
            start: AxisState {
                p: start.p,
                v: v0,
                a: a0,
            },
            target,
            segments,
            duration,
        })
    }

    /// Analytic state at time `t` after the profile start. Past the end the
    /// axis rests exactly at the target.
    pub fn sample(&self, t: f64) -> AxisState {
        if t <= 0.0 {
            return self.start;
        }
        if t >= self.duration {
            return AxisState::at_rest(self.target);
        }
        let mut s = self.start;
        let mut rest = t;
        for seg in &self.segments {
            if rest <= seg.duration {
                return s.advance(seg.jerk, rest);
            }
            s = s.advance(seg.jerk, seg.duration);
            rest -= seg.duration;
        }
        AxisState::at_rest(self.target)
    }

    /// Jerk in effect at time `t` (zero outside the profile).
    pub fn jerk_at(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for seg in &self.segments {
            acc += seg.duration;
            if t < acc {
                return seg.jerk;
            }
        }
        0.0
    }

    /// Largest peak velocity reached (absolute value).
    pub fn peak_velocity(&self) -> f64 {
        let mut s = self.start;
        let mut peak = s.v.abs();
        for seg in &self.segments {
            // interior extremum where a + j t = 0
            if seg.jerk != 0.0 {
                let tz = -s.a / seg.jerk;
                if tz > 0.0 && tz < seg.duration {
                    peak = peak.max(s.advance(seg.jerk, tz).v.abs());
                }
            }
            s = s.advance(seg.jerk, seg.duration);
            peak = peak.max(s.v.abs());
        }
        peak
    }
}

/// Multi-axis state at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub t: f64,
}

impl TrajectoryState {
    pub fn at_rest(q: Vec<f64>, t: f64) -> Self {
        let n = q.len();
        TrajectoryState {
            q,
            v: vec![0.0; n],
            a: vec![0.0; n],
            t,
        }
    }

    pub fn axis(&self, i: usize) -> AxisState {
        AxisState {
            p: self.q[i],
            v: self.v[i],
            a: self.a[i],
        }
    }
}

/// One control tick of bridge output.
#[derive(Debug, Clone, PartialEq)]
pub struct TickSample {
    pub tick: u64,
    pub t_us: u64,
    pub state: TrajectoryState,
    /// A new target was applied at this tick.
    pub replanned: bool,
    /// More than the timeout has elapsed since the last applied command.
    pub timeout: bool,
}

/// Rate bridge from timestamped position targets to 1 kHz samples.
///
/// A command with timestamp `ts` is applied at the first unprocessed tick
/// `k` with `k * 1 ms >= ts`. Several commands due at the same tick collapse
/// to the latest one.
#[derive(Debug, Clone)]
pub struct Bridge {
    limits: Vec<Limits>,
    position_bounds: Option<(Vec<f64>, Vec<f64>)>,
    profiles: Vec<Profile>,
    profile_start_tick: u64,
    next_tick: u64,
    pending: VecDeque<(u64, Vec<f64>)>,
    last_pushed_ts: Option<u64>,
    last_applied_ts: Option<u64>,
    target: Vec<f64>,
    timeout_us: u64,
    current: TrajectoryState,
}

impl Bridge {
    pub fn new(initial_q: Vec<f64>, limits: Vec<Limits>) -> Result<Self, TrajError> {
        if limits.len() != initial_q.len() {
            return Err(TrajError::Dimension {
                expected: initial_q.len(),
                got: limits.len(),
            });
        }
        for l in &limits {
            l.validate()?;
        }
        if !initial_q.iter().all(|v| v.is_finite()) {
            return Err(TrajError::NonFinite);
        }
        Ok(Bridge {
            profiles: initial_q.iter().map(|&p| Profile::hold(p)).collect(),
            limits,
            position_bounds: None,
            profile_start_tick: 0,
            next_tick: 0,
            pending: VecDeque::new(),
            last_pushed_ts: None,
            last_applied_ts: None,
            target: initial_q.clone(),
            timeout_us: DEFAULT_TIMEOUT_US,
            current: TrajectoryState::at_rest(initial_q, 0.0),
        })
    }

    /// Targets are clamped into `[lo, hi]` before planning.
    pub fn with_position_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.position_bounds = Some((lo, hi));
        self
    }

    pub fn with_timeout_us(mut self, timeout_us: u64) -> Self {
        self.timeout_us = timeout_us;
        self
    }

    pub fn dof(&self) -> usize {
        self.limits.len()
    }

    pub fn limits(&self) -> &[Limits] {
        &self.limits
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    pub fn next_tick_time_us(&self) -> u64 {
        self.next_tick * TICK_US
    }

    pub fn current(&self) -> &TrajectoryState {
        &self.current
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Queues a target. Timestamps must not decrease.
    pub fn push(&mut self, timestamp_us: u64, targets: Vec<f64>) -> Result<(), TrajError> {
        if targets.len() != self.dof() {
            return Err(TrajError::Dimension {
                expected: self.dof(),
                got: targets.len(),
            });
        }
        if !targets.iter().all(|v| v.is_finite()) {
            return Err(TrajError::NonFinite);
        }
        if let Some(last) = self.last_pushed_ts {
            if timestamp_us < last {
                return Err(TrajError::NonMonotone {
                    last,
                    got: timestamp_us,
                });
            }
        }
        self.last_pushed_ts = Some(timestamp_us);
        self.pending.push_back((timestamp_us, targets));
        Ok(())
    }

    /// Queues a target to take effect at the next tick, regardless of its
    /// timestamp.
    pub fn push_now(&mut self, targets: Vec<f64>) -> Result<(), TrajError> {
        let ts = self.next_tick_time_us().max(self.last_pushed_ts.unwrap_or(0));
        self.push(ts, targets)
    }

    /// Advances one control tick and returns its sample.
    pub fn tick(&mut self) -> TickSample {
        let k = self.next_tick;
        let t_us = k * TICK_US;
        let mut latest = None;
        while self.pending.front().is_some_and(|(ts, _)| *ts <= t_us) {
            latest = self.pending.pop_front();
        }
        let replanned = latest.is_some();
        if let Some((ts, mut targets)) = latest {
            if let Some((lo, hi)) = &self.position_bounds {
                for (i, t) in targets.iter_mut().enumerate() {
                    *t = t.clamp(lo[i], hi[i]);
                }
            }
            let now = self.sample_at(k);
            self.profiles = (0..self.dof())
                .map(|i| {
                    Profile::plan(now.axis(i), targets[i], &self.limits[i])
                        .unwrap_or_else(|_| {
                            // sampled states stay within limits; clamp round-off
                            let l = &self.limits[i];
                            let s = AxisState {
                                p: now.q[i],
                                v: now.v[i].clamp(-l.v_max, l.v_max),
                                a: now.a[i].clamp(-l.a_max, l.a_max),
                            };
                            Profile::plan(s, targets[i], l).expect("clamped state is feasible")
                        })
                })
                .collect();
            self.profile_start_tick = k;
            self.target = targets;
            self.last_applied_ts = Some(ts);
        }
        let state = self.sample_at(k);
        self.current = state.clone();
        self.next_tick = k + 1;
        let timeout = self
            .last_applied_ts
            .is_some_and(|ts| t_us.saturating_sub(ts) > self.timeout_us);
        TickSample {
            tick: k,
            t_us,
            state,
            replanned,
            timeout,
        }
    }

    fn sample_at(&self, k: u64) -> TrajectoryState {
        let t = (k - self.profile_start_tick) as f64 * TICK_S;
        let n = self.dof();
        let mut out = TrajectoryState {
            q: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            t: k as f64 * TICK_S,
        };
        for p in &self.profiles {
            let s = p.sample(t);
            out.q.push(s.p);
            out.v.push(s.v);
            out.a.push(s.a);
        }
        out
    }
}

/// Runs a command stream through a fresh bridge for `n_ticks` ticks.
pub fn bridge_stream(
    initial_q: Vec<f64>,
    limits: Vec<Limits>,
    commands: &[(u64, Vec<f64>)],
    n_ticks: u64,
) -> Result<Vec<TickSample>, TrajError> {
    let mut bridge = Bridge::new(initial_q, limits)?;
    for (ts, targets) in commands {
        bridge.push(*ts, targets.clone())?;
    }
    Ok((0..n_ticks).map(|_| bridge.tick()).collect())
}
