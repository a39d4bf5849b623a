//! Teleoperation session: tracking frames in, 19-D commands out.
//!
//! Per frame the arm branch maps the wrist's differential intent onto the
//! end-effector pose captured at engagement and resolves it with the arm IK;
//! the hand branch retargets the landmarks. Both run sequentially on the
//! calling thread.
//!
//! Against a deterministic server the session runs in lockstep. The first
//! heartbeat yields the initial state `q0` stamped `t_s`; frame `i` gets the
//! timestamp `ts = t_s + 1 ms + round((t_i - t_0) * 1e6)` µs. Before
//! commanding, the session syncs to `ts - 1`, so the observation is the
//! state of the last tick before `ts` and the command takes effect at the
//! first tick at or after `ts`.

use std::path::PathBuf;
use std::time::Duration;

use serde::Serialize;
use teleop_core::arm_ik::IkError;
use teleop_core::se3::{compose_target, compute_intent, map_intent};
use teleop_core::traj::TICK_US;
use teleop_core::{ActionVector, HandSession, IkRequest, JointVector, Pose, ACTION_DIM, ARM_DOF};

use crate::client::{Client, ClientError};
use crate::config::{EngagePolicy, Session};
use crate::episode::{Episode, EpisodeError, EpisodeWriter, Observation, Step};
use crate::protocol::StateMsg;
use crate::stream::{StreamError, TrackedFrame};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("input: {0}")]
    Input(#[from] StreamError),
    #[error("robot link: {0}")]
    Client(#[from] ClientError),
    #[error("episode: {0}")]
    Episode(#[from] EpisodeError),
}

#[derive(Debug, Clone)]
pub struct TeleopOptions {
    pub arm: bool,
    pub hand: bool,
    pub record: Option<PathBuf>,
    pub episode_id: String,
    /// Longest wait for a heartbeat echo.
    pub sync_timeout: Duration,
}

impl Default for TeleopOptions {
    fn default() -> Self {
        TeleopOptions {
            arm: true,
            hand: true,
            record: None,
            episode_id: "episode-0".into(),
            sync_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterStats {
    pub calls: usize,
    pub total: usize,
    pub max: usize,
}

impl IterStats {
    fn add(&mut self, n: usize) {
        self.calls += 1;
        self.total += n;
        self.max = self.max.max(n);
    }

    pub fn mean(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.total as f64 / self.calls as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    /// The server went away; everything up to that point was kept.
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub outcome: Outcome,
    pub frames: usize,
    /// Index of the frame that captured the reference wrist pose.
    pub engaged_at: Option<usize>,
    pub ik_failures: usize,
    /// Frames whose arm target was unreachable; the previous arm command
    /// was held.
    pub ik_failed_frames: Vec<usize>,
    pub hand_failures: usize,
    /// Joint-7 objective evaluations per IK call.
    pub ik_evaluations: IterStats,
    pub ik_brent_iterations: IterStats,
    pub hand_iterations: IterStats,
    pub steps_recorded: usize,
    /// Commands sent, in order.
    #[serde(skip)]
    pub actions: Vec<ActionVector>,
}

struct Recorder {
    writer: Option<EpisodeWriter>,
}

impl Recorder {
    fn push(&mut self, step: &Step) -> Result<(), EpisodeError> {
        match &mut self.writer {
            Some(w) => w.push(step),
            None => Ok(()),
        }
    }

    fn steps(&self) -> usize {
        self.writer.as_ref().map_or(0, |w| w.steps())
    }
}

fn disconnected(e: &ClientError) -> bool {
    matches!(e, ClientError::Disconnected | ClientError::PeerError { .. } | ClientError::Io(_))
}

/// Runs a session until the input ends or the server disconnects.
pub fn run_teleop<I>(session: &Session, input: I, io: &Client, opts: &TeleopOptions) -> Result<SessionReport, PipelineError>
where
    I: IntoIterator<Item = Result<TrackedFrame, StreamError>>,
{
    let mut report = SessionReport {
        outcome: Outcome::Completed,
        frames: 0,
        engaged_at: None,
        ik_failures: 0,
        ik_failed_frames: Vec::new(),
        hand_failures: 0,
        ik_evaluations: IterStats::default(),
        ik_brent_iterations: IterStats::default(),
        hand_iterations: IterStats::default(),
        steps_recorded: 0,
        actions: Vec::new(),
    };
    let mut recorder = Recorder {
        writer: match &opts.record {
            Some(dir) => Some(EpisodeWriter::create(dir, &opts.episode_id, &session.config.task)?),
            None => None,
        },
    };

    let mut observation = match first_state(io, opts) {
        Ok(s) => s,
        Err(e) if disconnected(&e) => {
            report.outcome = Outcome::Disconnected;
            return Ok(report);
        }
        Err(e) => return Err(e.into()),
    };
    let base = observation.timestamp_us + TICK_US;
    let q0 = observation.q;
    let arm_q0 = JointVector::from_slice(&q0[..ARM_DOF]);
    let hand_q0 = JointVector::from_slice(&q0[ARM_DOF..]);
    let ik = session.arm_ik();
    let ee_0 = ik.fk(&arm_q0).expect("arm model validated");
    let q_neutral = session.arm.neutral();
    let mut hand = HandSession::new(session.retargeter(), hand_q0.clone()).expect("hand model validated");

    let mut arm_cmd = arm_q0;
    let mut hand_cmd = hand_q0;
    let mut wrist_0: Option<Pose> = None;
    let mut t_first: Option<f64> = None;
    let mut last_ts = 0;

    for (i, item) in input.into_iter().enumerate() {
        let tracked = match item {
            Ok(f) => f,
            Err(e) => {
                report.steps_recorded = recorder.steps();
                return Err(e.into());
            }
        };
        let frame = &tracked.frame;
        let t0 = *t_first.get_or_insert(frame.t);
        let ts = base + ((frame.t - t0) * 1e6).round().max(0.0) as u64;
        let ts = ts.max(last_ts);
        last_ts = ts;
        if wrist_0.is_none() {
            let engage = match session.config.calibration.engage {
                EngagePolicy::First => true,
                EngagePolicy::Marker => tracked.engage != Some(false),
            };
            if engage {
                wrist_0 = Some(frame.wrist);
                report.engaged_at = Some(i);
            }
        }

        match io.sync(ts - 1, opts.sync_timeout) {
            Ok(states) => {
                if let Some(s) = states.last() {
                    observation = s.clone();
                }
            }
            Err(e) if disconnected(&e) => {
                report.outcome = Outcome::Disconnected;
                break;
            }
            Err(e) => return Err(e.into()),
        }

        if let (true, Some(w0)) = (opts.arm, &wrist_0) {
            let mapped = map_intent(&compute_intent(w0, &frame.wrist), &session.frame_map);
            let req = IkRequest {
                target: compose_target(&ee_0, &mapped),
                q_prev: arm_cmd.clone(),
                q_neutral: q_neutral.clone(),
            };
            match ik.resolve_with_stats(&req, &session.weights) {
                Ok((sol, stats)) => {
                    arm_cmd = sol.q;
                    report.ik_evaluations.add(stats.evaluations);
                    report.ik_brent_iterations.add(stats.brent_iterations);
                }
                Err(IkError::Unreachable | IkError::BadRequest(_) | IkError::Model(_)) => {
                    report.ik_failures += 1;
                    report.ik_failed_frames.push(i);
                }
            }
        }
        if opts.hand {
            match hand.step(frame) {
                Ok(out) => {
                    report.hand_iterations.add(out.raw.iterations);
                    hand_cmd = out.smoothed;
                }
                Err(_) => report.hand_failures += 1,
            }
        }

        let action = ActionVector::from_parts(ts, arm_cmd.as_slice(), hand_cmd.as_slice());
        debug_assert_eq!(action.targets.len(), ACTION_DIM);
        if let Err(e) = io.send_command(ts, &action.targets) {
            if disconnected(&e) {
                report.outcome = Outcome::Disconnected;
                break;
            }
            return Err(e.into());
        }
        recorder.push(&Step {
            index: i as u64,
            t: frame.t - t0,
            observation: Observation {
                timestamp_us: observation.timestamp_us,
                q: observation.q.to_vec(),
                dq: observation.dq.to_vec(),
            },
            action: action.clone(),
        })?;
        report.actions.push(action);
        report.frames += 1;
    }

    // the echo confirms the server has taken every command
    if report.outcome == Outcome::Completed && report.frames > 0 {
        match io.sync(last_ts, opts.sync_timeout) {
            Ok(_) => {}
            Err(e) if disconnected(&e) => report.outcome = Outcome::Disconnected,
            Err(e) => return Err(e.into()),
        }
    }
    report.steps_recorded = recorder.steps();
    if report.outcome == Outcome::Completed {
        if let Some(w) = recorder.writer.take() {
            w.finish()?;
        }
    }
    Ok(report)
}

/// Initial state: the tick-0 state of a fresh deterministic server, or the
/// next state of a running one.
fn first_state(io: &Client, opts: &TeleopOptions) -> Result<StateMsg, ClientError> {
    let states = io.sync(0, opts.sync_timeout)?;
    match states.last() {
        Some(s) => Ok(s.clone()),
        None => io.next_state(opts.sync_timeout),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub outcome: Outcome,
    pub steps: usize,
    pub sent: usize,
}

/// Re-sends a recorded episode's actions with their original timestamps,
/// in lockstep, so a deterministic server receives the recorded command
/// stream.
pub fn replay_episode(episode: &Episode, io: &Client, sync_timeout: Duration) -> Result<ReplayReport, ClientError> {
    let mut report = ReplayReport {
        outcome: Outcome::Completed,
        steps: episode.steps.len(),
        sent: 0,
    };
    let step = |ts: u64, targets: Option<&[f64]>| -> Result<(), ClientError> {
        io.sync(ts.saturating_sub(1), sync_timeout)?;
        if let Some(t) = targets {
            io.send_command(ts, t)?;
        }
        Ok(())
    };
    let mut result = step(0, None);
    for s in &episode.steps {
        if result.is_err() {
            break;
        }
        result = step(s.action.timestamp_us, Some(&s.action.targets));
        if result.is_ok() {
            report.sent += 1;
        }
    }
    if let (Ok(()), Some(last)) = (&result, episode.steps.last()) {
        result = io.sync(last.action.timestamp_us, sync_timeout).map(|_| ());
    }
    match result {
        Ok(()) => Ok(report),
        Err(e) if disconnected(&e) => {
            report.outcome = Outcome::Disconnected;
            Ok(report)
        }
        Err(e) => Err(e),
    }
}
