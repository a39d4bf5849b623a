mod common;

use std::fs;

use common::*;
use teleop_core::se3::{compose_target, compute_intent, map_intent};
use teleop_core::{fixtures, JointVector, ARM_DOF};
use teleop_io::episode::{read_episode, RECORDS_FILE, META_FILE};
use teleop_io::pipeline::{Outcome, TeleopOptions};
use teleop_io::stream::read_stream;
use teleop_io::synth::{demo_hand_q, demo_stream, DEMO_FRAMES};
use teleop_io::Session;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn fixture_stream_has_ninety_frames() {
    let frames = read_stream(fixture_path("tracking_3s.stream")).unwrap();
    assert_eq!(frames.len(), 90);
    assert_eq!(frames[89].frame.t, 89.0 / 30.0);
}

#[test]
fn recorded_episodes_are_byte_identical() {
    let frames = read_stream(fixture_path("tracking_3s.stream")).unwrap();
    let session = Session::fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let opts = TeleopOptions {
            record: Some(dir.path().join(format!("run{run}"))),
            ..TeleopOptions::default()
        };
        let (report, _) = run_lockstep(&session, &frames, &opts);
        assert_eq!(report.outcome, Outcome::Completed);
        assert_eq!(report.steps_recorded, 90);
        let d = opts.record.unwrap();
        outputs.push((fs::read(d.join(META_FILE)).unwrap(), fs::read(d.join(RECORDS_FILE)).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
    let ep = read_episode(dir.path().join("run0")).unwrap();
    assert!(ep.meta.complete);
    assert_eq!(ep.steps.len(), 90);
}

#[test]
fn recording_does_not_change_commands() {
    let frames = read_stream(fixture_path("tracking_3s.stream")).unwrap();
    let session = Session::fixture();
    let dir = tempfile::tempdir().unwrap();
    let (plain, plain_log) = run_lockstep(&session, &frames, &TeleopOptions::default());
    let rec_opts = TeleopOptions {
        record: Some(dir.path().join("ep")),
        ..TeleopOptions::default()
    };
    let (recorded, rec_log) = run_lockstep(&session, &frames, &rec_opts);
    assert_eq!(plain_log.len(), 90);
    assert_eq!(plain_log, rec_log);
    assert_eq!(plain.actions, recorded.actions);
    let ep = read_episode(dir.path().join("ep")).unwrap();
    for (step, cmd) in ep.steps.iter().zip(&rec_log) {
        assert_eq!(step.action.timestamp_us, cmd.timestamp_us);
        assert_eq!(step.action.targets, cmd.targets.to_vec());
    }
}

#[test]
fn branches_are_independent() {
    let frames = read_stream(fixture_path("tracking_3s.stream")).unwrap();
    let session = Session::fixture();
    let (both, _) = run_lockstep(&session, &frames, &TeleopOptions::default());
    let arm_only = TeleopOptions {
        hand: false,
        ..TeleopOptions::default()
    };
    let hand_only = TeleopOptions {
        arm: false,
        ..TeleopOptions::default()
    };
    let (a, _) = run_lockstep(&session, &frames, &arm_only);
    let (h, _) = run_lockstep(&session, &frames, &hand_only);
    let q0 = &both.actions[0];
    for i in 0..frames.len() {
        assert_eq!(a.actions[i].arm(), both.actions[i].arm());
        assert_eq!(h.actions[i].hand(), both.actions[i].hand());
        // a disabled branch holds the initial configuration
        assert_eq!(h.actions[i].arm(), fixtures::arm7_generic().neutral().0.as_slice());
        assert_eq!(a.actions[i].hand(), fixtures::hand12_generic().neutral().0.as_slice());
    }
    assert_eq!(q0.targets.len(), 19);
}

#[test]
fn static_hand_gives_constant_initial_actions() {
    let hand = fixtures::hand12_generic();
    let mut frames = demo_stream(&hand, 1);
    let q_hand = demo_hand_q(&hand, 0.0);
    for i in 1..30 {
        let mut f = frames[0].clone();
        f.frame.t = i as f64 / 30.0;
        frames.push(f);
    }
    // start the robot hand where the stream's hand is
    let session = exact_session();
    let srv = {
        let mut cfg = teleop_io::server::ServerConfig::new(fixtures::arm7_hand12(), teleop_io::server::Mode::Deterministic).with_port(0);
        let mut q0 = fixtures::arm7_generic().neutral().to_vec();
        q0.extend(q_hand.to_vec());
        cfg.initial_q = Some(q0);
        teleop_io::server::Server::start(cfg).unwrap()
    };
    let client = teleop_io::Client::connect_with(srv.local_addr(), teleop_io::ClientOptions::lockstep()).unwrap();
    let report = teleop_io::run_teleop(&session, frames.iter().cloned().map(Ok), &client, &TeleopOptions::default()).unwrap();
    let arm0 = fixtures::arm7_generic().neutral().to_vec();
    for a in &report.actions {
        assert!(max_abs(a.arm(), &arm0) < 1e-9, "{:?}", a.arm());
        assert!(max_abs(a.hand(), q_hand.0.as_slice()) < 1e-6, "{:?}", a.hand());
    }
    assert_eq!(report.ik_failures, 0);
}

#[test]
fn synthetic_stream_is_recovered() {
    let hand = fixtures::hand12_generic();
    let frames = demo_stream(&hand, DEMO_FRAMES);
    let session = exact_session();
    let (report, _) = run_lockstep(&session, &frames, &TeleopOptions::default());
    assert_eq!(report.ik_failures, 0);
    let ik = session.arm_ik();
    let arm0 = JointVector::from_slice(&fixtures::arm7_generic().neutral().to_vec());
    let ee_0 = ik.fk(&arm0).unwrap();
    let w0 = frames[0].frame.wrist;
    let mut worst_hand = 0.0_f64;
    for (f, a) in frames.iter().zip(&report.actions) {
        let target = compose_target(&ee_0, &map_intent(&compute_intent(&w0, &f.frame.wrist), &session.frame_map));
        let reached = ik.fk(&JointVector::from_slice(a.arm())).unwrap();
        let (dp, dr) = reached.error_to(&target);
        assert!(dp <= 1e-4 && dr <= 1e-3, "t={} dp={dp} dr={dr}", f.frame.t);
        worst_hand = worst_hand.max(max_abs(a.hand(), demo_hand_q(&hand, f.frame.t).0.as_slice()));
    }
    assert!(worst_hand <= 1e-3, "hand error {worst_hand}");
    assert_eq!(report.actions[0].arm().len(), ARM_DOF);
}

#[test]
fn disconnect_keeps_partial_episode() {
    let frames = read_stream(fixture_path("tracking_3s.stream")).unwrap();
    let session = Session::fixture();
    let dir = tempfile::tempdir().unwrap();
    let srv = server(teleop_io::server::Mode::Deterministic);
    let client = teleop_io::Client::connect_with(srv.local_addr(), teleop_io::ClientOptions::lockstep()).unwrap();
    let opts = TeleopOptions {
        record: Some(dir.path().join("ep")),
        sync_timeout: std::time::Duration::from_secs(2),
        ..TeleopOptions::default()
    };
    let mut srv = Some(srv);
    let input = frames.iter().cloned().enumerate().map(move |(i, f)| {
        if i == 40 {
            srv.take().unwrap().shutdown();
        }
        Ok(f)
    });
    let report = teleop_io::run_teleop(&session, input, &client, &opts).unwrap();
    assert_eq!(report.outcome, Outcome::Disconnected);
    assert_eq!(report.frames, 40);
    let meta = teleop_io::episode::read_meta(dir.path().join("ep")).unwrap();
    assert!(!meta.complete);
    let ep = read_episode(dir.path().join("ep")).unwrap();
    assert_eq!(ep.steps.len(), 40);
}

#[test]
fn replay_reproduces_the_recorded_command_stream() {
    let frames = read_stream(fixture_path("tracking_3s.stream")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TeleopOptions {
        record: Some(dir.path().join("ep")),
        ..TeleopOptions::default()
    };
    let (_, original) = run_lockstep(&Session::fixture(), &frames, &opts);
    let ep = read_episode(dir.path().join("ep")).unwrap();
    let srv = server(teleop_io::server::Mode::Deterministic);
    let client = teleop_io::Client::connect_with(srv.local_addr(), teleop_io::ClientOptions::lockstep()).unwrap();
    let r = teleop_io::replay_episode(&ep, &client, std::time::Duration::from_secs(5)).unwrap();
    assert_eq!((r.outcome, r.steps, r.sent), (Outcome::Completed, 90, 90));
    assert_eq!(srv.command_log(), original);
}
