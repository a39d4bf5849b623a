#![allow(dead_code)]

use std::path::{Path, PathBuf};

use teleop_core::{fixtures, RetargetConfig};
use teleop_io::client::{Client, ClientOptions};
use teleop_io::pipeline::{run_teleop, SessionReport, TeleopOptions};
use teleop_io::protocol::CommandMsg;
use teleop_io::server::{Mode, Server, ServerConfig};
use teleop_io::stream::TrackedFrame;
use teleop_io::Session;

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn server(mode: Mode) -> Server {
    Server::start(ServerConfig::new(fixtures::arm7_hand12(), mode).with_port(0)).unwrap()
}

/// Hand settings under which a self-generated stream is attainable: no
/// proximity projection, no pinky scaling, no regularization, no smoothing.
pub fn exact_retarget() -> RetargetConfig {
    RetargetConfig {
        d_proj: 0.0,
        d_esc: 0.0,
        gamma_lo: 1.0,
        gamma_hi: 1.0,
        lambda: 0.0,
        ema_alpha: 1.0,
        ..RetargetConfig::default()
    }
}

pub fn exact_session() -> Session {
    let mut cfg = Session::fixture().config;
    cfg.retarget = exact_retarget();
    Session::new(cfg, fixtures::arm7_generic(), fixtures::hand12_generic()).unwrap()
}

/// One session against a fresh deterministic server.
pub fn run_lockstep(session: &Session, frames: &[TrackedFrame], opts: &TeleopOptions) -> (SessionReport, Vec<CommandMsg>) {
    let srv = server(Mode::Deterministic);
    let client = Client::connect_with(srv.local_addr(), ClientOptions::lockstep()).unwrap();
    let report = run_teleop(session, frames.iter().cloned().map(Ok), &client, opts).unwrap();
    client.close();
    let log = srv.command_log();
    srv.shutdown();
    (report, log)
}

pub mod wire {
    use rand::Rng;
    use teleop_core::ACTION_DIM;
    use teleop_io::protocol::{encode, CommandMsg, FrameDecoder, Message, Role, StateMsg};

    fn value(rng: &mut impl Rng) -> f64 {
        match rng.gen_range(0..8) {
            0 => 0.0,
            1 => -0.0,
            2 => f64::MIN_POSITIVE / 4.0,
            3 => f64::MAX,
            4 => rng.gen_range(-1e300..1e300),
            _ => rng.gen_range(-4.0..4.0),
        }
    }

    fn joints(rng: &mut impl Rng) -> [f64; ACTION_DIM] {
        std::array::from_fn(|_| value(rng))
    }

    pub fn random_message(rng: &mut impl Rng) -> Message {
        match rng.gen_range(0..5) {
            0 => Message::Hello {
                role: if rng.gen() { Role::Commander } else { Role::Observer },
                state_rate_hz: rng.gen(),
            },
            1 => Message::Command(CommandMsg {
                timestamp_us: rng.gen(),
                targets: joints(rng),
            }),
            2 => Message::State(StateMsg {
                timestamp_us: rng.gen(),
                q: joints(rng),
                dq: joints(rng),
            }),
            3 => Message::Heartbeat {
                timestamp_us: rng.gen(),
            },
            _ => {
                let n = rng.gen_range(0..40);
                Message::Error {
                    code: rng.gen(),
                    text: (0..n).map(|_| rng.gen_range('\u{20}'..'\u{3c0}')).collect(),
                }
            }
        }
    }

    /// Encodes `n` random messages, feeds them through a decoder in random
    /// chunks and returns the number of mismatches.
    pub fn chunked_round_trip(rng: &mut impl Rng, n: usize) -> usize {
        let msgs: Vec<Message> = (0..n).map(|_| random_message(rng)).collect();
        let mut bytes = Vec::new();
        for m in &msgs {
            bytes.extend(encode(m).unwrap());
        }
        let mut dec = FrameDecoder::new();
        let mut got = Vec::with_capacity(n);
        let mut at = 0;
        while at < bytes.len() {
            let len = rng.gen_range(1..=600).min(bytes.len() - at);
            dec.push(&bytes[at..at + len]);
            at += len;
            while let Some(m) = dec.next_message().unwrap() {
                got.push(m);
            }
        }
        let mut bad = msgs.len().abs_diff(got.len());
        bad += msgs.iter().zip(&got).filter(|(a, b)| a != b).count();
        bad + usize::from(dec.pending() != 0)
    }
}
