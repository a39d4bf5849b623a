//! WebSocket bridge on `/ws`: the wire message set as JSON text frames,
//! server-side link poses, and a relay for live tracking input.
//!
//! Each text frame is one object tagged by `"type"`. `hello`, `command`,
//! `state`, `heartbeat` and `error` mirror the binary messages field for
//! field; a `hello` opens a protocol connection to the robot server on the
//! socket's behalf. Once states flow, `link_poses` (every model frame, from
//! forward kinematics of the latest state) follow at 30 Hz. `tracking`
//! frames carry one stream-v1 record and are relayed to every tracking
//! subscriber, in process ([`WsServer::subscribe`]) or remote (a socket
//! that sent `subscribe`); `tracking_end` closes the live stream. An
//! invalid text frame gets an `error` reply and the socket stays open.

use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, Sender};
use serde::{Deserialize, Serialize};
use teleop_core::{JointVector, KinematicModel, Pose, ACTION_DIM};
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message as WsFrame, WebSocket};

use crate::client::{Client, ClientError, ClientOptions, Inbound};
use crate::protocol::{CommandMsg, Message, Role, StateMsg, ERR_BAD_COMMAND, ERR_MALFORMED};
use crate::stream::{StreamError, TimeCheck, TrackedFrame, TrackingRecord, WirePose};

pub const DEFAULT_WS_PORT: u16 = 47854;
pub const PATH: &str = "/ws";
pub const LINK_POSE_RATE_HZ: f64 = 30.0;
/// Robot server unreachable from the bridge.
pub const ERR_NO_ROBOT: u16 = 4;
const POLL: Duration = Duration::from_millis(2);
const RELAY_QUEUE: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WsMessage {
    Hello {
        role: Role,
        state_rate_hz: u16,
    },
    Command {
        timestamp_us: u64,
        n_joints: u8,
        targets: Vec<f64>,
    },
    State {
        timestamp_us: u64,
        n: u8,
        q: Vec<f64>,
        dq: Vec<f64>,
    },
    Heartbeat {
        timestamp_us: u64,
    },
    Error {
        code: u16,
        text: String,
    },
    LinkPoses {
        timestamp_us: u64,
        frames: BTreeMap<String, WirePose>,
    },
    Tracking(TrackingRecord),
    TrackingEnd {},
    Subscribe {
        topics: Vec<String>,
    },
}

impl WsMessage {
    pub fn from_wire(m: &Message) -> Self {
        match m {
            Message::Hello {
                role,
                state_rate_hz,
            } => WsMessage::Hello {
                role: *role,
                state_rate_hz: *state_rate_hz,
            },
            Message::Command(c) => WsMessage::Command {
                timestamp_us: c.timestamp_us,
                n_joints: ACTION_DIM as u8,
                targets: c.targets.to_vec(),
            },
            Message::State(s) => WsMessage::State {
                timestamp_us: s.timestamp_us,
                n: ACTION_DIM as u8,
                q: s.q.to_vec(),
                dq: s.dq.to_vec(),
            },
            Message::Heartbeat { timestamp_us } => WsMessage::Heartbeat {
                timestamp_us: *timestamp_us,
            },
            Message::Error { code, text } => WsMessage::Error {
                code: *code,
                text: text.clone(),
            },
        }
    }

    pub fn error(code: u16, text: impl Into<String>) -> Self {
        WsMessage::Error {
            code,
            text: text.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }
}

fn fixed<const N: usize>(field: &str, v: &[f64]) -> Result<[f64; N], String> {
    v.try_into().map_err(|_| format!("{field}: expected {N}"))
}

/// Named frame poses of `model` at `q`.
pub fn link_poses(model: &KinematicModel, q: &[f64]) -> BTreeMap<String, WirePose> {
    let poses = model.fk_all(&JointVector::from_slice(q)).expect("state matches the model");
    model
        .frame_names()
        .map(|name| {
            let pose = match model.frame_joint(name).expect("listed frame") {
                Some(j) => poses[j],
                None => Pose::identity(),
            };
            (name.to_string(), WirePose::from(&pose))
        })
        .collect()
}

/// Live tracking as seen by subscribers.
#[derive(Debug, Clone, PartialEq)]
pub enum LiveEvent {
    Frame(TrackedFrame),
    End,
}

#[derive(Debug, Clone)]
pub struct WsConfig {
    pub bind: SocketAddr,
    /// Robot server that `hello` connects to.
    pub robot: Option<SocketAddr>,
    /// Model behind the link poses; must match the server's.
    pub model: KinematicModel,
}

impl WsConfig {
    pub fn new(model: KinematicModel, robot: Option<SocketAddr>) -> Self {
        WsConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_WS_PORT)),
            robot,
            model,
        }
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.bind.set_port(port);
        self
    }
}

struct Shared {
    robot: Option<SocketAddr>,
    model: KinematicModel,
    shutdown: AtomicBool,
    subscribers: Mutex<Vec<Sender<LiveEvent>>>,
}

impl Shared {
    fn publish(&self, ev: LiveEvent) {
        let mut subs = self.subscribers.lock().unwrap();
        subs.retain(|s| s.send_timeout(ev.clone(), Duration::from_secs(1)).is_ok());
    }

    fn subscribe(&self) -> Receiver<LiveEvent> {
        let (tx, rx) = channel::bounded(RELAY_QUEUE);
        self.subscribers.lock().unwrap().push(tx);
        rx
    }
}

pub struct WsServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl WsServer {
    pub fn start(cfg: WsConfig) -> io::Result<WsServer> {
        let listener = TcpListener::bind(cfg.bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            robot: cfg.robot,
            model: cfg.model,
            shutdown: AtomicBool::new(false),
            subscribers: Mutex::new(Vec::new()),
        });
        let thread = {
            let shared = shared.clone();
            thread::Builder::new()
                .name("ws-accept".into())
                .spawn(move || accept_loop(listener, shared))?
        };
        Ok(WsServer {
            addr,
            shared,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}{PATH}", self.addr)
    }

    /// Tracking frames received from now on.
    pub fn subscribe(&self) -> LiveInput {
        LiveInput::new(self.shared.subscribe())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WsServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let shared = shared.clone();
                let _ = thread::Builder::new()
                    .name("ws-conn".into())
                    .spawn(move || {
                        let _ = serve_socket(stream, shared);
                    });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(_) => thread::sleep(Duration::from_millis(10)),
        }
    }
}

fn check_path(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == PATH {
        Ok(resp)
    } else {
        let mut err = ErrorResponse::new(Some(format!("no endpoint at {}", req.uri().path())));
        *err.status_mut() = StatusCode::NOT_FOUND;
        Err(err)
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

struct Socket {
    ws: WebSocket<TcpStream>,
    link: Option<Client>,
    latest: Option<StateMsg>,
    next_links: Instant,
    relay: Option<Receiver<LiveEvent>>,
}

impl Socket {
    fn send(&mut self, m: &WsMessage) -> Result<(), tungstenite::Error> {
        self.ws.send(WsFrame::text(m.to_json()))
    }

    fn handle_text(&mut self, text: &str, shared: &Shared) -> Result<(), tungstenite::Error> {
        let msg: WsMessage = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return self.send(&WsMessage::error(ERR_MALFORMED, format!("schema: {e}"))),
        };
        match msg {
            WsMessage::Tracking(rec) => match rec.validate() {
                Ok(frame) => {
                    shared.publish(LiveEvent::Frame(frame));
                    Ok(())
                }
                Err(reason) => self.send(&WsMessage::error(ERR_MALFORMED, reason)),
            },
            WsMessage::TrackingEnd {} => {
                shared.publish(LiveEvent::End);
                Ok(())
            }
            WsMessage::Subscribe { topics } => {
                if topics.iter().any(|t| t == "tracking") && self.relay.is_none() {
                    self.relay = Some(shared.subscribe());
                }
                Ok(())
            }
            WsMessage::Hello {
                role,
                state_rate_hz,
            } => self.open_link(role, state_rate_hz, shared),
            WsMessage::Command {
                timestamp_us,
                n_joints,
                targets,
            } => {
                if n_joints as usize != ACTION_DIM {
                    return self.send(&WsMessage::error(ERR_MALFORMED, format!("n_joints: expected {ACTION_DIM}")));
                }
                let targets = match fixed::<ACTION_DIM>("targets", &targets) {
                    Ok(t) => t,
                    Err(reason) => return self.send(&WsMessage::error(ERR_MALFORMED, reason)),
                };
                self.forward(&Message::Command(CommandMsg {
                    timestamp_us,
                    targets,
                }))
            }
            WsMessage::Heartbeat { timestamp_us } => self.forward(&Message::Heartbeat { timestamp_us }),
            WsMessage::State { .. } | WsMessage::Error { .. } | WsMessage::LinkPoses { .. } => {
                self.send(&WsMessage::error(ERR_MALFORMED, "type: not accepted from clients"))
            }
        }
    }

    fn open_link(&mut self, role: Role, rate: u16, shared: &Shared) -> Result<(), tungstenite::Error> {
        if self.link.is_some() {
            return self.send(&WsMessage::error(ERR_MALFORMED, "hello: already connected"));
        }
        let Some(addr) = shared.robot else {
            return self.send(&WsMessage::error(ERR_NO_ROBOT, "no robot server behind this bridge"));
        };
        let opts = ClientOptions::new(role).rate(rate).keepalive(None);
        match Client::connect_with(addr, opts) {
            Ok(c) => {
                let granted = c.state_rate_hz();
                self.link = Some(c);
                self.send(&WsMessage::Hello {
                    role,
                    state_rate_hz: granted,
                })
            }
            Err(ClientError::PeerError { code, text }) => self.send(&WsMessage::error(code, text)),
            Err(e) => self.send(&WsMessage::error(ERR_NO_ROBOT, e.to_string())),
        }
    }

    fn forward(&mut self, m: &Message) -> Result<(), tungstenite::Error> {
        let Some(link) = &self.link else {
            return self.send(&WsMessage::error(ERR_BAD_COMMAND, "send hello first"));
        };
        match link.send(m) {
            Ok(()) => Ok(()),
            Err(e) => {
                self.link = None;
                self.send(&WsMessage::error(ERR_NO_ROBOT, e.to_string()))
            }
        }
    }

    fn pump(&mut self, shared: &Shared) -> Result<(), tungstenite::Error> {
        let mut out = Vec::new();
        if let Some(link) = &self.link {
            loop {
                match link.next(Duration::ZERO) {
                    Ok(Inbound::State(s)) => {
                        out.push(WsMessage::from_wire(&Message::State(s.clone())));
                        self.latest = Some(s);
                    }
                    Ok(Inbound::Heartbeat(ts)) => out.push(WsMessage::Heartbeat { timestamp_us: ts }),
                    Err(ClientError::Timeout) => break,
                    Err(ClientError::PeerError { code, text }) => {
                        out.push(WsMessage::error(code, text));
                        self.link = None;
                        break;
                    }
                    Err(e) => {
                        out.push(WsMessage::error(ERR_NO_ROBOT, e.to_string()));
                        self.link = None;
                        break;
                    }
                }
            }
        }
        let now = Instant::now();
        if let Some(s) = &self.latest {
            if now >= self.next_links {
                out.push(WsMessage::LinkPoses {
                    timestamp_us: s.timestamp_us,
                    frames: link_poses(&shared.model, &s.q),
                });
                self.next_links += Duration::from_secs_f64(1.0 / LINK_POSE_RATE_HZ);
                if self.next_links < now {
                    self.next_links = now;
                }
            }
        }
        if let Some(rx) = &self.relay {
            while let Ok(ev) = rx.try_recv() {
                out.push(match ev {
                    LiveEvent::Frame(f) => WsMessage::Tracking(f.to_record()),
                    LiveEvent::End => WsMessage::TrackingEnd {},
                });
            }
        }
        for m in &out {
            self.send(m)?;
        }
        Ok(())
    }
}

fn serve_socket(stream: TcpStream, shared: Arc<Shared>) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let ws = tungstenite::accept_hdr(stream, check_path).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let mut sock = Socket {
        ws,
        link: None,
        latest: None,
        next_links: Instant::now(),
        relay: None,
    };
    while !shared.shutdown.load(Ordering::SeqCst) {
        match sock.ws.read() {
            Ok(WsFrame::Text(t)) => sock.handle_text(t.as_str(), &shared)?,
            Ok(WsFrame::Binary(_)) => sock.send(&WsMessage::error(ERR_MALFORMED, "binary frames are not accepted"))?,
            Ok(WsFrame::Close(_)) => break,
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(_) => break,
        }
        sock.pump(&shared)?;
    }
    let _ = sock.ws.close(None);
    Ok(())
}

/// Live tracking input with the same time check as file input. Record
/// numbers stand in for line numbers.
pub struct LiveInput {
    source: LiveSource,
    time: TimeCheck,
    count: usize,
    done: bool,
}

enum LiveSource {
    Local(Receiver<LiveEvent>),
    Remote(Box<WebSocket<MaybeTlsStream<TcpStream>>>),
}

impl LiveInput {
    fn new(rx: Receiver<LiveEvent>) -> Self {
        LiveInput {
            source: LiveSource::Local(rx),
            time: TimeCheck::default(),
            count: 0,
            done: false,
        }
    }

    /// Subscribes to the tracking relay of a bridge at `url`.
    pub fn connect(url: &str) -> Result<Self, tungstenite::Error> {
        let (mut ws, _) = tungstenite::connect(url)?;
        ws.send(WsFrame::text(
            WsMessage::Subscribe {
                topics: vec!["tracking".into()],
            }
            .to_json(),
        ))?;
        Ok(LiveInput {
            source: LiveSource::Remote(Box::new(ws)),
            time: TimeCheck::default(),
            count: 0,
            done: false,
        })
    }

    fn next_event(&mut self) -> Option<Result<LiveEvent, StreamError>> {
        match &mut self.source {
            LiveSource::Local(rx) => rx.recv().ok().map(Ok),
            LiveSource::Remote(ws) => loop {
                let text = match ws.read() {
                    Ok(WsFrame::Text(t)) => t,
                    Ok(WsFrame::Close(_)) | Err(_) => return None,
                    Ok(_) => continue,
                };
                let line = self.count + 1;
                return match serde_json::from_str::<WsMessage>(text.as_str()) {
                    Ok(WsMessage::Tracking(rec)) => Some(
                        rec.validate()
                            .map(LiveEvent::Frame)
                            .map_err(|reason| StreamError::Schema { line, reason }),
                    ),
                    Ok(WsMessage::TrackingEnd {}) => Some(Ok(LiveEvent::End)),
                    Ok(_) => continue,
                    Err(e) => Some(Err(StreamError::Schema {
                        line,
                        reason: e.to_string(),
                    })),
                };
            },
        }
    }
}

impl Iterator for LiveInput {
    type Item = Result<TrackedFrame, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = match self.next_event()? {
            Ok(LiveEvent::Frame(f)) => {
                self.count += 1;
                self.time.check(f.frame.t, self.count).map(|_| f)
            }
            Ok(LiveEvent::End) => {
                self.done = true;
                return None;
            }
            Err(e) => Err(e),
        };
        self.done = out.is_err();
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_json_mirrors_wire_fields() {
        let s = StateMsg {
            timestamp_us: 42,
            q: [0.5; ACTION_DIM],
            dq: [-0.25; ACTION_DIM],
        };
        let v: serde_json::Value = serde_json::from_str(&WsMessage::from_wire(&Message::State(s)).to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, ["dq", "n", "q", "timestamp_us", "type"]);
        assert_eq!(v["type"], "state");
        assert_eq!(v["n"], 19);
        assert_eq!(v["q"].as_array().unwrap().len(), 19);
    }

    #[test]
    fn unknown_fields_and_types_are_rejected() {
        assert!(serde_json::from_str::<WsMessage>(r#"{"type":"heartbeat","timestamp_us":1,"x":2}"#).is_err());
        assert!(serde_json::from_str::<WsMessage>(r#"{"type":"teleport"}"#).is_err());
        let m: WsMessage = serde_json::from_str(r#"{"type":"tracking_end"}"#).unwrap();
        assert_eq!(m, WsMessage::TrackingEnd {});
    }

    #[test]
    fn link_poses_cover_every_frame() {
        let model = teleop_core::fixtures::arm7_hand12();
        let frames = link_poses(&model, model.neutral().as_slice());
        assert_eq!(frames.len(), model.frame_names().count());
        assert!(frames.contains_key("ee") && frames.contains_key("index_tip"));
        let ee = model.fk(&model.neutral(), "ee").unwrap();
        assert_eq!(frames["ee"], WirePose::from(&ee));
    }
}
