//! Blocking wire-protocol client.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender};
use teleop_core::ACTION_DIM;

use crate::protocol::{encode, CommandMsg, FrameDecoder, Message, ProtocolError, Role, StateMsg};
use crate::server::{DEFAULT_STATE_RATE_HZ, HANDSHAKE_TIMEOUT};

const INBOUND_QUEUE: usize = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connection refused: {0}")]
    ConnectRefused(io::Error),
    #[error("no HELLO reply within the handshake timeout")]
    HandshakeTimeout,
    #[error("peer error {code}: {text}")]
    PeerError { code: u16, text: String },
    #[error("connection closed")]
    Disconnected,
    #[error("timed out waiting for the server")]
    Timeout,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ClientError {
    pub fn peer_code(&self) -> Option<u16> {
        match self {
            ClientError::PeerError { code, .. } => Some(*code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub role: Role,
    pub state_rate_hz: u16,
    /// Period of background heartbeats. Must be off for a deterministic
    /// commander, whose heartbeats advance the server clock.
    pub keepalive: Option<Duration>,
    pub handshake_timeout: Duration,
}

impl ClientOptions {
    pub fn new(role: Role) -> Self {
        ClientOptions {
            role,
            state_rate_hz: DEFAULT_STATE_RATE_HZ,
            keepalive: Some(Duration::from_secs(1)),
            handshake_timeout: HANDSHAKE_TIMEOUT,
        }
    }

    pub fn rate(mut self, hz: u16) -> Self {
        self.state_rate_hz = hz;
        self
    }

    pub fn keepalive(mut self, period: Option<Duration>) -> Self {
        self.keepalive = period;
        self
    }

    /// Commander for lockstep use against a deterministic server: every
    /// state, no keepalive.
    pub fn lockstep() -> Self {
        ClientOptions::new(Role::Commander).rate(1000).keepalive(None)
    }
}

/// What the server sent after the handshake.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    State(StateMsg),
    Heartbeat(u64),
}

pub struct Client {
    writer: Arc<Mutex<TcpStream>>,
    inbound: Receiver<Inbound>,
    peer_error: Arc<Mutex<Option<(u16, String)>>>,
    closed: Arc<AtomicBool>,
    role: Role,
    rate: u16,
    peer: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

fn handshake(stream: &mut TcpStream, opts: &ClientOptions) -> Result<(u16, FrameDecoder), ClientError> {
    stream.write_all(&encode(&Message::Hello {
        role: opts.role,
        state_rate_hz: opts.state_rate_hz,
    })?)?;
    let deadline = Instant::now() + opts.handshake_timeout;
    let mut dec = FrameDecoder::new();
    let mut buf = [0u8; 4096];
    loop {
        match dec.next_message()? {
            Some(Message::Hello { state_rate_hz, .. }) => return Ok((state_rate_hz, dec)),
            Some(Message::Error { code, text }) => return Err(ClientError::PeerError { code, text }),
            Some(_) => {
                return Err(ClientError::Protocol(ProtocolError::Malformed {
                    offset: 0,
                    reason: "expected HELLO reply".into(),
                }))
            }
            None => {}
        }
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(ClientError::HandshakeTimeout);
        }
        stream.set_read_timeout(Some(left))?;
        match stream.read(&mut buf) {
            Ok(0) => return Err(ClientError::Disconnected),
            Ok(n) => dec.push(&buf[..n]),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(ClientError::HandshakeTimeout)
            }
            Err(e) => return Err(e.into()),
        }
    }
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, role: Role) -> Result<Client, ClientError> {
        Self::connect_with(addr, ClientOptions::new(role))
    }

    pub fn connect_with(addr: impl ToSocketAddrs, opts: ClientOptions) -> Result<Client, ClientError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(ClientError::ConnectRefused)?.collect();
        let mut last = io::Error::new(io::ErrorKind::InvalidInput, "no address");
        let mut stream = None;
        for a in &addrs {
            match TcpStream::connect_timeout(a, opts.handshake_timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let mut stream = stream.ok_or(ClientError::ConnectRefused(last))?;
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        let (rate, dec) = handshake(&mut stream, &opts)?;
        stream.set_read_timeout(None)?;

        let (tx, rx) = channel::bounded(INBOUND_QUEUE);
        let peer_error = Arc::new(Mutex::new(None));
        let closed = Arc::new(AtomicBool::new(false));
        let reader = {
            let stream = stream.try_clone()?;
            let peer_error = peer_error.clone();
            thread::Builder::new()
                .name("client-reader".into())
                .spawn(move || read_loop(stream, dec, tx, peer_error))?
        };
        // the reader is left detached: it may be parked on a full inbound
        // queue until the receiver is dropped
        drop(reader);
        let writer = Arc::new(Mutex::new(stream));
        let mut threads = Vec::new();
        if let Some(period) = opts.keepalive {
            let writer = writer.clone();
            let closed = closed.clone();
            threads.push(
                thread::Builder::new()
                    .name("client-keepalive".into())
                    .spawn(move || keepalive_loop(writer, closed, period))?,
            );
        }
        Ok(Client {
            writer,
            inbound: rx,
            peer_error,
            closed,
            role: opts.role,
            rate,
            peer,
            threads,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// State rate granted by the server.
    pub fn state_rate_hz(&self) -> u16 {
        self.rate
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer
    }

    pub fn send(&self, msg: &Message) -> Result<(), ClientError> {
        let bytes = encode(msg)?;
        self.writer
            .lock()
            .unwrap()
            .write_all(&bytes)
            .map_err(|_| self.closed_error())
    }

    pub fn send_command(&self, timestamp_us: u64, targets: &[f64]) -> Result<(), ClientError> {
        let mut t = [0.0; ACTION_DIM];
        if targets.len() != ACTION_DIM {
            return Err(ClientError::Protocol(ProtocolError::Unencodable(format!(
                "{} targets, expected {ACTION_DIM}",
                targets.len()
            ))));
        }
        t.copy_from_slice(targets);
        self.send(&Message::Command(CommandMsg {
            timestamp_us,
            targets: t,
        }))
    }

    pub fn send_heartbeat(&self, timestamp_us: u64) -> Result<(), ClientError> {
        self.send(&Message::Heartbeat { timestamp_us })
    }

    fn closed_error(&self) -> ClientError {
        match self.peer_error.lock().unwrap().clone() {
            Some((code, text)) => ClientError::PeerError { code, text },
            None => ClientError::Disconnected,
        }
    }

    /// Next inbound message.
    pub fn next(&self, timeout: Duration) -> Result<Inbound, ClientError> {
        match self.inbound.recv_timeout(timeout) {
            Ok(m) => Ok(m),
            Err(RecvTimeoutError::Timeout) => Err(ClientError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(self.closed_error()),
        }
    }

    /// Next state, skipping heartbeat echoes.
    pub fn next_state(&self, timeout: Duration) -> Result<StateMsg, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if let Inbound::State(s) = self.next(left)? {
                return Ok(s);
            }
        }
    }

    /// Sends `HEARTBEAT{ts}` and returns every state received before its
    /// echo.
    pub fn sync(&self, timestamp_us: u64, timeout: Duration) -> Result<Vec<StateMsg>, ClientError> {
        self.send_heartbeat(timestamp_us)?;
        let deadline = Instant::now() + timeout;
        let mut states = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.next(left)? {
                Inbound::State(s) => states.push(s),
                Inbound::Heartbeat(t) if t == timestamp_us => return Ok(states),
                Inbound::Heartbeat(_) => {}
            }
        }
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
        let _ = self.writer.lock().unwrap().shutdown(Shutdown::Both);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn read_loop(
    mut stream: TcpStream,
    mut dec: FrameDecoder,
    tx: Sender<Inbound>,
    peer_error: Arc<Mutex<Option<(u16, String)>>>,
) {
    let mut buf = vec![0u8; 16 * 1024];
    loop {
        loop {
            let msg = match dec.next_message() {
                Ok(Some(m)) => m,
                Ok(None) => break,
                Err(e) => {
                    *peer_error.lock().unwrap() = Some((0, format!("undecodable server frame: {e}")));
                    return;
                }
            };
            let item = match msg {
                Message::State(s) => Inbound::State(s),
                Message::Heartbeat { timestamp_us } => Inbound::Heartbeat(timestamp_us),
                Message::Error { code, text } => {
                    *peer_error.lock().unwrap() = Some((code, text));
                    return;
                }
                Message::Hello { .. } | Message::Command(_) => continue,
            };
            if tx.send(item).is_err() {
                return;
            }
        }
        match stream.read(&mut buf) {
            Ok(0) | Err(_) => return,
            Ok(n) => dec.push(&buf[..n]),
        }
    }
}

fn keepalive_loop(writer: Arc<Mutex<TcpStream>>, closed: Arc<AtomicBool>, period: Duration) {
    let start = Instant::now();
    let mut next = start + period;
    while !closed.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now < next {
            thread::sleep((next - now).min(Duration::from_millis(50)));
            continue;
        }
        next += period;
        let ts = start.elapsed().as_micros() as u64;
        let bytes = encode(&Message::Heartbeat { timestamp_us: ts }).expect("heartbeat encodes");
        if writer.lock().unwrap().write_all(&bytes).is_err() {
            return;
        }
    }
}
