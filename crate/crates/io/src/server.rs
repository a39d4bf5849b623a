//! Robot I/O server: one commander, any number of observers, and a single
//! control thread that owns the plant.
//!
//! Network readers talk to the control thread through bounded queues.
//! In realtime mode commands go through a drop-oldest queue of
//! `COMMAND_QUEUE` entries and the plant ticks on the wall clock at 1 kHz.
//! In deterministic mode nothing is dropped: the control thread only
//! advances when the commander sends `HEARTBEAT{T}`, at which point it runs
//! every tick `k` with `k * 1 ms <= T` and then echoes the heartbeat.
//!
//! State frames go to each client through its own bounded queue and writer
//! thread, so a slow client never stalls the loop; a client whose queue
//! stays full for `slow_client_timeout` is disconnected.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, RecvTimeoutError, SendTimeoutError, Sender, TrySendError};
use crossbeam::queue::ArrayQueue;
use teleop_core::traj::{Limits, TICK_US};
use teleop_core::{KinematicModel, ACTION_DIM};

use crate::plant::{Plant, PlantError};
use crate::protocol::{
    encode, CommandMsg, FrameDecoder, Message, ProtocolError, Role, ERR_BAD_COMMAND,
    ERR_COMMANDER_OCCUPIED, ERR_MALFORMED,
};

pub const DEFAULT_PORT: u16 = 47853;
pub const DEFAULT_STATE_RATE_HZ: u16 = 30;
pub const MAX_STATE_RATE_HZ: u16 = 1000;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(2);
const COMMAND_QUEUE: usize = 64;
const EVENT_QUEUE: usize = 4096;
const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Realtime,
    Deterministic,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub model: KinematicModel,
    pub limits: Vec<Limits>,
    pub bind: SocketAddr,
    pub mode: Mode,
    /// Starting configuration; the model's neutral pose when absent.
    pub initial_q: Option<Vec<f64>>,
    /// Frames buffered per client before it counts as slow.
    pub outbound_capacity: usize,
    pub slow_client_timeout: Duration,
}

impl ServerConfig {
    pub fn new(model: KinematicModel, mode: Mode) -> Self {
        ServerConfig {
            model,
            limits: vec![Limits::default(); ACTION_DIM],
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            mode,
            initial_q: None,
            outbound_capacity: 4096,
            slow_client_timeout: Duration::from_secs(1),
        }
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.bind.set_port(port);
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Requested rate with 0 meaning the default and values above the maximum
/// clamped.
pub fn effective_rate(requested: u16) -> u16 {
    match requested {
        0 => DEFAULT_STATE_RATE_HZ,
        r => r.min(MAX_STATE_RATE_HZ),
    }
}

/// Whether a client at `rate_hz` gets the state of tick `k`: tick 0 and
/// every tick where `floor(k * rate / 1000)` changes.
pub fn state_due(tick: u64, rate_hz: u16) -> bool {
    let r = rate_hz as u64;
    tick == 0 || (tick * r) / 1000 != ((tick - 1) * r) / 1000
}

enum Event {
    Join {
        id: u64,
        role: Role,
        rate: u16,
        out: Sender<Vec<u8>>,
        stream: TcpStream,
    },
    Leave {
        id: u64,
    },
    Command {
        id: u64,
        msg: CommandMsg,
    },
    Heartbeat {
        id: u64,
        timestamp_us: u64,
    },
}

struct Shared {
    mode: Mode,
    shutdown: AtomicBool,
    commander: Mutex<Option<u64>>,
    commands: ArrayQueue<CommandMsg>,
    events: Sender<Event>,
    outbound_capacity: usize,
    ticks: AtomicU64,
    dropped_commands: AtomicU64,
    slow_disconnects: AtomicU64,
    log: Mutex<Vec<CommandMsg>>,
}

/// Handle of a running server. Dropping it stops the server.
pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn start(cfg: ServerConfig) -> Result<Server, ServerError> {
        let plant = match &cfg.initial_q {
            Some(q) => Plant::with_initial(&cfg.model, cfg.limits.clone(), q.clone())?,
            None => Plant::new(&cfg.model, cfg.limits.clone())?,
        };
        let listener = TcpListener::bind(cfg.bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = channel::bounded(EVENT_QUEUE);
        let shared = Arc::new(Shared {
            mode: cfg.mode,
            shutdown: AtomicBool::new(false),
            commander: Mutex::new(None),
            commands: ArrayQueue::new(COMMAND_QUEUE),
            events: tx,
            outbound_capacity: cfg.outbound_capacity,
            ticks: AtomicU64::new(0),
            dropped_commands: AtomicU64::new(0),
            slow_disconnects: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        });
        let control = Control {
            plant,
            clients: BTreeMap::new(),
            shared: shared.clone(),
            slow_timeout: cfg.slow_client_timeout,
        };
        let loop_thread = {
            let shared = shared.clone();
            thread::Builder::new()
                .name("control".into())
                .spawn(move || match shared.mode {
                    Mode::Realtime => control.run_realtime(rx),
                    Mode::Deterministic => control.run_deterministic(rx),
                })?
        };
        let accept_thread = {
            let shared = shared.clone();
            thread::Builder::new()
                .name("accept".into())
                .spawn(move || accept_loop(listener, shared))?
        };
        Ok(Server {
            addr,
            shared,
            threads: vec![loop_thread, accept_thread],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Control ticks run so far.
    pub fn ticks(&self) -> u64 {
        self.shared.ticks.load(Ordering::SeqCst)
    }

    /// Realtime commands overwritten in the drop-oldest queue.
    pub fn dropped_commands(&self) -> u64 {
        self.shared.dropped_commands.load(Ordering::SeqCst)
    }

    /// Clients dropped for not keeping up with their state stream.
    pub fn slow_disconnects(&self) -> u64 {
        self.shared.slow_disconnects.load(Ordering::SeqCst)
    }

    /// Commands accepted in deterministic mode, in order. Realtime mode
    /// keeps no log.
    pub fn command_log(&self) -> Vec<CommandMsg> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let next_id = AtomicU64::new(1);
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let id = next_id.fetch_add(1, Ordering::SeqCst);
                let shared = shared.clone();
                let _ = thread::Builder::new()
                    .name(format!("client-{id}"))
                    .spawn(move || serve_connection(stream, id, shared));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(_) => thread::sleep(Duration::from_millis(10)),
        }
    }
}

fn send_error_and_close(mut stream: &TcpStream, code: u16, text: &str) {
    if let Ok(bytes) = encode(&Message::Error {
        code,
        text: text.into(),
    }) {
        let _ = stream.write_all(&bytes);
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Reads until the decoder yields a message. `Ok(None)` on a clean close.
fn read_message(
    stream: &mut TcpStream,
    dec: &mut FrameDecoder,
    buf: &mut [u8],
    deadline: Option<Instant>,
    shared: &Shared,
) -> Result<Option<Message>, ProtocolError> {
    loop {
        if let Some(m) = dec.next_message()? {
            return Ok(Some(m));
        }
        if shared.shutdown.load(Ordering::SeqCst) || deadline.is_some_and(|d| Instant::now() >= d) {
            return Ok(None);
        }
        match stream.read(buf) {
            Ok(0) => return Ok(None),
            Ok(n) => dec.push(&buf[..n]),
            Err(e) if is_timeout(&e) => {}
            Err(_) => return Ok(None),
        }
    }
}

fn serve_connection(mut stream: TcpStream, id: u64, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(POLL));
    let mut dec = FrameDecoder::new();
    let mut buf = vec![0u8; 16 * 1024];
    let deadline = Instant::now() + HANDSHAKE_TIMEOUT;
    let (role, rate) = match read_message(&mut stream, &mut dec, &mut buf, Some(deadline), &shared) {
        Ok(Some(Message::Hello {
            role,
            state_rate_hz,
        })) => (role, effective_rate(state_rate_hz)),
        Ok(Some(_)) => return send_error_and_close(&stream, ERR_MALFORMED, "expected HELLO"),
        Ok(None) => return,
        Err(e) => return send_error_and_close(&stream, ERR_MALFORMED, &e.to_string()),
    };
    if role == Role::Commander {
        let mut slot = shared.commander.lock().unwrap();
        if slot.is_some() {
            drop(slot);
            return send_error_and_close(&stream, ERR_COMMANDER_OCCUPIED, "commander slot occupied");
        }
        *slot = Some(id);
    }
    let (out, outbound) = channel::bounded::<Vec<u8>>(shared.outbound_capacity);
    let writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return release(&shared, id, role),
    };
    let _ = thread::Builder::new()
        .name(format!("writer-{id}"))
        .spawn(move || write_loop(writer, outbound));
    let hello = encode(&Message::Hello {
        role,
        state_rate_hz: rate,
    })
    .expect("hello encodes");
    let _ = out.send(hello);
    let joined = stream.try_clone().is_ok_and(|s| {
        shared
            .events
            .send(Event::Join {
                id,
                role,
                rate,
                out: out.clone(),
                stream: s,
            })
            .is_ok()
    });
    if joined {
        read_loop(&mut stream, &mut dec, &mut buf, id, role, &out, &shared);
        let _ = shared.events.send(Event::Leave { id });
    }
    drop(out);
    release(&shared, id, role);
}

fn release(shared: &Shared, id: u64, role: Role) {
    if role == Role::Commander {
        let mut slot = shared.commander.lock().unwrap();
        if *slot == Some(id) {
            *slot = None;
        }
    }
}

fn reply_error(out: &Sender<Vec<u8>>, code: u16, text: &str) {
    if let Ok(bytes) = encode(&Message::Error {
        code,
        text: text.into(),
    }) {
        let _ = out.try_send(bytes);
    }
}

fn read_loop(
    stream: &mut TcpStream,
    dec: &mut FrameDecoder,
    buf: &mut [u8],
    id: u64,
    role: Role,
    out: &Sender<Vec<u8>>,
    shared: &Shared,
) {
    loop {
        let msg = match read_message(stream, dec, buf, None, shared) {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(e) => {
                reply_error(out, ERR_MALFORMED, &e.to_string());
                return;
            }
        };
        match msg {
            Message::Command(c) if role == Role::Commander => match shared.mode {
                Mode::Realtime => {
                    if shared.commands.force_push(c).is_some() {
                        shared.dropped_commands.fetch_add(1, Ordering::SeqCst);
                    }
                }
                Mode::Deterministic => {
                    if shared.events.send(Event::Command { id, msg: c }).is_err() {
                        return;
                    }
                }
            },
            Message::Command(_) => reply_error(out, ERR_BAD_COMMAND, "observers cannot send commands"),
            Message::Heartbeat { timestamp_us } => {
                if shared.events.send(Event::Heartbeat { id, timestamp_us }).is_err() {
                    return;
                }
            }
            Message::Error { .. } => return,
            Message::Hello { .. } | Message::State(_) => {
                reply_error(out, ERR_MALFORMED, "unexpected message from client");
                return;
            }
        }
    }
}

fn write_loop(mut stream: TcpStream, outbound: Receiver<Vec<u8>>) {
    for frame in outbound.iter() {
        if stream.write_all(&frame).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

struct ClientSlot {
    role: Role,
    rate: u16,
    out: Sender<Vec<u8>>,
    stream: TcpStream,
    full_since: Option<Instant>,
}

struct Control {
    plant: Plant,
    clients: BTreeMap<u64, ClientSlot>,
    shared: Arc<Shared>,
    slow_timeout: Duration,
}

impl Control {
    fn stopping(&self) -> bool {
        self.shared.shutdown.load(Ordering::SeqCst)
    }

    fn run_realtime(mut self, events: Receiver<Event>) {
        let period = Duration::from_micros(TICK_US);
        let mut echoes = Vec::new();
        let mut next = Instant::now();
        while !self.stopping() {
            while let Ok(ev) = events.try_recv() {
                match ev {
                    Event::Heartbeat { id, timestamp_us } => echoes.push((id, timestamp_us)),
                    other => self.membership(other),
                }
            }
            while let Some(c) = self.shared.commands.pop() {
                // finite and 19-wide by construction of the decoder
                let _ = self.plant.command_now(&c.targets);
            }
            self.tick();
            for (id, ts) in echoes.drain(..) {
                self.echo(id, ts);
            }
            next += period;
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            } else if now - next > Duration::from_millis(100) {
                next = now;
            }
        }
        self.close_all();
    }

    fn run_deterministic(mut self, events: Receiver<Event>) {
        while !self.stopping() {
            let ev = match events.recv_timeout(POLL) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            };
            match ev {
                Event::Command { id, msg } => {
                    match self.plant.command(msg.timestamp_us, &msg.targets) {
                        Ok(()) => self.shared.log.lock().unwrap().push(msg),
                        Err(e) => {
                            if let Some(c) = self.clients.get(&id) {
                                reply_error(&c.out, ERR_BAD_COMMAND, &e.to_string());
                            }
                        }
                    }
                }
                Event::Heartbeat { id, timestamp_us } => {
                    if self.clients.get(&id).is_some_and(|c| c.role == Role::Commander) {
                        while self.plant.next_tick() * TICK_US <= timestamp_us && !self.stopping() {
                            self.tick();
                        }
                    }
                    self.echo(id, timestamp_us);
                }
                other => self.membership(other),
            }
        }
        self.close_all();
    }

    fn membership(&mut self, ev: Event) {
        match ev {
            Event::Join {
                id,
                role,
                rate,
                out,
                stream,
            } => {
                self.clients.insert(
                    id,
                    ClientSlot {
                        role,
                        rate,
                        out,
                        stream,
                        full_since: None,
                    },
                );
            }
            Event::Leave { id } => {
                self.clients.remove(&id);
            }
            Event::Command { .. } | Event::Heartbeat { .. } => {}
        }
    }

    fn tick(&mut self) {
        let sample = self.plant.step();
        self.shared.ticks.fetch_add(1, Ordering::SeqCst);
        let k = sample.tick;
        let mut frame: Option<Vec<u8>> = None;
        let now = Instant::now();
        let mut gone = Vec::new();
        let blocking = self.shared.mode == Mode::Deterministic;
        for (id, c) in self.clients.iter_mut() {
            if !state_due(k, c.rate) {
                continue;
            }
            let bytes = frame
                .get_or_insert_with(|| encode(&Message::State(self.plant.state_msg())).expect("state encodes"))
                .clone();
            let sent = if blocking && c.role == Role::Commander {
                match c.out.send_timeout(bytes, self.slow_timeout) {
                    Ok(()) => Ok(()),
                    Err(SendTimeoutError::Timeout(_)) => Err(true),
                    Err(SendTimeoutError::Disconnected(_)) => Err(false),
                }
            } else {
                match c.out.try_send(bytes) {
                    Ok(()) => Ok(()),
                    Err(TrySendError::Full(_)) => {
                        let since = *c.full_since.get_or_insert(now);
                        if now - since >= self.slow_timeout {
                            Err(true)
                        } else {
                            continue;
                        }
                    }
                    Err(TrySendError::Disconnected(_)) => Err(false),
                }
            };
            match sent {
                Ok(()) => c.full_since = None,
                Err(slow) => {
                    if slow {
                        let _ = c.stream.shutdown(Shutdown::Both);
                        self.shared.slow_disconnects.fetch_add(1, Ordering::SeqCst);
                    }
                    gone.push(*id);
                }
            }
        }
        for id in gone {
            self.clients.remove(&id);
        }
    }

    fn echo(&mut self, id: u64, timestamp_us: u64) {
        if let Some(c) = self.clients.get(&id) {
            let bytes = encode(&Message::Heartbeat { timestamp_us }).expect("heartbeat encodes");
            let _ = c.out.send_timeout(bytes, self.slow_timeout);
        }
    }

    fn close_all(&mut self) {
        for c in self.clients.values() {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
        self.clients.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_schedule_counts() {
        for rate in [1u16, 30, 77, 500, 1000] {
            let n = (0..1000).filter(|&k| state_due(k, rate)).count();
            assert_eq!(n, rate as usize, "rate {rate}");
        }
        assert!((0..1000).all(|k| state_due(k, 1000)));
    }

    #[test]
    fn rate_defaults_and_cap() {
        assert_eq!(effective_rate(0), 30);
        assert_eq!(effective_rate(45), 45);
        assert_eq!(effective_rate(5000), 1000);
    }
}
