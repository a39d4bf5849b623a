//! Framed binary wire protocol.
//!
//! Every frame is a 12-byte header followed by the payload:
//!
//! ```text
//! 0  magic        "LFRX"
//! 4  version      u8 = 1
//! 5  msg_type     u8
//! 6  reserved     2 zero bytes
//! 8  payload_len  u32 LE, at most 65536
//! 12 payload
//! ```
//!
//! All integers and floats are little-endian.

use serde::{Deserialize, Serialize};
use teleop_core::ACTION_DIM;

pub const MAGIC: [u8; 4] = *b"LFRX";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_PAYLOAD: usize = 65536;

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_COMMAND: u8 = 0x02;
pub const MSG_STATE: u8 = 0x03;
pub const MSG_HEARTBEAT: u8 = 0x04;
pub const MSG_ERROR: u8 = 0x05;

pub const ERR_COMMANDER_OCCUPIED: u16 = 1;
pub const ERR_MALFORMED: u16 = 2;
pub const ERR_BAD_COMMAND: u16 = 3;

const HELLO_LEN: usize = 3;
const COMMAND_LEN: usize = 8 + 1 + 8 * ACTION_DIM;
const STATE_LEN: usize = 8 + 1 + 16 * ACTION_DIM;
const HEARTBEAT_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed frame at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("message cannot be encoded: {0}")]
    Unencodable(String),
}

fn malformed(offset: usize, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed {
        offset,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Commander = 1,
    Observer = 2,
}

impl Role {
    pub fn from_u8(v: u8) -> Option<Role> {
        match v {
            1 => Some(Role::Commander),
            2 => Some(Role::Observer),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Commander => "commander",
            Role::Observer => "observer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandMsg {
    pub timestamp_us: u64,
    pub targets: [f64; ACTION_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateMsg {
    pub timestamp_us: u64,
    pub q: [f64; ACTION_DIM],
    pub dq: [f64; ACTION_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { role: Role, state_rate_hz: u16 },
    Command(CommandMsg),
    State(StateMsg),
    Heartbeat { timestamp_us: u64 },
    Error { code: u16, text: String },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello { .. } => MSG_HELLO,
            Message::Command(_) => MSG_COMMAND,
            Message::State(_) => MSG_STATE,
            Message::Heartbeat { .. } => MSG_HEARTBEAT,
            Message::Error { .. } => MSG_ERROR,
        }
    }
}

fn put_floats(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes one message into a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let mut payload = Vec::new();
    match msg {
        Message::Hello {
            role,
            state_rate_hz,
        } => {
            payload.push(*role as u8);
            payload.extend_from_slice(&state_rate_hz.to_le_bytes());
        }
        Message::Command(c) => {
            if !c.targets.iter().all(|v| v.is_finite()) {
                return Err(ProtocolError::Unencodable("non-finite command target".into()));
            }
            payload.extend_from_slice(&c.timestamp_us.to_le_bytes());
            payload.push(ACTION_DIM as u8);
            put_floats(&mut payload, &c.targets);
        }
        Message::State(s) => {
            payload.extend_from_slice(&s.timestamp_us.to_le_bytes());
            payload.push(ACTION_DIM as u8);
            put_floats(&mut payload, &s.q);
            put_floats(&mut payload, &s.dq);
        }
        Message::Heartbeat { timestamp_us } => {
            payload.extend_from_slice(&timestamp_us.to_le_bytes());
        }
        Message::Error { code, text } => {
            payload.extend_from_slice(&code.to_le_bytes());
            payload.extend_from_slice(text.as_bytes());
        }
    }
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Unencodable(format!(
            "payload of {} bytes exceeds {MAX_PAYLOAD}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Checks whatever part of the header is present. Returns the payload
/// length once the full header is available.
fn check_header(buf: &[u8]) -> Result<Option<usize>, ProtocolError> {
    for (i, (&got, &want)) in buf.iter().zip(MAGIC.iter()).enumerate() {
        if got != want {
            return Err(malformed(i, "bad magic"));
        }
    }
    if buf.len() > 4 && buf[4] != VERSION {
        return Err(ProtocolError::UnsupportedVersion(buf[4]));
    }
    if buf.len() > 5 && !(MSG_HELLO..=MSG_ERROR).contains(&buf[5]) {
        return Err(ProtocolError::UnknownType(buf[5]));
    }
    for i in 6..8.min(buf.len()) {
        if buf[i] != 0 {
            return Err(malformed(i, "reserved byte is not zero"));
        }
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(malformed(8, format!("payload length {len} exceeds {MAX_PAYLOAD}")));
    }
    let expected = match buf[5] {
        MSG_HELLO => Some(HELLO_LEN),
        MSG_COMMAND => Some(COMMAND_LEN),
        MSG_STATE => Some(STATE_LEN),
        MSG_HEARTBEAT => Some(HEARTBEAT_LEN),
        _ => None,
    };
    match expected {
        Some(n) if n != len => Err(malformed(8, format!("payload length {len}, expected {n}"))),
        None if len < 2 => Err(malformed(8, "error payload shorter than its code")),
        _ => Ok(Some(len)),
    }
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn read_floats<const N: usize>(b: &[u8], at: usize, finite: bool) -> Result<[f64; N], ProtocolError> {
    let mut out = [0.0; N];
    for (i, v) in out.iter_mut().enumerate() {
        let off = at + 8 * i;
        *v = f64::from_le_bytes(b[off..off + 8].try_into().unwrap());
        if finite && !v.is_finite() {
            return Err(malformed(off, "non-finite value"));
        }
    }
    Ok(out)
}

fn decode_payload(kind: u8, frame: &[u8]) -> Result<Message, ProtocolError> {
    let p = HEADER_LEN;
    match kind {
        MSG_HELLO => {
            let role = Role::from_u8(frame[p]).ok_or_else(|| malformed(p, format!("unknown role {}", frame[p])))?;
            let state_rate_hz = u16::from_le_bytes([frame[p + 1], frame[p + 2]]);
            Ok(Message::Hello {
                role,
                state_rate_hz,
            })
        }
        MSG_COMMAND | MSG_STATE => {
            let timestamp_us = read_u64(frame, p);
            let n = frame[p + 8];
            if n as usize != ACTION_DIM {
                return Err(malformed(p + 8, format!("{n} joints, expected {ACTION_DIM}")));
            }
            if kind == MSG_COMMAND {
                Ok(Message::Command(CommandMsg {
                    timestamp_us,
                    targets: read_floats(frame, p + 9, true)?,
                }))
            } else {
                Ok(Message::State(StateMsg {
                    timestamp_us,
                    q: read_floats(frame, p + 9, false)?,
                    dq: read_floats(frame, p + 9 + 8 * ACTION_DIM, false)?,
                }))
            }
        }
        MSG_HEARTBEAT => Ok(Message::Heartbeat {
            timestamp_us: read_u64(frame, p),
        }),
        MSG_ERROR => {
            let code = u16::from_le_bytes([frame[p], frame[p + 1]]);
            let text = std::str::from_utf8(&frame[p + 2..])
                .map_err(|e| malformed(p + 2 + e.valid_up_to(), "invalid utf-8"))?
                .to_string();
            Ok(Message::Error { code, text })
        }
        other => Err(ProtocolError::UnknownType(other)),
    }
}

/// Decodes the frame at the start of `buf`. `Ok(None)` means more bytes are
/// needed; otherwise returns the message and the number of bytes consumed.
pub fn decode_prefix(buf: &[u8]) -> Result<Option<(Message, usize)>, ProtocolError> {
    let len = match check_header(buf)? {
        Some(len) => len,
        None => return Ok(None),
    };
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Ok(None);
    }
    let msg = decode_payload(buf[5], &buf[..total])?;
    Ok(Some((msg, total)))
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    match decode_prefix(bytes)? {
        Some((msg, used)) if used == bytes.len() => Ok(msg),
        Some((_, used)) => Err(malformed(used, "trailing bytes after frame")),
        None => Err(malformed(bytes.len(), "truncated frame")),
    }
}

/// Incremental decoder for a byte stream split at arbitrary points.
///
/// Errors are sticky: once a frame is rejected the stream cannot be
/// resynchronized and every later call returns the same error. Offsets in
/// errors are absolute stream positions.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    consumed: usize,
    failed: Option<ProtocolError>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        } else if self.start > 1 << 16 {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, if any.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        if let Some(e) = &self.failed {
            return Err(e.clone());
        }
        match decode_prefix(&self.buf[self.start..]) {
            Ok(Some((msg, used))) => {
                self.start += used;
                self.consumed += used;
                Ok(Some(msg))
            }
            Ok(None) => Ok(None),
            Err(e) => {
                let e = match e {
                    ProtocolError::Malformed { offset, reason } => ProtocolError::Malformed {
                        offset: offset + self.consumed,
                        reason,
                    },
                    other => other,
                };
                self.failed = Some(e.clone());
                Err(e)
            }
        }
    }

    /// Bytes of the trailing partial frame.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Total bytes consumed by complete frames.
    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heartbeat_golden_bytes() {
        let bytes = encode(&Message::Heartbeat { timestamp_us: 0 }).unwrap();
        let mut want = vec![0x4C, 0x46, 0x52, 0x58, 0x01, 0x04, 0x00, 0x00, 0x08, 0x00, 0x00, 0x00];
        want.extend_from_slice(&[0; 8]);
        assert_eq!(bytes, want);
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let mut bytes = encode(&Message::Heartbeat { timestamp_us: 7 }).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(ProtocolError::Malformed { offset: 0, .. })));
    }

    #[test]
    fn header_faults() {
        let good = encode(&Message::Heartbeat { timestamp_us: 7 }).unwrap();
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(decode(&b), Err(ProtocolError::UnsupportedVersion(2)));
        let mut b = good.clone();
        b[5] = 0x09;
        assert_eq!(decode(&b), Err(ProtocolError::UnknownType(0x09)));
        let mut b = good.clone();
        b[7] = 1;
        assert!(matches!(decode(&b), Err(ProtocolError::Malformed { offset: 7, .. })));
        assert!(matches!(decode(&good[..15]), Err(ProtocolError::Malformed { offset: 15, .. })));
        let mut b = good.clone();
        b.push(0);
        assert!(matches!(decode(&b), Err(ProtocolError::Malformed { offset: 20, .. })));
    }

    #[test]
    fn oversized_length_is_rejected_before_payload_arrives() {
        let mut b = encode(&Message::Error {
            code: 1,
            text: String::new(),
        })
        .unwrap();
        b[8..12].copy_from_slice(&(MAX_PAYLOAD as u32 + 1).to_le_bytes());
        assert!(matches!(decode_prefix(&b), Err(ProtocolError::Malformed { offset: 8, .. })));
    }

    #[test]
    fn command_joint_count_and_finiteness() {
        let msg = Message::Command(CommandMsg {
            timestamp_us: 5,
            targets: [0.25; ACTION_DIM],
        });
        let good = encode(&msg).unwrap();
        let mut b = good.clone();
        b[HEADER_LEN + 8] = 18;
        assert!(matches!(decode(&b), Err(ProtocolError::Malformed { offset: 20, .. })));
        let mut b = good;
        let at = HEADER_LEN + 9 + 8 * 3;
        b[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&b), Err(ProtocolError::Malformed { offset, .. }) if offset == at));
        let nan = Message::Command(CommandMsg {
            timestamp_us: 0,
            targets: [f64::INFINITY; ACTION_DIM],
        });
        assert!(encode(&nan).is_err());
    }

    #[test]
    fn error_text_must_be_utf8() {
        let mut b = encode(&Message::Error {
            code: 2,
            text: "ab".into(),
        })
        .unwrap();
        let n = b.len();
        b[n - 1] = 0xff;
        assert!(matches!(decode(&b), Err(ProtocolError::Malformed { offset, .. }) if offset == n - 1));
    }

    #[test]
    fn decoder_is_sticky_after_error() {
        let mut d = FrameDecoder::new();
        let good = encode(&Message::Heartbeat { timestamp_us: 1 }).unwrap();
        d.push(&good);
        d.push(b"LFRY");
        assert!(d.next_message().unwrap().is_some());
        let e = d.next_message().unwrap_err();
        assert!(matches!(e, ProtocolError::Malformed { offset: 23, .. }));
        d.push(&good);
        assert_eq!(d.next_message().unwrap_err(), e);
    }
}
