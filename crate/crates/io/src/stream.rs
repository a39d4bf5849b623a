//! stream-v1 tracking files: one JSON header line, then one record per line.
//!
//! ```text
//! {"format":"stream-v1","rate_hz":30,"landmark_convention":"mediapipe-21"}
//! {"t":0.0,"wrist":{"p":[x,y,z],"q":[w,x,y,z]},"landmarks":[[x,y,z], ... 21 ...]}
//! ```
//!
//! A record may carry `"engage": true|false`; see the pipeline for its use.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use teleop_core::hand::NUM_LANDMARKS;
use teleop_core::{HandFrame, Pose, Quat};

pub const FORMAT: &str = "stream-v1";
pub const RATE_HZ: u32 = 30;
pub const LANDMARK_CONVENTION: &str = "mediapipe-21";
/// Allowed deviation of the wrist quaternion norm from 1.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("line {line}: time goes backwards")]
    NonMonotoneTime { line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StreamError {
    pub fn line(&self) -> Option<usize> {
        match self {
            StreamError::Schema { line, .. } | StreamError::NonMonotoneTime { line } => Some(*line),
            StreamError::Io(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamHeader {
    pub format: String,
    pub rate_hz: u32,
    pub landmark_convention: String,
}

impl Default for StreamHeader {
    fn default() -> Self {
        StreamHeader {
            format: FORMAT.into(),
            rate_hz: RATE_HZ,
            landmark_convention: LANDMARK_CONVENTION.into(),
        }
    }
}

impl StreamHeader {
    pub fn validate(&self) -> Result<(), String> {
        if self.format != FORMAT {
            return Err(format!("format: expected \"{FORMAT}\", got \"{}\"", self.format));
        }
        if self.rate_hz == 0 {
            return Err("rate_hz: must be positive".into());
        }
        if self.landmark_convention != LANDMARK_CONVENTION {
            return Err(format!(
                "landmark_convention: expected \"{LANDMARK_CONVENTION}\", got \"{}\"",
                self.landmark_convention
            ));
        }
        Ok(())
    }
}

/// Pose as it appears in JSON: position and scalar-first quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePose {
    pub p: [f64; 3],
    pub q: [f64; 4],
}

impl WirePose {
    /// Checks finiteness and the quaternion norm. The quaternion is kept
    /// as given. Errors start with the offending field (`.p`, `.q`).
    pub fn to_pose(&self) -> Result<Pose, String> {
        let (p, q) = (&self.p, &self.q);
        if !p.iter().chain(q.iter()).all(|v| v.is_finite()) {
            return Err(": not finite".into());
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(format!(".q: norm {n} is not 1"));
        }
        Ok(Pose {
            p: Vector3::from(*p),
            q: Quat::from_raw(q[0], q[1], q[2], q[3]),
        })
    }
}

impl From<&Pose> for WirePose {
    fn from(pose: &Pose) -> Self {
        WirePose {
            p: [pose.p.x, pose.p.y, pose.p.z],
            q: pose.q.to_wxyz(),
        }
    }
}

/// Raw record. Landmarks stay a `Vec` so that a wrong count is reported as
/// a schema error rather than a parse failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingRecord {
    pub t: f64,
    pub wrist: WirePose,
    pub landmarks: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engage: Option<bool>,
}

/// A validated record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedFrame {
    pub frame: HandFrame,
    pub engage: Option<bool>,
}

impl TrackedFrame {
    pub fn to_record(&self) -> TrackingRecord {
        TrackingRecord {
            t: self.frame.t,
            wrist: WirePose::from(&self.frame.wrist),
            landmarks: self.frame.landmarks.iter().map(|l| [l.x, l.y, l.z]).collect(),
            engage: self.engage,
        }
    }
}

impl TrackingRecord {
    /// Checks the record and converts it. Errors are `field: reason`.
    pub fn validate(&self) -> Result<TrackedFrame, String> {
        if self.landmarks.len() != NUM_LANDMARKS {
            return Err(format!("landmarks: expected {NUM_LANDMARKS}"));
        }
        if !self.t.is_finite() {
            return Err("t: not finite".into());
        }
        let wrist = self.wrist.to_pose().map_err(|e| format!("wrist{e}"))?;
        let mut landmarks = [Vector3::zeros(); NUM_LANDMARKS];
        for (i, (out, l)) in landmarks.iter_mut().zip(&self.landmarks).enumerate() {
            if !l.iter().all(|v| v.is_finite()) {
                return Err(format!("landmarks[{i}]: not finite"));
            }
            *out = Vector3::from(*l);
        }
        Ok(TrackedFrame {
            frame: HandFrame {
                t: self.t,
                wrist,
                landmarks,
            },
            engage: self.engage,
        })
    }
}

/// Parses and validates one record line.
pub fn parse_record(text: &str, line: usize) -> Result<TrackedFrame, StreamError> {
    let rec: TrackingRecord = serde_json::from_str(text).map_err(|e| StreamError::Schema {
        line,
        reason: e.to_string(),
    })?;
    rec.validate().map_err(|reason| StreamError::Schema { line, reason })
}

/// Nondecreasing-time check shared by file and live input.
#[derive(Debug, Clone, Default)]
pub struct TimeCheck {
    last: Option<f64>,
}

impl TimeCheck {
    pub fn check(&mut self, t: f64, line: usize) -> Result<(), StreamError> {
        if self.last.is_some_and(|last| t < last) {
            return Err(StreamError::NonMonotoneTime { line });
        }
        self.last = Some(t);
        Ok(())
    }
}

/// Line-by-line reader. Line numbers are 1-based with the header on line 1.
pub struct StreamReader<R> {
    lines: io::Lines<R>,
    header: StreamHeader,
    line: usize,
    time: TimeCheck,
    done: bool,
}

impl StreamReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StreamError> {
        StreamReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: BufRead> StreamReader<R> {
    pub fn new(input: R) -> Result<Self, StreamError> {
        let mut lines = input.lines();
        let first = lines.next().transpose()?.ok_or_else(|| StreamError::Schema {
            line: 1,
            reason: "missing header".into(),
        })?;
        let header: StreamHeader = serde_json::from_str(&first).map_err(|e| StreamError::Schema {
            line: 1,
            reason: e.to_string(),
        })?;
        header
            .validate()
            .map_err(|reason| StreamError::Schema { line: 1, reason })?;
        Ok(StreamReader {
            lines,
            header,
            line: 1,
            time: TimeCheck::default(),
            done: false,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<TrackedFrame, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let out = parse_record(&text, self.line)
                .and_then(|f| self.time.check(f.frame.t, self.line).map(|_| f));
            self.done = out.is_err();
            return Some(out);
        }
    }
}

/// Reads and validates a whole file.
pub fn read_stream(path: impl AsRef<Path>) -> Result<Vec<TrackedFrame>, StreamError> {
    StreamReader::open(path)?.collect()
}

pub struct StreamWriter<W: Write> {
    out: W,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut out: W, header: &StreamHeader) -> io::Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(StreamWriter { out })
    }

    pub fn write(&mut self, frame: &TrackedFrame) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, &frame.to_record())?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Serializes frames into stream-v1 text.
pub fn to_stream_string(frames: &[TrackedFrame]) -> String {
    let mut w = StreamWriter::new(Vec::new(), &StreamHeader::default()).expect("in-memory write");
    for f in frames {
        w.write(f).expect("in-memory write");
    }
    String::from_utf8(w.into_inner()).expect("json is utf-8")
}
