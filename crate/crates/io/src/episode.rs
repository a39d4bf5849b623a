//! episode-v1 recordings.
//!
//! An episode is a directory holding `meta.json` and `records.jsonl`. Each
//! record line is one 30 Hz step. Floats in records are written as the 16
//! hex digits of their IEEE-754 bit pattern, so a write/read round trip is
//! exact and the bytes do not depend on float formatting. Records are
//! flushed line by line; an interrupted session leaves a readable prefix.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teleop_core::{ActionVector, ACTION_DIM};

pub const SCHEMA: &str = "episode-v1";
pub const META_FILE: &str = "meta.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const RATE_HZ: u32 = 30;

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("episode schema \"{found}\", expected \"{SCHEMA}\"")]
    VersionMismatch { found: String },
    #[error("corrupt record on line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("corrupt meta record: {0}")]
    CorruptMeta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub schema: String,
    pub episode_id: String,
    pub task: String,
    pub rate_hz: u32,
    pub action_dim: usize,
    pub steps: usize,
    /// `(steps - 1) / rate_hz`, the time from the first to the last step.
    pub duration_s: f64,
    /// False until the writer is finished.
    pub complete: bool,
    /// Reserved for camera streams.
    pub attachments: Vec<serde_json::Value>,
}

impl EpisodeMeta {
    pub fn new(episode_id: &str, task: &str) -> Self {
        EpisodeMeta {
            schema: SCHEMA.into(),
            episode_id: episode_id.into(),
            task: task.into(),
            rate_hz: RATE_HZ,
            action_dim: ACTION_DIM,
            steps: 0,
            duration_s: 0.0,
            complete: false,
            attachments: Vec::new(),
        }
    }
}

pub fn duration_s(steps: usize, rate_hz: u32) -> f64 {
    if steps == 0 {
        0.0
    } else {
        (steps - 1) as f64 / rate_hz as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub timestamp_us: u64,
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub index: u64,
    pub t: f64,
    pub observation: Observation,
    pub action: ActionVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub steps: Vec<Step>,
}

pub fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn parse_hex_f64(s: &str) -> Option<f64> {
    if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationLine {
    timestamp_us: u64,
    q: Vec<String>,
    dq: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionLine {
    timestamp_us: u64,
    targets: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    i: u64,
    t: String,
    observation: ObservationLine,
    action: ActionLine,
}

fn hex_all(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| hex_f64(*x)).collect()
}

impl StepLine {
    fn from_step(s: &Step) -> Self {
        StepLine {
            i: s.index,
            t: hex_f64(s.t),
            observation: ObservationLine {
                timestamp_us: s.observation.timestamp_us,
                q: hex_all(&s.observation.q),
                dq: hex_all(&s.observation.dq),
            },
            action: ActionLine {
                timestamp_us: s.action.timestamp_us,
                targets: hex_all(&s.action.targets),
            },
        }
    }

    fn into_step(self) -> Result<Step, String> {
        let floats = |field: &str, v: &[String]| -> Result<Vec<f64>, String> {
            if v.len() != ACTION_DIM {
                return Err(format!("{field}: {} values, expected {ACTION_DIM}", v.len()));
            }
            v.iter()
                .map(|s| parse_hex_f64(s).ok_or_else(|| format!("{field}: bad hex float \"{s}\"")))
                .collect()
        };
        Ok(Step {
            index: self.i,
            t: parse_hex_f64(&self.t).ok_or_else(|| format!("t: bad hex float \"{}\"", self.t))?,
            observation: Observation {
                timestamp_us: self.observation.timestamp_us,
                q: floats("observation.q", &self.observation.q)?,
                dq: floats("observation.dq", &self.observation.dq)?,
            },
            action: ActionVector::new(self.action.timestamp_us, floats("action.targets", &self.action.targets)?),
        })
    }
}

fn write_meta(dir: &Path, meta: &EpisodeMeta) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    let tmp = dir.join(".meta.json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, dir.join(META_FILE))
}

pub struct EpisodeWriter {
    dir: PathBuf,
    meta: EpisodeMeta,
    records: BufWriter<File>,
}

impl EpisodeWriter {
    /// Creates the directory if needed and replaces any previous episode in
    /// it.
    pub fn create(dir: impl AsRef<Path>, episode_id: &str, task: &str) -> Result<Self, EpisodeError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let meta = EpisodeMeta::new(episode_id, task);
        write_meta(&dir, &meta)?;
        let records = BufWriter::new(File::create(dir.join(RECORDS_FILE))?);
        Ok(EpisodeWriter { dir, meta, records })
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn push(&mut self, step: &Step) -> Result<(), EpisodeError> {
        serde_json::to_writer(&mut self.records, &StepLine::from_step(step)).map_err(io::Error::from)?;
        self.records.write_all(b"\n")?;
        self.records.flush()?;
        self.meta.steps += 1;
        Ok(())
    }

    /// Rewrites the meta record with the final step count.
    pub fn finish(mut self) -> Result<EpisodeMeta, EpisodeError> {
        self.records.flush()?;
        self.meta.duration_s = duration_s(self.meta.steps, self.meta.rate_hz);
        self.meta.complete = true;
        write_meta(&self.dir, &self.meta)?;
        Ok(self.meta)
    }
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<EpisodeMeta, EpisodeError> {
    let text = fs::read_to_string(dir.as_ref().join(META_FILE))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| EpisodeError::CorruptMeta(e.to_string()))?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(SCHEMA) => {}
        Some(other) => {
            return Err(EpisodeError::VersionMismatch {
                found: other.to_string(),
            })
        }
        None => return Err(EpisodeError::CorruptMeta("missing schema".into())),
    }
    let meta: EpisodeMeta = serde_json::from_value(value).map_err(|e| EpisodeError::CorruptMeta(e.to_string()))?;
    if meta.action_dim != ACTION_DIM {
        return Err(EpisodeError::CorruptMeta(format!("action_dim {}", meta.action_dim)));
    }
    Ok(meta)
}

/// Reads an episode. Incomplete episodes (no final meta) are returned with
/// whatever steps were flushed.
pub fn read_episode(dir: impl AsRef<Path>) -> Result<Episode, EpisodeError> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let reader = BufReader::new(File::open(dir.join(RECORDS_FILE))?);
    let mut steps = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let text = line?;
        let corrupt = |reason: String| EpisodeError::Corrupt {
            line: line_no,
            reason,
        };
        let raw: StepLine = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        let step = raw.into_step().map_err(corrupt)?;
        if step.index != n as u64 {
            return Err(corrupt(format!("step index {}, expected {n}", step.index)));
        }
        steps.push(step);
    }
    if meta.complete && meta.steps != steps.len() {
        return Err(EpisodeError::CorruptMeta(format!(
            "meta lists {} steps, records hold {}",
            meta.steps,
            steps.len()
        )));
    }
    Ok(Episode { meta, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(i: u64) -> Step {
        let x = i as f64;
        Step {
            index: i,
            t: x / 30.0,
            observation: Observation {
                timestamp_us: i * 33_333,
                q: (0..ACTION_DIM).map(|k| (x + k as f64).sin()).collect(),
                dq: (0..ACTION_DIM).map(|k| (x * 0.1 - k as f64) / 7.0).collect(),
            },
            action: ActionVector::new(i * 33_333, (0..ACTION_DIM).map(|k| 1.0 / (1.0 + x + k as f64)).collect()),
        }
    }

    #[test]
    fn hundred_steps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = EpisodeWriter::create(dir.path(), "ep-1", "pick").unwrap();
        let steps: Vec<Step> = (0..100).map(step).collect();
        for s in &steps {
            w.push(s).unwrap();
        }
        let meta = w.finish().unwrap();
        assert!((meta.duration_s - 3.3).abs() <= 1.0 / 30.0);
        assert_eq!(meta.duration_s, 99.0 / 30.0);
        let ep = read_episode(dir.path()).unwrap();
        assert_eq!(ep.steps, steps);
        assert_eq!(ep.meta, meta);
        assert_eq!(ep.meta.attachments.len(), 0);
    }

    #[test]
    fn special_floats_survive() {
        for v in [0.0, -0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, 0.1 + 0.2] {
            let back = parse_hex_f64(&hex_f64(v)).unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
        assert!(parse_hex_f64("3ff").is_none());
        assert!(parse_hex_f64("3ff000000000000g").is_none());
    }

    #[test]
    fn truncated_last_line_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = EpisodeWriter::create(dir.path(), "ep", "t").unwrap();
        for i in 0..5 {
            w.push(&step(i)).unwrap();
        }
        drop(w);
        let path = dir.path().join(RECORDS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 40]).unwrap();
        match read_episode(dir.path()) {
            Err(EpisodeError::Corrupt { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unfinished_episode_keeps_flushed_steps() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = EpisodeWriter::create(dir.path(), "ep", "t").unwrap();
        for i in 0..3 {
            w.push(&step(i)).unwrap();
        }
        drop(w);
        let ep = read_episode(dir.path()).unwrap();
        assert!(!ep.meta.complete);
        assert_eq!(ep.steps.len(), 3);
    }

    #[test]
    fn other_schema_is_a_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        EpisodeWriter::create(dir.path(), "ep", "t").unwrap().finish().unwrap();
        let path = dir.path().join(META_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("episode-v1", "episode-v2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_episode(dir.path()),
            Err(EpisodeError::VersionMismatch { found }) if found == "episode-v2"
        ));
    }
}
