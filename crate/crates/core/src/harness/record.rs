//! Episode records: a JSON header line, one line per tick, and a summary line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::digest::{float_or_inf, sha256_hex};
use crate::scenario::spec::AgentSpec;
use crate::scenario::ScenarioSpec;
use crate::attacks::PatchSpec;
use crate::world::vehicle::{ControlCommand, ControlSource, VehicleState};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub schema_version: u32,
    /// Digest of everything that determines the episode.
    pub run_digest: String,
    pub dt: f64,
    pub label: String,
    pub executor: String,
    pub stack_id: String,
    /// Digest of the caller's effective configuration, when it has one.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub config_digest: String,
    pub scenario: ScenarioSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl From<&VehicleState> for PoseRecord {
    fn from(v: &VehicleState) -> Self {
        Self {
            x: v.position.x,
            y: v.position.y,
            heading: v.heading,
            speed: v.speed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Collision,
    Takeover,
    Release,
    Attack,
    Pause,
    Resume,
    Warning,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub tick: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Mid-episode world edits, replayed at the same tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Insertion {
    Agent(AgentSpec),
    Patch(PatchSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMeta {
    pub method: String,
    /// L∞ distance between the attacked and clean frame.
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    /// Digest of the world at this tick, before the control is applied.
    pub state_digest: String,
    pub ego: PoseRecord,
    pub agents: Vec<PoseRecord>,
    pub control: ControlCommand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perception: Option<Vec<f64>>,
    /// Perception on the unattacked frame, present only when an attack is active.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_perception: Option<Vec<f64>>,
    /// Class of the nearest visible agent.
    pub ground_truth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackMeta>,
    #[serde(with = "float_or_inf")]
    pub ttc: f64,
    #[serde(with = "float_or_inf")]
    pub gap: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub insertions: Vec<Insertion>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
    /// Digest of the world after the control is applied.
    pub next_digest: String,
}

impl TickRecord {
    pub fn source(&self) -> ControlSource {
        self.control.source
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RouteEnd,
    Collision,
    TickLimit,
    /// Ended by the session client.
    Ended,
    /// Executor failure; the record is partial.
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ticks: u64,
    pub termination: Termination,
    pub truncated: bool,
    pub final_ego: PoseRecord,
    pub final_digest: String,
    #[serde(with = "float_or_inf")]
    pub final_ttc: f64,
    #[serde(with = "float_or_inf")]
    pub final_gap: f64,
    pub route_completion: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "line", rename_all = "snake_case")]
enum Line {
    Header(RecordHeader),
    Tick(Box<TickRecord>),
    Summary(Summary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub header: RecordHeader,
    pub ticks: Vec<TickRecord>,
    pub summary: Summary,
}

impl EpisodeRecord {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: &Line| {
            out.push_str(&serde_json::to_string(l).expect("record serializes"));
            out.push('\n');
        };
        push(&Line::Header(self.header.clone()));
        for t in &self.ticks {
            push(&Line::Tick(Box::new(t.clone())));
        }
        push(&Line::Summary(self.summary.clone()));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HarnessError> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn from_lines(lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Self, HarnessError> {
        let bad = |m: String| HarnessError::Record(m);
        let mut header = None;
        let mut ticks = Vec::new();
        let mut summary = None;
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            match parsed {
                Line::Header(h) if header.is_none() && n == 0 => header = Some(h),
                Line::Header(_) => return Err(bad(format!("line {}: unexpected header", n + 1))),
                Line::Tick(_) | Line::Summary(_) if header.is_none() => return Err(bad("missing header".into())),
                Line::Tick(_) | Line::Summary(_) if summary.is_some() => {
                    return Err(bad(format!("line {}: content after summary", n + 1)))
                }
                Line::Tick(t) => {
                    if t.tick != ticks.len() as u64 {
                        return Err(bad(format!("line {}: tick {} out of sequence", n + 1, t.tick)));
                    }
                    ticks.push(*t);
                }
                Line::Summary(s) => summary = Some(s),
            }
        }
        let header = header.ok_or_else(|| bad("missing header".into()))?;
        if header.schema_version != RECORD_SCHEMA_VERSION {
            return Err(bad(format!("unsupported record schema {}", header.schema_version)));
        }
        let summary = summary.ok_or_else(|| bad("missing summary".into()))?;
        Ok(Self { header, ticks, summary })
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_lines(BufReader::new(File::open(path)?).lines())
    }

    /// Per-tick control source, in tick order.
    pub fn sources(&self) -> Vec<ControlSource> {
        self.ticks.iter().map(|t| t.source()).collect()
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.ticks.iter().flat_map(|t| t.events.iter())
    }

    /// Digest sequence of the state trace: every pre-control state plus the final one.
    pub fn state_trace(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.ticks.iter().map(|t| t.state_digest.as_str()).collect();
        v.push(&self.summary.final_digest);
        v
    }
}
