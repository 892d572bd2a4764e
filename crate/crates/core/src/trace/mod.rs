//! Replay logs.
//!
//! A log is a header plus a dense, totally ordered event sequence. The
//! runtime appends an event for every boundary crossing (effect requests and
//! responses, api entry and exit) and every scheduling decision, so a run
//! can be re-executed with no live environment: effect responses and batch
//! choices are read back from the log, every other event is regenerated and
//! compared.
//!
//! On disk (`.ektrace`):
//!
//! ```text
//! EKTRACE1 <canonical header JSON>
//! <byte length> <canonical event JSON>
//! ...
//! digest sha256:<hex digest of every preceding byte>
//! ```

mod timeline;

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::canon;

pub use timeline::{merge_timelines, RemoteCall, Timeline, TimelineEntry, RPC_CAPABILITY};

pub const MAGIC: &str = "EKTRACE1";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    ApiEnter,
    ApiExit,
    Spawn,
    ScheduleChoice,
    EffectRequest,
    EffectResponse,
    Yield,
    /// A task discarded by a `yield` or a failure before it completed.
    Cancel,
    SnapshotMark,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::ApiEnter,
        EventKind::ApiExit,
        EventKind::Spawn,
        EventKind::ScheduleChoice,
        EventKind::EffectRequest,
        EventKind::EffectResponse,
        EventKind::Yield,
        EventKind::Cancel,
        EventKind::SnapshotMark,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::ApiEnter => "ApiEnter",
            EventKind::ApiExit => "ApiExit",
            EventKind::Spawn => "Spawn",
            EventKind::ScheduleChoice => "ScheduleChoice",
            EventKind::EffectRequest => "EffectRequest",
            EventKind::EffectResponse => "EffectResponse",
            EventKind::Yield => "Yield",
            EventKind::Cancel => "Cancel",
            EventKind::SnapshotMark => "SnapshotMark",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        EventKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_effect(self) -> bool {
        matches!(self, EventKind::EffectRequest | EventKind::EffectResponse)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 128 bits, rendered as 32 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CorrelationId(String);

impl CorrelationId {
    /// Minted from the node id and the node's invocation counter, so ids are
    /// reproducible and never depend on the host.
    pub fn mint(node: &str, counter: u64) -> CorrelationId {
        let mut input = Vec::with_capacity(node.len() + 9);
        input.extend_from_slice(node.as_bytes());
        input.push(0);
        input.extend_from_slice(&counter.to_le_bytes());
        CorrelationId(canon::sha256_hex(&input)[..32].to_string())
    }

    pub fn parse(s: &str) -> Option<CorrelationId> {
        let ok = s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        ok.then(|| CorrelationId(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CorrelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub corr: CorrelationId,
    pub payload: Json,
}

impl TraceEvent {
    pub fn to_json(&self) -> Json {
        json!({
            "seq": self.seq,
            "kind": self.kind.name(),
            "corr": self.corr.as_str(),
            "payload": self.payload,
        })
    }

    pub fn to_canonical(&self) -> String {
        canon::to_string(&self.to_json())
    }

    pub fn from_json(j: &Json) -> Option<TraceEvent> {
        let obj = j.as_object().filter(|o| o.len() == 4)?;
        Some(TraceEvent {
            seq: obj.get("seq")?.as_u64()?,
            kind: EventKind::parse(obj.get("kind")?.as_str()?)?,
            corr: CorrelationId::parse(obj.get("corr")?.as_str()?)?,
            payload: obj.get("payload")?.clone(),
        })
    }

    /// Payload field accessor.
    pub fn get(&self, key: &str) -> Option<&Json> {
        self.payload.get(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogHeader {
    pub program_hash: String,
    pub node: String,
    /// Scheduler, collector and limit settings of the recording runtime.
    pub config: Json,
}

impl LogHeader {
    fn to_json(&self) -> Json {
        json!({
            "format": FORMAT_VERSION,
            "program_hash": self.program_hash,
            "node": self.node,
            "config": self.config,
        })
    }
}

/// A node's recorded history: one or more api invocations, each framed by
/// `ApiEnter` … `ApiExit`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayLog {
    pub header: LogHeader,
    pub events: Vec<TraceEvent>,
    /// Encoded snapshots keyed by the seq of their `SnapshotMark`.
    pub snapshots: BTreeMap<u64, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogError {
    #[error("not a replay log (bad header line)")]
    BadHeader,
    #[error("unsupported log format {0}")]
    Version(u64),
    #[error("log digest mismatch: the file was modified")]
    Digest,
    #[error("malformed event on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("events are not densely numbered from 0 (line {line})")]
    Sequence { line: usize },
}

/// The first point where a replay disagreed with its log.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("replay diverged on node `{node}` at seq {seq}: {reason}")]
pub struct ReplayDivergence {
    pub node: String,
    pub seq: u64,
    pub reason: String,
}

impl ReplayLog {
    pub fn new(header: LogHeader) -> ReplayLog {
        ReplayLog {
            header,
            events: Vec::new(),
            snapshots: BTreeMap::new(),
        }
    }

    pub fn effect_events(&self) -> usize {
        self.events.iter().filter(|e| e.kind.is_effect()).count()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// `(ApiEnter index, ApiExit index)` for each complete invocation.
    pub fn invocations(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut open = None;
        for (i, e) in self.events.iter().enumerate() {
            match e.kind {
                EventKind::ApiEnter => open = Some(i),
                EventKind::ApiExit => {
                    if let Some(start) = open.take() {
                        out.push((start, i));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Final results (payload of each `ApiExit`), in order.
    pub fn results(&self) -> Vec<&Json> {
        self.events.iter().filter(|e| e.kind == EventKind::ApiExit).filter_map(|e| e.get("result")).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {}\n", canon::to_string(&self.header.to_json()));
        for e in &self.events {
            let line = e.to_canonical();
            out.push_str(&format!("{} {line}\n", line.len()));
        }
        let digest = canon::sha256_hex(out.as_bytes());
        out.push_str(&format!("digest sha256:{digest}\n"));
        out.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<ReplayLog, LogError> {
        let text = std::str::from_utf8(bytes).map_err(|_| LogError::BadHeader)?;
        let body_end = text.trim_end_matches('\n').rfind('\n').map(|i| i + 1).ok_or(LogError::BadHeader)?;
        let (body, digest_line) = text.split_at(body_end);
        let expected = format!("digest sha256:{}\n", canon::sha256_hex(body.as_bytes()));
        if digest_line != expected {
            return Err(LogError::Digest);
        }
        let mut lines = body.split_terminator('\n');
        let header_text = lines.next().and_then(|l| l.strip_prefix(MAGIC)).and_then(|l| l.strip_prefix(' '));
        let header_json: Json = header_text
            .and_then(|t| serde_json::from_str(t).ok().filter(|j| canon::to_string(j) == t))
            .ok_or(LogError::BadHeader)?;
        let version = header_json.get("format").and_then(Json::as_u64).ok_or(LogError::BadHeader)?;
        if version != FORMAT_VERSION {
            return Err(LogError::Version(version));
        }
        let field = |k: &str| header_json.get(k).and_then(Json::as_str).map(str::to_string).ok_or(LogError::BadHeader);
        let header = LogHeader {
            program_hash: field("program_hash")?,
            node: field("node")?,
            config: header_json.get("config").cloned().ok_or(LogError::BadHeader)?,
        };
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let malformed = |reason: &str| LogError::Malformed {
                line: lineno,
                reason: reason.to_string(),
            };
            let (len, json_text) = line.split_once(' ').ok_or_else(|| malformed("missing length prefix"))?;
            if len.parse::<usize>().ok() != Some(json_text.len()) || len.starts_with('0') && len != "0" {
                return Err(malformed("length prefix does not match"));
            }
            let j: Json = serde_json::from_str(json_text).map_err(|_| malformed("not JSON"))?;
            if canon::to_string(&j) != json_text {
                return Err(malformed("not in canonical form"));
            }
            let event = TraceEvent::from_json(&j).ok_or_else(|| malformed("not an event"))?;
            if event.seq != events.len() as u64 {
                return Err(LogError::Sequence { line: lineno });
            }
            events.push(event);
        }
        Ok(ReplayLog {
            header,
            events,
            snapshots: BTreeMap::new(),
        })
    }
}

/// Rewrites the trailing digest of an encoded log to match its body.
/// Replay then judges an edited log on its events alone; tests use it to
/// check that edits are caught by replay and not only by the digest.
pub fn reseal(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let trimmed = text.trim_end_matches('\n');
    let body = match trimmed.rfind('\n') {
        Some(i) if trimmed[i + 1..].starts_with("digest ") => &text[..i + 1],
        _ => &text[..],
    };
    let mut out = body.to_string();
    if !out.ends_with('\n') {
        out.push('\n');
    }
    let digest = canon::sha256_hex(out.as_bytes());
    out.push_str(&format!("digest sha256:{digest}\n"));
    out.into_bytes()
}
