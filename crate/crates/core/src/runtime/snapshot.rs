//! Logical snapshots of a running invocation.
//!
//! A snapshot is the heap snapshot of every value a task can still reach
//! plus a continuation: each task's frames (function, pc, register
//! contents), pending children and finished results, and the scheduler
//! counters. Register values are heap roots named after their position
//! (`t3.f0.r5` is task 3, frame 0, register 5), so the encoding contains no
//! addresses and is identical on every host and worker count.
//!
//! `.eksnap` layout: heap snapshot length (u64 little endian), the heap
//! snapshot bytes, then the canonical continuation text.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value as Json};
use thiserror::Error;

use super::driver::Invocation;
use super::exec::{Body, EffectTask, Frame, InFlight, Slot, State, Task, TaskResult};
use super::failure::{FailureObject, Origin};
use super::{replay_runtime, InvocationStats, Outcome, Runtime};
use crate::bapi::{from_json, to_json};
use crate::canon;
use crate::heap::{HeapSnapshot, ValueHandle};
use crate::lang::{program_hash, Program};
use crate::trace::{CorrelationId, ReplayDivergence, ReplayLog};

const FORMAT: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResumeError {
    #[error("snapshot was taken from program {found}, not {expected}")]
    SnapshotIncompatible { expected: String, found: String },
    #[error("malformed snapshot: {0}")]
    Malformed(String),
    #[error("log has no snapshot at seq {0}")]
    NoSnapshot(u64),
    #[error(transparent)]
    Divergence(#[from] ReplayDivergence),
}

/// A decoded `.eksnap` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotFile {
    pub heap: HeapSnapshot,
    pub continuation: Json,
}

impl SnapshotFile {
    pub fn encode(&self) -> Vec<u8> {
        let heap = self.heap.as_bytes();
        let mut out = Vec::with_capacity(8 + heap.len() + 256);
        out.extend_from_slice(&(heap.len() as u64).to_le_bytes());
        out.extend_from_slice(heap);
        out.extend_from_slice(canon::to_string(&self.continuation).as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<SnapshotFile, ResumeError> {
        let bad = |m: &str| ResumeError::Malformed(m.to_string());
        let len = bytes.get(..8).ok_or_else(|| bad("truncated"))?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes"));
        let end = usize::try_from(len).ok().and_then(|l| l.checked_add(8)).filter(|e| *e <= bytes.len());
        let end = end.ok_or_else(|| bad("heap section length"))?;
        let heap = HeapSnapshot::from_bytes(bytes[8..end].to_vec()).map_err(|e| bad(&e.to_string()))?;
        let text = std::str::from_utf8(&bytes[end..]).map_err(|_| bad("continuation is not UTF-8"))?;
        let continuation: Json = serde_json::from_str(text).map_err(|_| bad("continuation is not JSON"))?;
        if canon::to_string(&continuation) != text {
            return Err(bad("continuation is not canonical"));
        }
        if continuation.get("format").and_then(Json::as_u64) != Some(FORMAT) {
            return Err(bad("unknown continuation format"));
        }
        Ok(SnapshotFile { heap, continuation })
    }

    pub fn program_hash(&self) -> Option<&str> {
        self.continuation.get("program_hash").and_then(Json::as_str)
    }

    /// Seq of the `SnapshotMark` this snapshot belongs to.
    pub fn seq(&self) -> Option<u64> {
        self.continuation.get("seq").and_then(Json::as_u64)
    }
}

pub(crate) fn capture(rt: &Runtime, inv: &Invocation) -> Vec<u8> {
    let mut roots: BTreeMap<String, ValueHandle> = BTreeMap::new();
    let mut tasks = Vec::new();
    for t in inv.tasks.values() {
        let body = match &t.body {
            Body::Local(frames) => {
                let frames: Vec<Json> = frames
                    .iter()
                    .enumerate()
                    .map(|(fi, f)| {
                        let regs: Vec<Json> = f
                            .regs
                            .iter()
                            .enumerate()
                            .map(|(ri, s)| match s {
                                Slot::Empty => Json::Null,
                                Slot::Val(h) => {
                                    roots.insert(format!("t{}.f{fi}.r{ri}", t.id), *h);
                                    json!("val")
                                }
                                Slot::Pending(c) => json!({"pending": c}),
                            })
                            .collect();
                        json!({
                            "fn": rt.code.functions[f.func].name,
                            "pc": f.pc,
                            "ret": f.ret,
                            "regs": regs,
                        })
                    })
                    .collect();
                json!({"frames": frames})
            }
            Body::Effect(e) => {
                assert!(e.in_flight.is_none(), "snapshots are taken at quiescent points");
                for (i, h) in e.args.iter().enumerate() {
                    roots.insert(format!("t{}.a{i}", t.id), *h);
                }
                json!({"effect": {
                    "capability": e.capability,
                    "operation": e.operation,
                    "args": e.args.len(),
                    "origin": {"function": e.origin.function, "statement": e.origin.statement},
                }})
            }
        };
        let state = match t.state {
            State::Ready => json!("ready"),
            State::Blocked(c) => json!({"blocked": c}),
        };
        tasks.push(json!({
            "id": t.id,
            "parent": t.parent,
            "children": t.children,
            "joined": t.joined,
            "instructions": t.instructions,
            "state": state,
            "body": body,
        }));
    }
    let mut results = Vec::new();
    for (id, r) in &inv.results {
        match r {
            TaskResult::Success(h) => {
                roots.insert(format!("r{id}"), *h);
                results.push(json!({"task": id, "success": true}));
            }
            TaskResult::Failure(f) => results.push(json!({"task": id, "failure": to_json(&f.to_value())})),
            TaskResult::EffectFailure(f) => results.push(json!({"task": id, "effect_failure": to_json(&f.to_value())})),
        }
    }
    let heap = HeapSnapshot::capture(&rt.heap.lock(), &roots);
    let s = &inv.stats;
    let continuation = json!({
        "format": FORMAT,
        "program_hash": rt.program_hash,
        "node": rt.node,
        "api": inv.api,
        "corr": inv.corr.as_str(),
        "root": inv.root,
        "seq": rt.seq,
        "step": inv.step,
        "picks": inv.picks,
        "next_task": rt.next_task,
        "invocations": rt.invocations,
        "stats": {"batches": s.batches, "tasks": s.tasks, "instructions": s.instructions, "effects": s.effects},
        "tasks": tasks,
        "results": results,
    });
    SnapshotFile { heap, continuation }.encode()
}

struct Reader<'a> {
    roots: BTreeMap<String, ValueHandle>,
    rt: &'a Runtime,
}

fn malformed(what: &str) -> ResumeError {
    ResumeError::Malformed(what.to_string())
}

fn u64_of(j: &Json, key: &str) -> Result<u64, ResumeError> {
    j.get(key).and_then(Json::as_u64).ok_or_else(|| malformed(key))
}

fn ids(j: &Json, key: &str) -> Result<Vec<u64>, ResumeError> {
    j.get(key)
        .and_then(Json::as_array)
        .and_then(|a| a.iter().map(Json::as_u64).collect())
        .ok_or_else(|| malformed(key))
}

impl Reader<'_> {
    fn root(&mut self, name: &str) -> Result<ValueHandle, ResumeError> {
        self.roots.remove(name).ok_or_else(|| malformed(&format!("missing root {name}")))
    }

    fn task(&mut self, j: &Json) -> Result<Task, ResumeError> {
        let id = u64_of(j, "id")?;
        let parent = match j.get("parent") {
            Some(Json::Null) => None,
            Some(p) => Some(p.as_u64().ok_or_else(|| malformed("parent"))?),
            None => return Err(malformed("parent")),
        };
        let state = match j.get("state") {
            Some(Json::String(s)) if s == "ready" => State::Ready,
            Some(s) => State::Blocked(u64_of(s, "blocked")?),
            None => return Err(malformed("state")),
        };
        let body = j.get("body").ok_or_else(|| malformed("body"))?;
        let body = if let Some(frames) = body.get("frames").and_then(Json::as_array) {
            let mut out = Vec::new();
            for (fi, f) in frames.iter().enumerate() {
                let name = f.get("fn").and_then(Json::as_str).ok_or_else(|| malformed("fn"))?;
                let func = self.rt.code.function(name).ok_or_else(|| malformed(&format!("unknown function {name}")))?;
                let code = &self.rt.code.functions[func];
                let regs_json = f.get("regs").and_then(Json::as_array).ok_or_else(|| malformed("regs"))?;
                if regs_json.len() != code.nregs {
                    return Err(malformed("register count"));
                }
                let mut regs = Vec::with_capacity(regs_json.len());
                for (ri, r) in regs_json.iter().enumerate() {
                    regs.push(match r {
                        Json::Null => Slot::Empty,
                        Json::String(s) if s == "val" => Slot::Val(self.root(&format!("t{id}.f{fi}.r{ri}"))?),
                        p => Slot::Pending(u64_of(p, "pending")?),
                    });
                }
                let pc = u64_of(f, "pc")? as usize;
                if pc >= code.instrs.len() {
                    return Err(malformed("pc"));
                }
                out.push(Frame {
                    func,
                    pc,
                    ret: u64_of(f, "ret")? as u32,
                    regs,
                });
            }
            if out.is_empty() {
                return Err(malformed("task without frames"));
            }
            Body::Local(out)
        } else {
            let e = body.get("effect").ok_or_else(|| malformed("body"))?;
            let text = |k: &str| e.get(k).and_then(Json::as_str).map(str::to_string).ok_or_else(|| malformed(k));
            let origin = e.get("origin").ok_or_else(|| malformed("origin"))?;
            let n = u64_of(e, "args")?;
            let args = (0..n).map(|i| self.root(&format!("t{id}.a{i}"))).collect::<Result<Vec<_>, _>>()?;
            Body::Effect(EffectTask {
                capability: text("capability")?,
                operation: text("operation")?,
                args,
                origin: Origin {
                    function: origin.get("function").and_then(Json::as_str).ok_or_else(|| malformed("origin"))?.to_string(),
                    statement: u64_of(origin, "statement")? as u32,
                },
                in_flight: None::<InFlight>,
            })
        };
        Ok(Task {
            id,
            parent,
            body,
            children: ids(j, "children")?,
            joined: ids(j, "joined")?.into_iter().collect(),
            instructions: u64_of(j, "instructions")?,
            state,
        })
    }
}

fn restore(rt: &mut Runtime, file: &SnapshotFile) -> Result<Invocation, ResumeError> {
    let c = &file.continuation;
    let roots = file
        .heap
        .restore(&mut rt.heap.lock())
        .map_err(|e| ResumeError::Malformed(e.to_string()))?;
    let mut reader = Reader { roots, rt };
    let built = (|| -> Result<_, ResumeError> {
        let mut tasks = BTreeMap::new();
        for t in c.get("tasks").and_then(Json::as_array).ok_or_else(|| malformed("tasks"))? {
            let task = reader.task(t)?;
            tasks.insert(task.id, task);
        }
        let mut results = BTreeMap::new();
        for r in c.get("results").and_then(Json::as_array).ok_or_else(|| malformed("results"))? {
            let id = u64_of(r, "task")?;
            let result = if r.get("success").is_some() {
                TaskResult::Success(reader.root(&format!("r{id}"))?)
            } else {
                let (key, effect) = if r.get("effect_failure").is_some() { ("effect_failure", true) } else { ("failure", false) };
                let v = from_json(r.get(key).ok_or_else(|| malformed("result"))?)
                    .map_err(|e| ResumeError::Malformed(e.to_string()))?;
                let f = FailureObject::from_value(&v).ok_or_else(|| malformed("failure"))?;
                if effect {
                    TaskResult::EffectFailure(f)
                } else {
                    TaskResult::Failure(f)
                }
            };
            results.insert(id, result);
        }
        Ok((tasks, results))
    })();
    let leftover: Vec<ValueHandle> = std::mem::take(&mut reader.roots).into_values().collect();
    rt.heap.lock().release_all(leftover);
    let (tasks, results) = built?;
    let stats = c.get("stats").ok_or_else(|| malformed("stats"))?;
    rt.seq = u64_of(c, "seq")? + 1;
    rt.next_task = u64_of(c, "next_task")?;
    rt.invocations = u64_of(c, "invocations")?;
    Ok(Invocation {
        api: c.get("api").and_then(Json::as_str).ok_or_else(|| malformed("api"))?.to_string(),
        corr: c
            .get("corr")
            .and_then(Json::as_str)
            .and_then(CorrelationId::parse)
            .ok_or_else(|| malformed("corr"))?,
        root: u64_of(c, "root")?,
        tasks,
        results,
        step: u64_of(c, "step")?,
        picks: u64_of(c, "picks")?,
        stats: InvocationStats {
            batches: u64_of(stats, "batches")?,
            tasks: u64_of(stats, "tasks")?,
            instructions: u64_of(stats, "instructions")?,
            effects: u64_of(stats, "effects")?,
        },
    })
}

/// Restores `snapshot` and replays the rest of `log` from its mark: the
/// outcomes of the interrupted invocation and every later one.
pub fn resume(program: &Program, log: &ReplayLog, snapshot: &[u8], workers: usize) -> Result<Vec<Outcome>, ResumeError> {
    let file = SnapshotFile::decode(snapshot)?;
    let expected = program_hash(program);
    let found = file.program_hash().unwrap_or_default().to_string();
    if found != expected {
        return Err(ResumeError::SnapshotIncompatible { expected, found });
    }
    let mark = file.seq().ok_or_else(|| malformed("seq"))?;
    match log.events.get(mark as usize) {
        Some(e) if e.kind == crate::trace::EventKind::SnapshotMark => {
            if e.get("digest").and_then(Json::as_str) != Some(canon::sha256_hex(snapshot).as_str()) {
                return Err(ResumeError::Malformed(format!("snapshot digest differs from the mark at seq {mark}")));
            }
        }
        _ => return Err(ResumeError::NoSnapshot(mark)),
    }
    let mut rt = replay_runtime(program, Arc::new(log.clone()), workers)?;
    let inv = restore(&mut rt, &file)?;
    Ok(rt.continue_resumed(inv)?)
}

/// [`resume`] from the snapshot the log itself carries for `mark`.
pub fn resume_at(program: &Program, log: &ReplayLog, mark: u64, workers: usize) -> Result<Vec<Outcome>, ResumeError> {
    let bytes = log.snapshots.get(&mark).ok_or(ResumeError::NoSnapshot(mark))?;
    resume(program, log, bytes, workers)
}
