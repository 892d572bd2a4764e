//! The invocation driver: batch selection, event emission and the replay
//! check.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};

use super::exec::{self, new_frame, Body, Ctx, EffectTask, InFlight, State, Step, Task, TaskId, TaskResult};
use super::failure::{FailureKind, FailureObject, Origin};
use super::ir::SpawnTarget;
use super::{with_effect_context, Caller, EffectContext, InvocationStats, Journal, Outcome, Runtime};
use crate::bapi::{from_json, panic_message, to_json, EffectError};
use crate::heap::{Value, ValueHandle};
use crate::trace::{CorrelationId, EventKind, ReplayDivergence, TraceEvent};

/// Live state of one api invocation.
pub(crate) struct Invocation {
    pub api: String,
    pub corr: CorrelationId,
    pub root: TaskId,
    pub tasks: BTreeMap<TaskId, Task>,
    pub results: BTreeMap<TaskId, TaskResult>,
    /// Batches run so far.
    pub step: u64,
    /// Tasks scheduled so far; the free-mode hash input.
    pub picks: u64,
    pub stats: InvocationStats,
}

pub(crate) enum Finish {
    Done,
    Yield(TaskId, ValueHandle),
    Failure(FailureObject),
}

type Replay<T> = Result<T, ReplayDivergence>;

/// `hash(seed, pick, sorted ready ids) mod |ready|`.
fn choose(seed: u64, pick: u64, ready: &[TaskId]) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(pick.to_le_bytes());
    for id in ready {
        h.update(id.to_le_bytes());
    }
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x % ready.len() as u64) as usize
}

fn target_name(code: &super::ir::Compiled, t: &SpawnTarget) -> String {
    match t {
        SpawnTarget::Effect { capability, operation } => format!("{capability}::{operation}"),
        SpawnTarget::Action(f) => code.functions[*f].name.clone(),
    }
}

fn effect_failure(e: EffectError, origin: &Origin) -> FailureObject {
    let kind = match e {
        EffectError::Timeout(_) => FailureKind::Timeout,
        _ => FailureKind::EffectError,
    };
    FailureObject::new(kind, e.to_string(), origin.clone())
}

fn is_api_result(v: &Value) -> bool {
    v.api_result_ok().is_some()
}

impl Runtime {
    fn divergence(&self, seq: u64, reason: impl Into<String>) -> ReplayDivergence {
        ReplayDivergence {
            node: self.node.clone(),
            seq,
            reason: reason.into(),
        }
    }

    /// Appends (record), checks (replay) or just numbers (free) an event.
    fn emit(&mut self, corr: &CorrelationId, kind: EventKind, payload: Json) -> Replay<u64> {
        let seq = self.seq;
        let event = TraceEvent {
            seq,
            kind,
            corr: corr.clone(),
            payload,
        };
        let mismatch = match &mut self.journal {
            Journal::Free => None,
            Journal::Record(log) => {
                log.events.push(event);
                None
            }
            Journal::Replay(log) => match log.events.get(seq as usize) {
                Some(e) if *e == event => None,
                Some(e) => Some(format!("log has {}, replay produced {}", e.to_canonical(), event.to_canonical())),
                None => Some(format!("log ended; replay produced {}", event.to_canonical())),
            },
        };
        if let Some(reason) = mismatch {
            return Err(self.divergence(seq, reason));
        }
        self.seq += 1;
        Ok(seq)
    }

    /// The logged event at the current seq, which must be of `kind`.
    fn logged(&self, kind: EventKind, corr: &CorrelationId) -> Replay<TraceEvent> {
        let Journal::Replay(log) = &self.journal else {
            unreachable!("logged() outside replay");
        };
        match log.events.get(self.seq as usize) {
            Some(e) if e.kind == kind && e.corr == *corr => Ok(e.clone()),
            Some(e) => Err(self.divergence(
                self.seq,
                format!("log has {}, replay expected a {kind} event", e.to_canonical()),
            )),
            None => Err(self.divergence(self.seq, format!("log ended; replay expected a {kind} event"))),
        }
    }

    fn replaying(&self) -> bool {
        matches!(self.journal, Journal::Replay(_))
    }

    /// Replays the log's invocations starting with the `ApiEnter` at `seq`.
    pub(crate) fn replay_from(&mut self, seq: u64) -> Replay<Vec<Outcome>> {
        self.seq = seq;
        let mut out = Vec::new();
        loop {
            let Journal::Replay(log) = &self.journal else {
                unreachable!()
            };
            let Some(e) = log.events.get(self.seq as usize).cloned() else {
                return Ok(out);
            };
            if e.kind != EventKind::ApiEnter {
                return Err(self.divergence(self.seq, format!("expected ApiEnter, log has {}", e.kind)));
            }
            let bad = |what: &str| self.divergence(e.seq, format!("malformed ApiEnter: {what}"));
            let api = e.get("api").and_then(Json::as_str).ok_or_else(|| bad("api"))?.to_string();
            let args = e
                .get("args")
                .and_then(Json::as_array)
                .ok_or_else(|| bad("args"))?
                .iter()
                .map(from_json)
                .collect::<Result<Vec<Value>, _>>()
                .map_err(|err| bad(&err.to_string()))?;
            let caller = match e.get("caller") {
                Some(Json::Null) => None,
                Some(c) => Some(Caller {
                    corr: e.corr.clone(),
                    node: c.get("node").and_then(Json::as_str).ok_or_else(|| bad("caller"))?.to_string(),
                    seq: c.get("seq").and_then(Json::as_u64).ok_or_else(|| bad("caller"))?,
                }),
                None => return Err(bad("caller")),
            };
            self.check_args(&api, &args).map_err(|err| bad(&err.to_string()))?;
            self.invocations += 1;
            out.push(self.run_invocation(&api, &args, e.corr.clone(), caller)?);
        }
    }

    pub(crate) fn run_invocation(
        &mut self,
        api: &str,
        args: &[Value],
        corr: CorrelationId,
        caller: Option<Caller>,
    ) -> Replay<Outcome> {
        let caller_json = match &caller {
            Some(c) => json!({"node": c.node, "seq": c.seq}),
            None => Json::Null,
        };
        self.emit(
            &corr,
            EventKind::ApiEnter,
            json!({"api": api, "args": args.iter().map(to_json).collect::<Vec<_>>(), "caller": caller_json}),
        )?;
        let func = self.code.function(api).expect("checked api");
        let root = self.next_task;
        self.next_task += 1;
        let mut inv = Invocation {
            api: api.to_string(),
            corr,
            root,
            tasks: BTreeMap::new(),
            results: BTreeMap::new(),
            step: 0,
            picks: 0,
            stats: InvocationStats {
                tasks: 1,
                ..InvocationStats::default()
            },
        };
        let imported: Result<Vec<ValueHandle>, _> = {
            let mut heap = self.heap.lock();
            let mut hs = Vec::new();
            let mut err = None;
            for a in args {
                match heap.import(a) {
                    Ok(h) => hs.push(h),
                    Err(e) => {
                        err = Some(e);
                        break;
                    }
                }
            }
            match err {
                None => Ok(hs),
                Some(e) => {
                    heap.release_all(hs);
                    Err(e)
                }
            }
        };
        let finish = match imported {
            Ok(hs) => {
                let nregs = self.code.functions[func].nregs;
                inv.tasks.insert(root, Task::local(root, None, new_frame(func, 0, nregs, &hs)));
                self.drive(&mut inv, false)?
            }
            Err(e) => Finish::Failure(FailureObject::new(
                FailureKind::OutOfMemory,
                e.to_string(),
                Origin {
                    function: api.to_string(),
                    statement: 0,
                },
            )),
        };
        self.finish(inv, finish)
    }

    /// Runs batches until the invocation finishes. `resumed` skips the
    /// snapshot mark that was taken right before the state was captured.
    fn drive(&mut self, inv: &mut Invocation, mut resumed: bool) -> Replay<Finish> {
        loop {
            for t in inv.tasks.values_mut() {
                if let State::Blocked(c) = t.state {
                    if inv.results.contains_key(&c) {
                        t.state = State::Ready;
                    }
                }
            }
            if let Some(k) = self.config.snapshot_every {
                let quiescent = inv
                    .tasks
                    .values()
                    .all(|t| !matches!(&t.body, Body::Effect(e) if e.in_flight.is_some()));
                if inv.step % k == 0 && quiescent && !resumed {
                    self.snapshot_mark(inv)?;
                }
            }
            resumed = false;
            let ready: Vec<TaskId> = inv
                .tasks
                .values()
                .filter(|t| t.state == State::Ready)
                .map(|t| t.id)
                .collect();
            if ready.is_empty() {
                let root = inv.root;
                return Ok(Finish::Failure(self.stall_failure(inv, root)));
            }
            let batch = self.next_batch(inv, ready)?;
            self.emit(&inv.corr, EventKind::ScheduleChoice, json!({"step": inv.step, "tasks": batch}))?;
            inv.step += 1;
            inv.stats.batches += 1;
            if let Some(f) = self.run_batch(inv, &batch)? {
                return Ok(f);
            }
        }
    }

    fn stall_failure(&self, inv: &Invocation, root: TaskId) -> FailureObject {
        let function = inv
            .tasks
            .get(&root)
            .and_then(|t| match &t.body {
                Body::Local(frames) => frames.first().map(|f| self.code.functions[f.func].name.clone()),
                Body::Effect(_) => None,
            })
            .unwrap_or_else(|| inv.api.clone());
        FailureObject::new(
            FailureKind::LogicError,
            "scheduler stalled: no task is ready",
            Origin { function, statement: 0 },
        )
    }

    fn next_batch(&mut self, inv: &mut Invocation, mut ready: Vec<TaskId>) -> Replay<Vec<TaskId>> {
        if self.replaying() {
            let e = self.logged(EventKind::ScheduleChoice, &inv.corr)?;
            if e.get("step").and_then(Json::as_u64) != Some(inv.step) {
                return Err(self.divergence(e.seq, format!("schedule step mismatch: replay is at step {}", inv.step)));
            }
            let tasks: Option<Vec<TaskId>> = e
                .get("tasks")
                .and_then(Json::as_array)
                .and_then(|a| a.iter().map(Json::as_u64).collect());
            let tasks = tasks.filter(|t| !t.is_empty()).ok_or_else(|| self.divergence(e.seq, "malformed schedule choice"))?;
            let mut seen = Vec::new();
            for id in &tasks {
                if !ready.contains(id) || seen.contains(id) {
                    return Err(self.divergence(e.seq, format!("logged task {id} is not ready (ready: {ready:?})")));
                }
                seen.push(*id);
            }
            inv.picks += tasks.len() as u64;
            return Ok(tasks);
        }
        let mut batch = Vec::new();
        while batch.len() < self.config.sched.workers && !ready.is_empty() {
            let i = choose(self.config.sched.seed, inv.picks, &ready);
            inv.picks += 1;
            batch.push(ready.remove(i));
        }
        Ok(batch)
    }

    /// Runs the local slices of a batch (in parallel when there are several
    /// workers) and applies every outcome in batch order.
    fn run_batch(&mut self, inv: &mut Invocation, batch: &[TaskId]) -> Replay<Option<Finish>> {
        let mut taken: Vec<Task> = batch.iter().map(|id| inv.tasks.remove(id).expect("ready task")).collect();
        let steps: Vec<Option<Step>> = {
            let ctx = Ctx {
                code: &self.code,
                heap: &self.heap,
                results: &inv.results,
                limits: &self.config.limits,
            };
            let run = |t: &mut Task| -> Option<Step> {
                match t.body {
                    Body::Local(_) => Some(guarded_slice(t, &ctx)),
                    Body::Effect(_) => None,
                }
            };
            let locals = taken.iter().filter(|t| matches!(t.body, Body::Local(_))).count();
            match &self.pool {
                Some(pool) if locals > 1 => pool.install(|| taken.par_iter_mut().map(run).collect()),
                _ => taken.iter_mut().map(run).collect(),
            }
        };
        for t in taken {
            inv.tasks.insert(t.id, t);
        }
        let mut finish = None;
        for (id, step) in batch.iter().zip(steps) {
            if finish.is_some() || !inv.tasks.contains_key(id) {
                // Finished invocation or cancelled task: the outcome is void.
                if let Some(step) = step {
                    self.discard(step);
                }
                continue;
            }
            finish = match step {
                Some(step) => self.apply(inv, *id, step)?,
                None => self.advance_effect(inv, *id)?,
            };
        }
        Ok(finish)
    }

    fn discard(&self, step: Step) {
        let mut heap = self.heap.lock();
        match step {
            Step::Spawn { args, .. } => heap.release_all(args),
            Step::Done(h) | Step::Yield(h) => heap.release(h),
            Step::Block(_) | Step::Fail(_) => {}
        }
    }

    fn apply(&mut self, inv: &mut Invocation, id: TaskId, step: Step) -> Replay<Option<Finish>> {
        match step {
            Step::Block(c) => {
                inv.tasks.get_mut(&id).expect("task").state = State::Blocked(c);
                Ok(None)
            }
            Step::Spawn {
                dst,
                target,
                args,
                origin,
            } => {
                if self.next_task - inv.root >= self.config.limits.max_tasks {
                    self.heap.lock().release_all(args);
                    let f = FailureObject::new(
                        FailureKind::LogicError,
                        format!("task limit of {} exceeded", self.config.limits.max_tasks),
                        origin,
                    );
                    return self.fail_task(inv, id, f);
                }
                let child = self.next_task;
                self.next_task += 1;
                inv.stats.tasks += 1;
                self.emit(
                    &inv.corr,
                    EventKind::Spawn,
                    json!({"parent": id, "child": child, "target": target_name(&self.code, &target)}),
                )?;
                let task = match target {
                    SpawnTarget::Effect { capability, operation } => Task {
                        id: child,
                        parent: Some(id),
                        body: Body::Effect(EffectTask {
                            capability,
                            operation,
                            args,
                            origin,
                            in_flight: None,
                        }),
                        children: Vec::new(),
                        joined: Default::default(),
                        instructions: 0,
                        state: State::Ready,
                    },
                    SpawnTarget::Action(f) => {
                        let nregs = self.code.functions[f].nregs;
                        Task::local(child, Some(id), new_frame(f, 0, nregs, &args))
                    }
                };
                inv.tasks.insert(child, task);
                let parent = inv.tasks.get_mut(&id).expect("task");
                parent.children.push(child);
                if let Body::Local(frames) = &mut parent.body {
                    frames.last_mut().expect("frame").regs[dst as usize] = exec::Slot::Pending(child);
                }
                Ok(None)
            }
            Step::Done(h) => {
                let task = inv.tasks.remove(&id).expect("task");
                inv.stats.instructions += task.instructions;
                self.release_task(&task);
                inv.results.insert(id, TaskResult::Success(h));
                Ok((id == inv.root).then_some(Finish::Done))
            }
            Step::Fail(f) => self.fail_task(inv, id, f),
            Step::Yield(h) => {
                let value = to_json(&self.heap.lock().export(h));
                self.emit(&inv.corr, EventKind::Yield, json!({"task": id, "value": value}))?;
                Ok(Some(Finish::Yield(id, h)))
            }
        }
    }

    /// Records a task failure, cancelling its unfinished descendants first.
    fn fail_task(&mut self, inv: &mut Invocation, id: TaskId, f: FailureObject) -> Replay<Option<Finish>> {
        let doomed: Vec<TaskId> = inv
            .tasks
            .keys()
            .copied()
            .filter(|t| *t != id && descends_from(inv, *t, id))
            .collect();
        for t in doomed {
            self.cancel(inv, t)?;
        }
        let task = inv.tasks.remove(&id).expect("task");
        inv.stats.instructions += task.instructions;
        self.release_task(&task);
        if id == inv.root {
            return Ok(Some(Finish::Failure(f)));
        }
        inv.results.insert(id, TaskResult::Failure(f));
        Ok(None)
    }

    fn cancel(&mut self, inv: &mut Invocation, id: TaskId) -> Replay<()> {
        let task = inv.tasks.remove(&id).expect("task");
        inv.stats.instructions += task.instructions;
        self.release_task(&task);
        self.emit(&inv.corr, EventKind::Cancel, json!({"task": id}))?;
        Ok(())
    }

    fn release_task(&self, task: &Task) {
        self.heap.lock().release_all(task.handles());
    }

    /// Effect tasks take two slices: the request (the handler runs here,
    /// or nothing runs when replaying) and, later, the response.
    fn advance_effect(&mut self, inv: &mut Invocation, id: TaskId) -> Replay<Option<Finish>> {
        let task = inv.tasks.get(&id).expect("task");
        let Body::Effect(e) = &task.body else { unreachable!() };
        match &e.in_flight {
            None => {
                let (capability, operation, origin) = (e.capability.clone(), e.operation.clone(), e.origin.clone());
                let args: Vec<Value> = {
                    let heap = self.heap.lock();
                    e.args.iter().map(|h| heap.export(*h)).collect()
                };
                let seq = self.emit(
                    &inv.corr,
                    EventKind::EffectRequest,
                    json!({
                        "task": id,
                        "capability": capability,
                        "operation": operation,
                        "args": args.iter().map(to_json).collect::<Vec<_>>(),
                    }),
                )?;
                inv.stats.effects += 1;
                let response = if self.replaying() {
                    None
                } else {
                    let ctx = EffectContext {
                        corr: inv.corr.clone(),
                        node: self.node.clone(),
                        seq,
                    };
                    let registry = self.registry.clone();
                    let r = with_effect_context(ctx, || registry.invoke_args(&capability, &operation, &args));
                    Some(r.map_err(|err| effect_failure(err, &origin)))
                };
                let Body::Effect(e) = &mut inv.tasks.get_mut(&id).expect("task").body else { unreachable!() };
                e.in_flight = Some(InFlight {
                    request_seq: seq,
                    response,
                });
                Ok(None)
            }
            Some(flight) => {
                let request = flight.request_seq;
                let response = match &flight.response {
                    Some(r) => r.clone(),
                    None => self.logged_response(&inv.corr, request)?,
                };
                let payload = match &response {
                    Ok(v) => json!({"request": request, "response": to_json(v)}),
                    Err(f) => json!({"request": request, "failure": to_json(&f.to_value())}),
                };
                self.emit(&inv.corr, EventKind::EffectResponse, payload)?;
                let task = inv.tasks.remove(&id).expect("task");
                self.release_task(&task);
                let Body::Effect(e) = task.body else { unreachable!() };
                let result = match response {
                    Ok(v) => match self.heap.lock().import(&v) {
                        Ok(h) => TaskResult::Success(h),
                        Err(err) => TaskResult::EffectFailure(FailureObject::new(
                            FailureKind::OutOfMemory,
                            err.to_string(),
                            e.origin.clone(),
                        )),
                    },
                    Err(f) => TaskResult::EffectFailure(f),
                };
                inv.results.insert(id, result);
                Ok(None)
            }
        }
    }

    fn logged_response(&self, corr: &CorrelationId, request: u64) -> Replay<Result<Value, FailureObject>> {
        let e = self.logged(EventKind::EffectResponse, corr)?;
        let bad = |what: &str| self.divergence(e.seq, format!("malformed EffectResponse: {what}"));
        if e.get("request").and_then(Json::as_u64) != Some(request) {
            return Err(self.divergence(e.seq, format!("response does not answer request {request}")));
        }
        let obj = e.payload.as_object().ok_or_else(|| bad("payload"))?;
        if obj.len() != 2 {
            return Err(bad("payload"));
        }
        if let Some(v) = obj.get("response") {
            return Ok(Ok(from_json(v).map_err(|err| bad(&err.to_string()))?));
        }
        let f = obj.get("failure").ok_or_else(|| bad("neither response nor failure"))?;
        let v = from_json(f).map_err(|err| bad(&err.to_string()))?;
        Ok(Err(FailureObject::from_value(&v).ok_or_else(|| bad("failure object"))?))
    }

    /// Cancels whatever is still running, releases every handle and emits
    /// `ApiExit`.
    fn finish(&mut self, mut inv: Invocation, finish: Finish) -> Replay<Outcome> {
        let yielder = match &finish {
            Finish::Yield(id, _) => Some(*id),
            _ => None,
        };
        let live: Vec<TaskId> = inv.tasks.keys().copied().collect();
        for id in live {
            if Some(id) == yielder {
                let task = inv.tasks.remove(&id).expect("task");
                inv.stats.instructions += task.instructions;
                self.release_task(&task);
            } else {
                self.cancel(&mut inv, id)?;
            }
        }
        let (result, failure, yielded) = {
            let mut heap = self.heap.lock();
            let (value, failure, yielded) = match finish {
                Finish::Done => match inv.results.get(&inv.root) {
                    Some(TaskResult::Success(h)) => (heap.export(*h), None, false),
                    _ => unreachable!("root finished without a result"),
                },
                Finish::Yield(_, h) => {
                    let v = heap.export(h);
                    heap.release(h);
                    (v, None, true)
                }
                Finish::Failure(f) => (Value::Unit, Some(f), false),
            };
            for (_, r) in std::mem::take(&mut inv.results) {
                if let TaskResult::Success(h) = r {
                    heap.release(h);
                }
            }
            match failure {
                Some(f) => (Value::error(f.to_value()), Some(f), yielded),
                None if is_api_result(&value) => (value, None, yielded),
                None => {
                    let how = if yielded { "yielded" } else { "returned" };
                    let f = FailureObject::new(
                        FailureKind::LogicError,
                        format!("api `{}` {how} a value that is not an APIResult", inv.api),
                        Origin {
                            function: inv.api.clone(),
                            statement: 0,
                        },
                    );
                    (Value::error(f.to_value()), Some(f), yielded)
                }
            }
        };
        let failure_json = match &failure {
            Some(f) => to_json(&f.to_value()),
            None => Json::Null,
        };
        self.emit(&inv.corr, EventKind::ApiExit, json!({"result": to_json(&result), "failure": failure_json}))?;
        Ok(Outcome {
            result,
            failure,
            yielded,
            corr: inv.corr,
            stats: inv.stats,
        })
    }

    fn snapshot_mark(&mut self, inv: &Invocation) -> Replay<()> {
        let bytes = super::snapshot::capture(self, inv);
        let digest = crate::canon::sha256_hex(&bytes);
        let seq = self.emit(&inv.corr, EventKind::SnapshotMark, json!({"step": inv.step, "digest": digest}))?;
        if let Journal::Record(log) = &mut self.journal {
            log.snapshots.insert(seq, bytes);
        }
        Ok(())
    }

    /// Continues a restored invocation, then replays the rest of the log.
    pub(crate) fn continue_resumed(&mut self, mut inv: Invocation) -> Replay<Vec<Outcome>> {
        let finish = self.drive(&mut inv, true)?;
        let first = self.finish(inv, finish)?;
        let seq = self.seq;
        let mut rest = self.replay_from(seq)?;
        rest.insert(0, first);
        Ok(rest)
    }
}

fn descends_from(inv: &Invocation, mut t: TaskId, ancestor: TaskId) -> bool {
    while let Some(p) = inv.tasks.get(&t).and_then(|task| task.parent) {
        if p == ancestor {
            return true;
        }
        t = p;
    }
    false
}

/// A slice that panics fails its task instead of the host.
fn guarded_slice(t: &mut Task, ctx: &Ctx<'_>) -> Step {
    let origin = match &t.body {
        Body::Local(frames) => frames.last().map(|f| {
            let code = &ctx.code.functions[f.func];
            Origin {
                function: code.name.clone(),
                statement: code.stmt.get(f.pc).copied().unwrap_or(0),
            }
        }),
        Body::Effect(_) => None,
    };
    match catch_unwind(AssertUnwindSafe(|| exec::run_slice(t, ctx))) {
        Ok(step) => step,
        Err(payload) => Step::Fail(FailureObject::new(
            FailureKind::LogicError,
            format!("internal error: {}", panic_message(payload.as_ref())),
            origin.unwrap_or(Origin {
                function: String::new(),
                statement: 0,
            }),
        )),
    }
}
