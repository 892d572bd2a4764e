//! Tasks and the slice interpreter.
//!
//! A slice runs one task until it reaches a suspension point: a spawn, a
//! read of a child that has not finished, completion, failure or `yield`.
//! Slices touch only their own task, the shared heap and a read-only view of
//! finished tasks, so the driver can run a batch of them in parallel and
//! apply their outcomes in a fixed order.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;

use super::failure::{FailureKind, FailureObject, Origin};
use super::ir::{Builtin, Compiled, Instr, Reg, SpawnTarget};
use super::Limits;
use crate::bapi::encode_canonical;
use crate::heap::{Heap, HeapError, Kind, Value, ValueHandle};
use crate::lang::{BinOp, Literal, Pattern};

pub(crate) type TaskId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    Empty,
    /// Owns one reference.
    Val(ValueHandle),
    /// Result of a spawned child, joined on first read.
    Pending(TaskId),
}

#[derive(Debug)]
pub(crate) struct Frame {
    pub func: usize,
    pub pc: usize,
    /// Caller register receiving the return value.
    pub ret: Reg,
    pub regs: Vec<Slot>,
}

#[derive(Debug)]
pub(crate) struct InFlight {
    pub request_seq: u64,
    /// `None` while replaying: the response is read back from the log.
    pub response: Option<Result<Value, FailureObject>>,
}

#[derive(Debug)]
pub(crate) struct EffectTask {
    pub capability: String,
    pub operation: String,
    pub args: Vec<ValueHandle>,
    /// The `Task::run` site.
    pub origin: Origin,
    pub in_flight: Option<InFlight>,
}

#[derive(Debug)]
pub(crate) enum Body {
    Local(Vec<Frame>),
    Effect(EffectTask),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum State {
    Ready,
    Blocked(TaskId),
}

#[derive(Debug)]
pub(crate) struct Task {
    pub id: TaskId,
    pub parent: Option<TaskId>,
    pub body: Body,
    /// In spawn (hence id) order.
    pub children: Vec<TaskId>,
    pub joined: BTreeSet<TaskId>,
    pub instructions: u64,
    pub state: State,
}

impl Task {
    pub fn local(id: TaskId, parent: Option<TaskId>, frame: Frame) -> Task {
        Task {
            id,
            parent,
            body: Body::Local(vec![frame]),
            children: Vec::new(),
            joined: BTreeSet::new(),
            instructions: 0,
            state: State::Ready,
        }
    }

    /// Every handle the task owns.
    pub fn handles(&self) -> Vec<ValueHandle> {
        match &self.body {
            Body::Local(frames) => frames
                .iter()
                .flat_map(|f| f.regs.iter())
                .filter_map(|s| match s {
                    Slot::Val(h) => Some(*h),
                    _ => None,
                })
                .collect(),
            Body::Effect(e) => e.args.clone(),
        }
    }
}

#[derive(Debug)]
pub(crate) enum TaskResult {
    /// Owns one reference.
    Success(ValueHandle),
    Failure(FailureObject),
    /// Failures of effect tasks reach the joining task unchanged.
    EffectFailure(FailureObject),
}

#[derive(Debug)]
pub(crate) enum Step {
    Spawn {
        dst: Reg,
        target: SpawnTarget,
        /// Owned by the new child.
        args: Vec<ValueHandle>,
        origin: Origin,
    },
    Block(TaskId),
    Done(ValueHandle),
    Fail(FailureObject),
    Yield(ValueHandle),
}

pub(crate) struct Ctx<'a> {
    pub code: &'a Compiled,
    pub heap: &'a Mutex<Heap>,
    pub results: &'a BTreeMap<TaskId, TaskResult>,
    pub limits: &'a Limits,
}

pub(crate) fn new_frame(func: usize, ret: Reg, nregs: usize, args: &[ValueHandle]) -> Frame {
    let mut regs = vec![Slot::Empty; nregs];
    for (slot, h) in regs.iter_mut().zip(args) {
        *slot = Slot::Val(*h);
    }
    Frame { func, pc: 0, ret, regs }
}

/// Runs a local task to its next suspension point.
pub(crate) fn run_slice(task: &mut Task, ctx: &Ctx<'_>) -> Step {
    let Task {
        body,
        children,
        joined,
        instructions,
        ..
    } = task;
    let Body::Local(frames) = body else {
        unreachable!("effect tasks are run by the driver");
    };
    loop {
        let mut heap = ctx.heap.lock();
        let mut m = Machine {
            frames: &mut *frames,
            children,
            joined: &mut *joined,
            heap: &mut heap,
            ctx,
        };
        let origin = m.origin();
        if *instructions >= ctx.limits.max_instructions {
            return Step::Fail(FailureObject::new(
                FailureKind::Timeout,
                format!("instruction budget of {} exhausted", ctx.limits.max_instructions),
                origin,
            ));
        }
        match m.exec(&origin) {
            Ok(Flow::Continue) => *instructions += 1,
            Ok(Flow::Suspend(step)) => {
                if !matches!(step, Step::Block(_)) {
                    *instructions += 1;
                }
                return step;
            }
            Err(Stop::Block(c)) => return Step::Block(c),
            Err(Stop::Fail(f)) => return Step::Fail(f),
        }
    }
}

enum Flow {
    Continue,
    Suspend(Step),
}

enum Stop {
    Block(TaskId),
    Fail(FailureObject),
}

fn fail(kind: FailureKind, message: impl Into<String>, origin: &Origin) -> Stop {
    Stop::Fail(FailureObject::new(kind, message, origin.clone()))
}

fn logic(message: impl Into<String>, origin: &Origin) -> Stop {
    fail(FailureKind::LogicError, message, origin)
}

fn alloc_failure(e: HeapError, origin: &Origin) -> Stop {
    fail(FailureKind::OutOfMemory, e.to_string(), origin)
}

struct Machine<'a, 'h> {
    frames: &'a mut Vec<Frame>,
    children: &'a [TaskId],
    joined: &'a mut BTreeSet<TaskId>,
    heap: &'a mut Heap,
    ctx: &'a Ctx<'h>,
}

impl Machine<'_, '_> {
    fn origin(&self) -> Origin {
        let f = self.frames.last().expect("live task has a frame");
        let code = &self.ctx.code.functions[f.func];
        Origin {
            function: code.name.clone(),
            statement: code.stmt[f.pc],
        }
    }

    fn top(&mut self) -> &mut Frame {
        self.frames.last_mut().expect("live task has a frame")
    }

    /// Reads a register, joining a pending child on first use.
    fn read(&mut self, r: Reg, origin: &Origin) -> Result<ValueHandle, Stop> {
        match self.top().regs[r as usize] {
            Slot::Val(h) => Ok(h),
            Slot::Empty => Err(logic(format!("read of unset register {r}"), origin)),
            Slot::Pending(child) => match self.ctx.results.get(&child) {
                None => Err(Stop::Block(child)),
                Some(TaskResult::Success(h)) => {
                    let h = self.heap.dup(*h);
                    self.joined.insert(child);
                    self.top().regs[r as usize] = Slot::Val(h);
                    Ok(h)
                }
                Some(TaskResult::Failure(f)) => {
                    self.joined.insert(child);
                    Err(Stop::Fail(propagate(f, origin)))
                }
                Some(TaskResult::EffectFailure(f)) => {
                    self.joined.insert(child);
                    Err(Stop::Fail(f.clone()))
                }
            },
        }
    }

    fn read_all(&mut self, rs: &[Reg], origin: &Origin) -> Result<Vec<ValueHandle>, Stop> {
        rs.iter().map(|r| self.read(*r, origin)).collect()
    }

    fn set(&mut self, dst: Reg, h: ValueHandle) {
        let old = std::mem::replace(&mut self.top().regs[dst as usize], Slot::Val(h));
        if let Slot::Val(o) = old {
            self.heap.release(o);
        }
    }

    fn exec(&mut self, origin: &Origin) -> Result<Flow, Stop> {
        let code = self.ctx.code;
        let (func, pc) = {
            let f = self.top();
            (f.func, f.pc)
        };
        let instr = &code.functions[func].instrs[pc];
        let mut next = pc + 1;
        match instr {
            Instr::Const { dst, value } => {
                let h = alloc_literal(self.heap, value).map_err(|e| alloc_failure(e, origin))?;
                self.set(*dst, h);
            }
            Instr::Call { dst, func: callee, args } => {
                let hs = self.read_all(args, origin)?;
                if self.frames.len() >= self.ctx.limits.max_depth {
                    return Err(logic(
                        format!("call depth limit of {} exceeded", self.ctx.limits.max_depth),
                        origin,
                    ));
                }
                let hs: Vec<ValueHandle> = hs.into_iter().map(|h| self.heap.dup(h)).collect();
                self.top().pc = next;
                let nregs = code.functions[*callee].nregs;
                self.frames.push(new_frame(*callee, *dst, nregs, &hs));
                return Ok(Flow::Continue);
            }
            Instr::Builtin { dst, builtin, args } => {
                let hs = self.read_all(args, origin)?;
                let h = builtin_call(self.heap, *builtin, &hs, origin)?;
                self.set(*dst, h);
            }
            Instr::Spawn { dst, target, args } => {
                let hs = self.read_all(args, origin)?;
                let hs: Vec<ValueHandle> = hs.into_iter().map(|h| self.heap.dup(h)).collect();
                self.top().pc = next;
                return Ok(Flow::Suspend(Step::Spawn {
                    dst: *dst,
                    target: target.clone(),
                    args: hs,
                    origin: origin.clone(),
                }));
            }
            Instr::List { dst, items } => {
                let hs = self.read_all(items, origin)?;
                let h = self.heap.alloc_list(&hs).map_err(|e| alloc_failure(e, origin))?;
                self.set(*dst, h);
            }
            Instr::Record { dst, fields } => {
                let hs = self.read_fields(fields, origin)?;
                let pairs: Vec<(&str, ValueHandle)> = fields.iter().map(|(k, _)| k.as_str()).zip(hs).collect();
                let h = self.heap.alloc_record(&pairs).map_err(|e| alloc_failure(e, origin))?;
                self.set(*dst, h);
            }
            Instr::Variant {
                dst,
                enum_name,
                variant,
                fields,
            } => {
                let hs = self.read_fields(fields, origin)?;
                let pairs: Vec<(&str, ValueHandle)> = fields.iter().map(|(k, _)| k.as_str()).zip(hs).collect();
                let h = self
                    .heap
                    .alloc_enum(enum_name, variant, &pairs)
                    .map_err(|e| alloc_failure(e, origin))?;
                self.set(*dst, h);
            }
            Instr::Field { dst, base, name } => {
                let b = self.read(*base, origin)?;
                let kind = self.heap.kind(b);
                let h = match kind {
                    Kind::Record | Kind::Enum => self.heap.field(b, name),
                    _ => None,
                };
                let Some(h) = h else {
                    return Err(logic(format!("no field `{name}` on {}", describe(self.heap, b)), origin));
                };
                self.set(*dst, h);
            }
            Instr::Bin { dst, op, lhs, rhs } => {
                let a = self.read(*lhs, origin)?;
                let b = self.read(*rhs, origin)?;
                let h = binary(self.heap, *op, a, b, origin)?;
                self.set(*dst, h);
            }
            Instr::Test { src, pattern, else_pc } => {
                let h = self.read(*src, origin)?;
                if !matches_pattern(self.heap, h, pattern) {
                    next = *else_pc;
                }
            }
            Instr::Jump(target) => next = *target,
            Instr::NoMatch(src) => {
                let h = self.read(*src, origin)?;
                return Err(fail(
                    FailureKind::MatchNonExhaustive,
                    format!("no match arm for {}", describe(self.heap, h)),
                    origin,
                ));
            }
            Instr::Yield(src) => {
                let h = self.read(*src, origin)?;
                let h = self.heap.dup(h);
                return Ok(Flow::Suspend(Step::Yield(h)));
            }
            Instr::Return(src) => {
                let h = self.read(*src, origin)?;
                if self.frames.len() > 1 {
                    let h = self.heap.dup(h);
                    let frame = self.frames.pop().expect("frame");
                    release_frame(self.heap, frame.regs);
                    self.set(frame.ret, h);
                    return Ok(Flow::Continue);
                }
                // Structured join: the task completes only after every child.
                let results = self.ctx.results;
                if let Some(c) = self.children.iter().find(|c| !results.contains_key(c)) {
                    return Err(Stop::Block(*c));
                }
                for c in self.children {
                    if self.joined.contains(c) {
                        continue;
                    }
                    match results.get(c) {
                        Some(TaskResult::Failure(f)) => return Err(Stop::Fail(propagate(f, origin))),
                        Some(TaskResult::EffectFailure(f)) => return Err(Stop::Fail(f.clone())),
                        _ => {}
                    }
                }
                let h = self.heap.dup(h);
                return Ok(Flow::Suspend(Step::Done(h)));
            }
        }
        self.top().pc = next;
        Ok(Flow::Continue)
    }

    fn read_fields(&mut self, fields: &[(String, Reg)], origin: &Origin) -> Result<Vec<ValueHandle>, Stop> {
        fields.iter().map(|(_, r)| self.read(*r, origin)).collect()
    }
}

/// A child's failure as seen by the task that joins it. Effect failures
/// already name the `Task::run` site and pass through unchanged; failures
/// of local child tasks are wrapped with the join site as origin.
fn propagate(child: &FailureObject, join_site: &Origin) -> FailureObject {
    if child.origin == *join_site {
        return child.clone();
    }
    FailureObject {
        kind: child.kind,
        message: child.message.clone(),
        origin: join_site.clone(),
        cause: Some(Box::new(child.clone())),
    }
}

pub(crate) fn release_frame(heap: &mut Heap, regs: Vec<Slot>) {
    for s in regs {
        if let Slot::Val(h) = s {
            heap.release(h);
        }
    }
}

pub(crate) fn alloc_literal(heap: &mut Heap, l: &Literal) -> Result<ValueHandle, HeapError> {
    match l {
        Literal::Unit => heap.alloc_unit(),
        Literal::Bool(b) => heap.alloc_bool(*b),
        Literal::Int(i) => heap.alloc_int(*i),
        Literal::Str(s) => heap.alloc_str(s),
        Literal::Bytes(b) => heap.alloc_bytes(b),
    }
}

fn matches_pattern(heap: &Heap, h: ValueHandle, p: &Pattern) -> bool {
    match p {
        Pattern::Wildcard => true,
        Pattern::Variant { enum_name, variant } => heap.enum_tag(h) == Some((enum_name.as_str(), variant.as_str())),
        Pattern::Literal(l) => match l {
            Literal::Unit => heap.kind(h) == Kind::Unit,
            Literal::Bool(b) => heap.as_bool(h) == Some(*b),
            Literal::Int(i) => heap.as_int(h) == Some(*i),
            Literal::Str(s) => heap.as_str(h) == Some(s.as_str()),
            Literal::Bytes(b) => heap.as_bytes(h) == Some(b.as_slice()),
        },
    }
}

/// Short, host-independent description of a value for messages.
fn describe(heap: &Heap, h: ValueHandle) -> String {
    match heap.kind(h) {
        Kind::Enum => {
            let (e, v) = heap.enum_tag(h).expect("enum");
            format!("{e}::{v}")
        }
        Kind::Int => format!("Int {}", heap.as_int(h).expect("int")),
        Kind::Bool => format!("Bool {}", heap.as_bool(h).expect("bool")),
        k => k.name().to_string(),
    }
}

fn binary(heap: &mut Heap, op: BinOp, a: ValueHandle, b: ValueHandle, origin: &Origin) -> Result<ValueHandle, Stop> {
    let alloc = |r: Result<ValueHandle, HeapError>| r.map_err(|e| alloc_failure(e, origin));
    let mismatch = |heap: &Heap| {
        logic(
            format!("`{}` is not defined for {} and {}", op.symbol(), describe_kind(heap, a), describe_kind(heap, b)),
            origin,
        )
    };
    match op {
        BinOp::Eq | BinOp::Ne => {
            let eq = heap.structural_eq(a, b);
            alloc(heap.alloc_bool(eq == (op == BinOp::Eq)))
        }
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
            let (Some(x), Some(y)) = (heap.as_int(a), heap.as_int(b)) else {
                return Err(mismatch(heap));
            };
            if op == BinOp::Div && y == 0 {
                return Err(logic("division by zero", origin));
            }
            let r = match op {
                BinOp::Add => x.checked_add(y),
                BinOp::Sub => x.checked_sub(y),
                BinOp::Mul => x.checked_mul(y),
                _ => x.checked_div(y),
            };
            match r {
                Some(v) => alloc(heap.alloc_int(v)),
                None => Err(fail(
                    FailureKind::Overflow,
                    format!("integer overflow in {x} {} {y}", op.symbol()),
                    origin,
                )),
            }
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = if let (Some(x), Some(y)) = (heap.as_int(a), heap.as_int(b)) {
                x.cmp(&y)
            } else if let (Some(x), Some(y)) = (heap.as_str(a), heap.as_str(b)) {
                x.as_bytes().cmp(y.as_bytes())
            } else {
                return Err(mismatch(heap));
            };
            let r = match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                _ => ord.is_ge(),
            };
            alloc(heap.alloc_bool(r))
        }
        BinOp::Concat => match (heap.kind(a), heap.kind(b)) {
            (Kind::Str, Kind::Str) => {
                let s = format!("{}{}", heap.as_str(a).expect("str"), heap.as_str(b).expect("str"));
                alloc(heap.alloc_str(&s))
            }
            (Kind::Bytes, Kind::Bytes) => {
                let mut v = heap.as_bytes(a).expect("bytes").to_vec();
                v.extend_from_slice(heap.as_bytes(b).expect("bytes"));
                alloc(heap.alloc_bytes(&v))
            }
            (Kind::List, Kind::List) => {
                let mut items = heap.list_items(a).expect("list");
                items.extend(heap.list_items(b).expect("list"));
                let r = heap.alloc_list(&items);
                heap.release_all(items);
                alloc(r)
            }
            _ => Err(mismatch(heap)),
        },
    }
}

fn describe_kind(heap: &Heap, h: ValueHandle) -> &'static str {
    heap.kind(h).name()
}

fn builtin_call(heap: &mut Heap, b: Builtin, args: &[ValueHandle], origin: &Origin) -> Result<ValueHandle, Stop> {
    let alloc = |r: Result<ValueHandle, HeapError>| r.map_err(|e| alloc_failure(e, origin));
    let x = args[0];
    match b {
        Builtin::Len => {
            let n = match heap.kind(x) {
                Kind::List => heap.list_len(x).expect("list"),
                Kind::Str => heap.as_str(x).expect("str").chars().count(),
                Kind::Bytes => heap.as_bytes(x).expect("bytes").len(),
                k => return Err(logic(format!("len is not defined for {}", k.name()), origin)),
            };
            alloc(heap.alloc_int(n as i64))
        }
        Builtin::At => {
            let Some(i) = heap.as_int(args[1]) else {
                return Err(logic(format!("at: index must be Int, found {}", describe_kind(heap, args[1])), origin));
            };
            let len = match heap.kind(x) {
                Kind::List => heap.list_len(x).expect("list"),
                Kind::Bytes => heap.as_bytes(x).expect("bytes").len(),
                k => return Err(logic(format!("at is not defined for {}", k.name()), origin)),
            };
            if i < 0 || i as u64 >= len as u64 {
                return Err(logic(format!("index {i} out of bounds for length {len}"), origin));
            }
            match heap.kind(x) {
                Kind::List => Ok(heap.list_item(x, i as usize).expect("in bounds")),
                _ => {
                    let byte = heap.as_bytes(x).expect("bytes")[i as usize];
                    alloc(heap.alloc_int(byte as i64))
                }
            }
        }
        Builtin::Push => {
            let Some(mut items) = heap.list_items(x) else {
                return Err(logic(format!("push is not defined for {}", describe_kind(heap, x)), origin));
            };
            items.push(heap.dup(args[1]));
            let r = heap.alloc_list(&items);
            heap.release_all(items);
            alloc(r)
        }
        Builtin::Str => {
            let s = match heap.kind(x) {
                Kind::Str => return Ok(heap.dup(x)),
                Kind::Int => heap.as_int(x).expect("int").to_string(),
                Kind::Bool => heap.as_bool(x).expect("bool").to_string(),
                _ => encode_canonical(&heap.export(x)),
            };
            alloc(heap.alloc_str(&s))
        }
        Builtin::Bytes => match heap.kind(x) {
            Kind::Bytes => Ok(heap.dup(x)),
            Kind::Str => {
                let b = heap.as_str(x).expect("str").as_bytes().to_vec();
                alloc(heap.alloc_bytes(&b))
            }
            k => Err(logic(format!("bytes is not defined for {}", k.name()), origin)),
        },
    }
}
