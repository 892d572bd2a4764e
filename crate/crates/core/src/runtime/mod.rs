//! The evaluator and task scheduler.
//!
//! An api invocation is one root task. Tasks run in *slices* between
//! suspension points (`Task::run` spawns, joins on unfinished children,
//! completion, failure, `yield`); the driver repeatedly picks a batch of up
//! to `workers` ready tasks, runs their slices in parallel, and applies the
//! outcomes in batch order. Everything observable — event order, task ids,
//! effect order — is therefore a function of the batch sequence, which is
//! either derived from the seed or read back from a replay log.
//!
//! Every runtime fault becomes a [`FailureObject`]; a failed invocation
//! returns `APIResult::Error(<failure record>)` and never unwinds into the
//! host.

mod driver;
mod exec;
mod failure;
mod ir;
mod snapshot;

#[cfg(test)]
mod tests;

use std::cell::RefCell;
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::bapi::{conforms, Registry};
use crate::heap::{ConfigError, GcConfig, GcStats, Heap, Value, KIB, MIB};
use crate::lang::{program_hash, validate, Diagnostic, FnKind, Program};
use crate::trace::{CorrelationId, LogHeader, ReplayDivergence, ReplayLog};

pub use failure::{FailureKind, FailureObject, Origin};
pub use snapshot::{resume, resume_at, ResumeError, SnapshotFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Seeded scheduling, nothing logged.
    Free,
    /// Seeded scheduling; every boundary crossing and batch is logged.
    Record,
    /// Batches and effect responses come from a log.
    Replay,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Free => "free",
            Mode::Record => "record",
            Mode::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub workers: usize,
    pub mode: Mode,
    pub seed: u64,
}

/// Per-invocation resource limits. Exceeding one fails the offending task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Instructions one task may execute (`Timeout`).
    pub max_instructions: u64,
    /// Tasks one invocation may create, root included (`LogicError`).
    pub max_tasks: u64,
    /// Call frames per task (`LogicError`).
    pub max_depth: usize,
}

impl Default for Limits {
    fn default() -> Limits {
        Limits {
            max_instructions: 50_000_000,
            max_tasks: 100_000,
            max_depth: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub gc: GcConfig,
    pub sched: SchedulerConfig,
    pub limits: Limits,
    /// Emit a `SnapshotMark` (and keep the snapshot) every this many batches.
    pub snapshot_every: Option<u64>,
}

impl Default for RuntimeConfig {
    fn default() -> RuntimeConfig {
        Profile::Embedded.config()
    }
}

impl RuntimeConfig {
    pub fn with_mode(mut self, mode: Mode) -> RuntimeConfig {
        self.sched.mode = mode;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> RuntimeConfig {
        self.sched.workers = workers;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> RuntimeConfig {
        self.sched.seed = seed;
        self
    }

    pub fn with_snapshots(mut self, every: u64) -> RuntimeConfig {
        self.snapshot_every = Some(every);
        self
    }

    /// The settings recorded in a log header. Everything that can change
    /// observable behavior is here; worker count and seed are informational.
    pub fn to_json(&self) -> Json {
        json!({
            "gc": {
                "nursery_bytes": self.gc.nursery_bytes,
                "heap_limit_bytes": self.gc.heap_limit_bytes,
                "old_gen_decrement_budget": self.gc.old_gen_decrement_budget,
            },
            "limits": {
                "max_instructions": self.limits.max_instructions,
                "max_tasks": self.limits.max_tasks,
                "max_depth": self.limits.max_depth,
            },
            "mode": self.sched.mode.name(),
            "seed": self.sched.seed,
            "snapshot_every": self.snapshot_every,
            "workers": self.sched.workers,
        })
    }

    pub fn from_json(j: &Json) -> Option<RuntimeConfig> {
        let n = |v: &Json, k: &str| v.get(k).and_then(Json::as_u64);
        let gc = j.get("gc")?;
        let limits = j.get("limits")?;
        let gc = GcConfig {
            nursery_bytes: n(gc, "nursery_bytes")? as usize,
            heap_limit_bytes: n(gc, "heap_limit_bytes")? as usize,
            old_gen_decrement_budget: n(gc, "old_gen_decrement_budget")? as usize,
        };
        gc.validate().ok()?;
        let mode = match j.get("mode")?.as_str()? {
            "free" => Mode::Free,
            "record" => Mode::Record,
            "replay" => Mode::Replay,
            _ => return None,
        };
        let snapshot_every = match j.get("snapshot_every")? {
            Json::Null => None,
            v => Some(v.as_u64().filter(|k| *k > 0)?),
        };
        Some(RuntimeConfig {
            gc,
            sched: SchedulerConfig {
                workers: n(j, "workers")?.max(1) as usize,
                mode,
                seed: n(j, "seed")?,
            },
            limits: Limits {
                max_instructions: n(limits, "max_instructions")?,
                max_tasks: n(limits, "max_tasks")?,
                max_depth: n(limits, "max_depth")? as usize,
            },
            snapshot_every,
        })
    }
}

/// Deployment presets. They differ in resources only, never in behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 256 KiB nursery, one cooperative worker.
    Embedded,
    /// 4 MiB nursery, four workers.
    Server,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "embedded" => Some(Profile::Embedded),
            "server" => Some(Profile::Server),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Embedded => "embedded",
            Profile::Server => "server",
        }
    }

    pub fn config(self) -> RuntimeConfig {
        let (nursery, limit, workers) = match self {
            Profile::Embedded => (256 * KIB, 64 * MIB, 1),
            Profile::Server => (4 * MIB, 1024 * MIB, 4),
        };
        RuntimeConfig {
            gc: GcConfig::new(nursery, limit).expect("profile GcConfig is valid"),
            sched: SchedulerConfig {
                workers,
                mode: Mode::Free,
                seed: 0,
            },
            limits: Limits::default(),
            snapshot_every: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InvocationStats {
    pub batches: u64,
    pub tasks: u64,
    pub instructions: u64,
    pub effects: u64,
}

/// The result of one api invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    /// Always `APIResult`-shaped.
    pub result: Value,
    /// Set when the result is a captured failure rather than a value the
    /// program produced.
    pub failure: Option<FailureObject>,
    pub yielded: bool,
    pub corr: CorrelationId,
    pub stats: InvocationStats,
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        self.result.api_result_ok() == Some(true)
    }

    /// Canonical interchange text of the result.
    pub fn canonical(&self) -> String {
        crate::bapi::encode_canonical(&self.result)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("program is not valid: {}", .0.iter().map(|d| d.message.clone()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no api named `{0}`")]
    UnknownApi(String),
    #[error("arguments do not match api `{api}`: {reason}")]
    ArgumentMismatch { api: String, reason: String },
    #[error(transparent)]
    Replay(#[from] ReplayDivergence),
}

impl From<ConfigError> for RuntimeError {
    fn from(e: ConfigError) -> RuntimeError {
        RuntimeError::Config(e.to_string())
    }
}

/// The remote end of an invocation made through a network boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub corr: CorrelationId,
    pub node: String,
    /// Seq of the caller's `EffectRequest`.
    pub seq: u64,
}

/// What a capability handler can learn about the request it is serving.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectContext {
    pub corr: CorrelationId,
    pub node: String,
    pub seq: u64,
}

thread_local! {
    static EFFECT_CONTEXT: RefCell<Option<EffectContext>> = const { RefCell::new(None) };
}

/// The request being served, when called from inside a capability handler.
/// Handlers run on the driving thread, synchronously.
pub fn effect_context() -> Option<EffectContext> {
    EFFECT_CONTEXT.with(|c| c.borrow().clone())
}

pub(crate) fn with_effect_context<R>(ctx: EffectContext, f: impl FnOnce() -> R) -> R {
    let prev = EFFECT_CONTEXT.with(|c| c.replace(Some(ctx)));
    let out = f();
    EFFECT_CONTEXT.with(|c| *c.borrow_mut() = prev);
    out
}

pub(crate) enum Journal {
    Free,
    Record(ReplayLog),
    Replay(Arc<ReplayLog>),
}

/// One node's runtime: a validated program, its heap, its capability
/// registry and (when recording) its log.
pub struct Runtime {
    node: String,
    program: Arc<Program>,
    program_hash: String,
    code: Arc<ir::Compiled>,
    registry: Arc<Registry>,
    config: RuntimeConfig,
    heap: Mutex<Heap>,
    pool: Option<rayon::ThreadPool>,
    journal: Journal,
    seq: u64,
    invocations: u64,
    next_task: u64,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("node", &self.node)
            .field("program_hash", &self.program_hash)
            .field("config", &self.config)
            .field("seq", &self.seq)
            .finish()
    }
}

impl Runtime {
    /// Validates `program` and starts a runtime in `config.sched.mode`
    /// (`Free` or `Record`; replays go through [`replay`]).
    pub fn new(program: Program, registry: Arc<Registry>, config: RuntimeConfig) -> Result<Runtime, RuntimeError> {
        if config.sched.mode == Mode::Replay {
            return Err(RuntimeError::Config("replay runtimes are created by `replay`".into()));
        }
        Runtime::build("local", program, registry, config, None)
    }

    fn build(
        node: &str,
        program: Program,
        registry: Arc<Registry>,
        config: RuntimeConfig,
        replay: Option<Arc<ReplayLog>>,
    ) -> Result<Runtime, RuntimeError> {
        let diags = validate(&program);
        if !diags.is_empty() {
            return Err(RuntimeError::Invalid(diags));
        }
        config.gc.validate()?;
        if config.sched.workers == 0 {
            return Err(RuntimeError::Config("workers must be at least 1".into()));
        }
        if config.snapshot_every == Some(0) {
            return Err(RuntimeError::Config("snapshot interval must be at least 1".into()));
        }
        let pool = if config.sched.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.sched.workers)
                .build()
                .map_err(|e| RuntimeError::Config(e.to_string()))?;
            Some(pool)
        } else {
            None
        };
        let hash = program_hash(&program);
        let journal = match (replay, config.sched.mode) {
            (Some(log), _) => Journal::Replay(log),
            (None, Mode::Record) => Journal::Record(ReplayLog::new(LogHeader {
                program_hash: hash.clone(),
                node: node.to_string(),
                config: config.to_json(),
            })),
            (None, _) => Journal::Free,
        };
        Ok(Runtime {
            node: node.to_string(),
            code: Arc::new(ir::compile(&program)),
            program: Arc::new(program),
            program_hash: hash,
            registry,
            config,
            heap: Mutex::new(Heap::new(config.gc)),
            pool,
            journal,
            seq: 0,
            invocations: 0,
            next_task: 0,
        })
    }

    /// Names the node (used in correlation ids and log headers).
    pub fn with_node(mut self, node: &str) -> Runtime {
        self.node = node.to_string();
        if let Journal::Record(log) = &mut self.journal {
            log.header.node = node.to_string();
        }
        self
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn program_hash(&self) -> &str {
        &self.program_hash
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    /// The log recorded so far (`Record` mode only).
    pub fn log(&self) -> Option<&ReplayLog> {
        match &self.journal {
            Journal::Record(log) => Some(log),
            _ => None,
        }
    }

    pub fn take_log(&mut self) -> Option<ReplayLog> {
        match std::mem::replace(&mut self.journal, Journal::Free) {
            Journal::Record(log) => {
                self.journal = Journal::Record(ReplayLog::new(log.header.clone()));
                Some(log)
            }
            other => {
                self.journal = other;
                None
            }
        }
    }

    pub fn gc_stats(&self) -> GcStats {
        self.heap.lock().stats()
    }

    /// Live value handles; zero between invocations.
    pub fn live_handles(&self) -> usize {
        self.heap.lock().live_handles()
    }

    /// Invokes an api as an external entry point with a fresh correlation id.
    pub fn invoke(&mut self, api: &str, args: &[Value]) -> Result<Outcome, RuntimeError> {
        self.invoke_as(api, args, None)
    }

    /// Invokes an api on behalf of a remote caller, inheriting its
    /// correlation id.
    pub fn invoke_from(&mut self, api: &str, args: &[Value], caller: Caller) -> Result<Outcome, RuntimeError> {
        self.invoke_as(api, args, Some(caller))
    }

    fn invoke_as(&mut self, api: &str, args: &[Value], caller: Option<Caller>) -> Result<Outcome, RuntimeError> {
        self.check_args(api, args)?;
        let corr = match &caller {
            Some(c) => c.corr.clone(),
            None => CorrelationId::mint(&self.node, self.invocations),
        };
        self.invocations += 1;
        Ok(self.run_invocation(api, args, corr, caller)?)
    }

    fn check_args(&self, api: &str, args: &[Value]) -> Result<(), RuntimeError> {
        let f = self
            .program
            .function(api)
            .filter(|f| f.kind == FnKind::Api)
            .ok_or_else(|| RuntimeError::UnknownApi(api.to_string()))?;
        let mismatch = |reason: String| RuntimeError::ArgumentMismatch {
            api: api.to_string(),
            reason,
        };
        if f.params.len() != args.len() {
            return Err(mismatch(format!("expected {} arguments, got {}", f.params.len(), args.len())));
        }
        for (p, a) in f.params.iter().zip(args) {
            conforms(a, &p.ty, &self.program.enums).map_err(|e| mismatch(format!("`{}`: {e}", p.name)))?;
        }
        Ok(())
    }
}

/// Re-executes every invocation in `log` with no live handlers. Batches and
/// effect responses come from the log; everything else is regenerated and
/// must match it event for event.
pub fn replay(program: &Program, log: &ReplayLog, workers: usize) -> Result<Vec<Outcome>, ReplayDivergence> {
    let mut rt = replay_runtime(program, Arc::new(log.clone()), workers)?;
    rt.replay_from(0)
}

pub(crate) fn replay_runtime(
    program: &Program,
    log: Arc<ReplayLog>,
    workers: usize,
) -> Result<Runtime, ReplayDivergence> {
    let node = log.header.node.clone();
    let diverge = |reason: String| ReplayDivergence {
        node: node.clone(),
        seq: 0,
        reason,
    };
    let hash = program_hash(program);
    if hash != log.header.program_hash {
        return Err(diverge(format!(
            "program hash mismatch: log was recorded for {}, program is {}",
            log.header.program_hash, hash
        )));
    }
    let mut config = RuntimeConfig::from_json(&log.header.config)
        .ok_or_else(|| diverge("log header has an unreadable runtime configuration".into()))?;
    config.sched.mode = Mode::Replay;
    config.sched.workers = workers.max(1);
    let rt = Runtime::build(&node, program.clone(), Arc::new(Registry::new()), config, Some(log))
        .map_err(|e| diverge(e.to_string()))?;
    Ok(rt)
}
