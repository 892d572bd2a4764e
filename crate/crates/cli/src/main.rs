//! `edgekernel`: run, record and replay programs, emit bindings, benchmark
//! the collector and simulate deployments.
//!
//! Canonical output goes to stdout and is byte-identical across runs; timing
//! numbers and diagnostics go to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use edgekernel::bapi::bindings::{render_bindings, Flavor};
use edgekernel::bapi::packages::{clock_handler, clock_package, fs_handler, fs_package, log_package, system_millis, DirFs, LogSink};
use edgekernel::bapi::{from_json, Registry};
use edgekernel::distsim::{self, Fate, Scenario};
use edgekernel::heap::bench::{self, parse_size, BenchConfig};
use edgekernel::heap::{GcConfig, Value};
use edgekernel::lang::{self, render_diagnostics, Program, SourceProgram};
use edgekernel::runtime::{self, Mode, Outcome, Profile, Runtime, RuntimeConfig, RuntimeError};
use edgekernel::trace::{EventKind, ReplayLog};

/// Stdout writes that end the process quietly when the reader goes away.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        if writeln!(std::io::stdout().lock(), $($t)*).is_err() {
            std::process::exit(0);
        }
    }};
}

macro_rules! out_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        if write!(std::io::stdout().lock(), $($t)*).is_err() {
            std::process::exit(0);
        }
    }};
}

const OK: u8 = 0;
const PROGRAM_FAILURE: u8 = 1;
const USAGE: u8 = 2;
const DIVERGENCE: u8 = 3;

/// Environment variable selecting a preset: `embedded` or `server`.
const PROFILE_VAR: &str = "EDGEKERNEL_PROFILE";

#[derive(Parser)]
#[command(name = "edgekernel", version, about = "Deterministic runtime for effect-typed programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate an api and print its canonical result.
    Run(RunArgs),
    /// Like `run`, and write a replay log.
    Record {
        #[command(flatten)]
        run: RunArgs,
        /// Log file to write.
        #[arg(long, default_value = "run.ektrace")]
        log: PathBuf,
        /// Take a snapshot every N scheduling steps (written next to the log).
        #[arg(long)]
        snapshot_every: Option<u64>,
    },
    /// Re-execute a recorded log with no live capabilities.
    Replay {
        file: PathBuf,
        log: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Resume from a snapshot instead of replaying from the start.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Emit an OpenAPI or OpenRPC document for the program's apis.
    Bindings {
        file: PathBuf,
        #[arg(long, default_value = "openapi")]
        flavor: String,
        #[arg(long)]
        title: Option<String>,
    },
    /// Allocation-churn benchmark of the collector.
    BenchGc {
        #[arg(long, default_value = "256K")]
        nursery: String,
        #[arg(long, default_value = "8M")]
        live_set: String,
        #[arg(long, default_value_t = 1_000_000)]
        allocs: u64,
        /// Run the allocate-and-drop loop in a heap twice the nursery instead.
        #[arg(long)]
        starvation: bool,
    },
    /// Run a deployment scenario and write its run directory.
    Simulate {
        scenario: PathBuf,
        /// Program file; defaults to the scenario's `program`.
        #[arg(long)]
        program: Option<PathBuf>,
        /// Run directory; defaults to `run-<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay every node log of a run directory on this machine.
    Gather {
        dir: PathBuf,
        #[arg(long)]
        program: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also print the merged causal timeline.
        #[arg(long)]
        timeline: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    api: String,
    /// Arguments as canonical value text (`{"$int":"3"}`), JSON numbers, or
    /// bare strings.
    args: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    nursery: Option<String>,
    #[arg(long)]
    heap_limit: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory served by the `Fs` capability.
    #[arg(long, default_value = ".")]
    fs_root: PathBuf,
}

/// A failure that ends the command with `code`.
struct Fail {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Fail {
    Fail {
        code: USAGE,
        message: message.into(),
    }
}

type CmdResult = Result<u8, Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(run) => cmd_run(&run, None),
        Command::Record { run, log, snapshot_every } => cmd_run(&run, Some((&log, snapshot_every))),
        Command::Replay { file, log, workers, resume } => cmd_replay(&file, &log, workers, resume.as_deref()),
        Command::Bindings { file, flavor, title } => cmd_bindings(&file, &flavor, title),
        Command::BenchGc {
            nursery,
            live_set,
            allocs,
            starvation,
        } => cmd_bench_gc(&nursery, &live_set, allocs, starvation),
        Command::Simulate { scenario, program, out } => cmd_simulate(&scenario, program, out),
        Command::Gather {
            dir,
            program,
            workers,
            timeline,
        } => cmd_gather(&dir, &program, workers, timeline),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Fail> {
    fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_program(path: &Path) -> Result<Program, Fail> {
    let text = String::from_utf8(read(path)?).map_err(|_| usage(format!("{}: not UTF-8", path.display())))?;
    let src = SourceProgram::new(path.display().to_string(), text);
    lang::load(&src).map_err(|diags| usage(render_diagnostics(&src, &diags).trim_end().to_string()))
}

fn size(flag: &str, text: &str) -> Result<usize, Fail> {
    parse_size(text).ok_or_else(|| usage(format!("--{flag}: cannot read size `{text}`")))
}

/// The preset named by `EDGEKERNEL_PROFILE`, or the embedded default.
fn base_config() -> Result<RuntimeConfig, Fail> {
    match std::env::var(PROFILE_VAR) {
        Ok(name) => Profile::parse(&name)
            .map(Profile::config)
            .ok_or_else(|| usage(format!("{PROFILE_VAR}={name}: expected `embedded` or `server`"))),
        Err(_) => Ok(RuntimeConfig::default()),
    }
}

fn config(run: &RunArgs) -> Result<RuntimeConfig, Fail> {
    let mut c = base_config()?;
    if let Some(w) = run.workers {
        c.sched.workers = w;
    }
    if let Some(s) = run.seed {
        c.sched.seed = s;
    }
    if let Some(n) = &run.nursery {
        c.gc.nursery_bytes = size("nursery", n)?;
        c.gc.heap_limit_bytes = c.gc.heap_limit_bytes.max(c.gc.nursery_bytes * 2);
    }
    if let Some(l) = &run.heap_limit {
        c.gc.heap_limit_bytes = size("heap-limit", l)?;
    }
    GcConfig::validate(&c.gc).map_err(|e| usage(e.to_string()))?;
    if c.sched.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    Ok(c)
}

fn parse_arg(text: &str) -> Result<Value, Fail> {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(serde_json::Value::Number(n)) => n
            .as_i64()
            .map(Value::Int)
            .ok_or_else(|| usage(format!("argument `{text}` is not a 64-bit integer"))),
        Ok(j) => from_json(&j).map_err(|e| usage(format!("argument `{text}`: {e}"))),
        Err(_) => Ok(Value::str(text)),
    }
}

/// Capabilities the program imports, wired to this host.
fn host_registry(program: &Program, fs_root: &Path) -> (Registry, LogSink) {
    let sink = LogSink::new();
    let mut registry = Registry::new();
    for name in program.imports.iter().map(|i| i.name.as_str()) {
        let _ = match name {
            "Fs" => registry.register(fs_package(), fs_handler(Arc::new(DirFs::new(fs_root)))),
            "Clock" => registry.register(clock_package(), clock_handler(system_millis)),
            "Log" => registry.register(log_package(), sink.handler()),
            _ => continue,
        };
    }
    (registry, sink)
}

fn runtime_error(e: RuntimeError) -> Fail {
    match e {
        RuntimeError::Replay(d) => Fail {
            code: DIVERGENCE,
            message: d.to_string(),
        },
        other => usage(other.to_string()),
    }
}

fn exit_for(outcome: &Outcome) -> u8 {
    if outcome.is_success() {
        OK
    } else {
        PROGRAM_FAILURE
    }
}

fn print_stats(outcome: &Outcome) {
    let s = &outcome.stats;
    eprintln!(
        "stats: batches={} tasks={} instructions={} effects={}",
        s.batches, s.tasks, s.instructions, s.effects
    );
}

fn cmd_run(run: &RunArgs, record: Option<(&PathBuf, Option<u64>)>) -> CmdResult {
    let program = load_program(&run.file)?;
    let mut config = config(run)?;
    if let Some((_, every)) = record {
        config = config.with_mode(Mode::Record);
        if let Some(k) = every {
            config = config.with_snapshots(k);
        }
    }
    let args = run.args.iter().map(|a| parse_arg(a)).collect::<Result<Vec<_>, _>>()?;
    let (registry, sink) = host_registry(&program, &run.fs_root);
    let mut rt = Runtime::new(program, Arc::new(registry), config).map_err(runtime_error)?;
    let outcome = rt.invoke(&run.api, &args).map_err(runtime_error)?;
    for entry in sink.entries() {
        eprintln!("log: {}", edgekernel::bapi::encode_canonical(&entry));
    }
    out!("{}", outcome.canonical());
    print_stats(&outcome);
    if let Some((path, _)) = record {
        let log = rt.take_log().expect("record mode");
        fs::write(path, log.encode()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (seq, bytes) in &log.snapshots {
            let snap = snapshot_path(path, *seq);
            fs::write(&snap, bytes).map_err(|e| usage(format!("{}: {e}", snap.display())))?;
        }
        out!(
            "recorded {} events ({} effect events, {} snapshots) to {}",
            log.events.len(),
            log.effect_events(),
            log.snapshots.len(),
            path.display()
        );
    }
    Ok(exit_for(&outcome))
}

fn snapshot_path(log: &Path, seq: u64) -> PathBuf {
    let stem = log.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    log.with_file_name(format!("{stem}.{seq}.eksnap"))
}

fn cmd_replay(file: &Path, log_path: &Path, workers: usize, resume: Option<&Path>) -> CmdResult {
    let program = load_program(file)?;
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let log = ReplayLog::decode(&read(log_path)?).map_err(|e| Fail {
        code: DIVERGENCE,
        message: format!("{}: {e}", log_path.display()),
    })?;
    let outcomes = match resume {
        None => runtime::replay(&program, &log, workers).map_err(|d| d.to_string()),
        Some(snap) => runtime::resume(&program, &log, &read(snap)?, workers).map_err(|e| e.to_string()),
    };
    let outcomes = outcomes.map_err(|message| {
        out!("REPLAY-DIVERGED");
        Fail {
            code: DIVERGENCE,
            message,
        }
    })?;
    for o in &outcomes {
        out!("{}", o.canonical());
    }
    out!("REPLAY-OK");
    Ok(outcomes.last().map_or(OK, exit_for))
}

fn cmd_bindings(file: &Path, flavor: &str, title: Option<String>) -> CmdResult {
    let program = load_program(file)?;
    let flavor = Flavor::parse(flavor).ok_or_else(|| usage(format!("--flavor: expected `openapi` or `jsonrpc`, got `{flavor}`")))?;
    let title = title.unwrap_or_else(|| file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    out!("{}", render_bindings(&program, &title, flavor));
    Ok(OK)
}

fn micros(d: std::time::Duration) -> String {
    format!("{:.1}us", d.as_secs_f64() * 1e6)
}

fn cmd_bench_gc(nursery: &str, live_set: &str, allocs: u64, starvation: bool) -> CmdResult {
    let nursery = size("nursery", nursery)?;
    let live = size("live-set", live_set)?;
    GcConfig::new(nursery, usize::MAX / 2).map_err(|e| usage(e.to_string()))?;
    if starvation {
        let r = bench::starvation(nursery, allocs);
        out!("allocations={} out_of_memory={} nursery_bytes={nursery} heap_limit_bytes={}", r.allocations, r.out_of_memory, 2 * nursery);
        out!("minor_collections={} reserve_bytes={}", r.stats.minor_collections, r.stats.reserve_bytes);
        eprintln!("elapsed={:.3}s max_pause={} p99_pause={}", r.elapsed.as_secs_f64(), micros(r.stats.max_pause), micros(r.stats.p99_pause));
        return Ok(if r.out_of_memory == 0 { OK } else { PROGRAM_FAILURE });
    }
    let r = bench::run(BenchConfig::new(nursery, live, allocs)).map_err(|e| Fail {
        code: PROGRAM_FAILURE,
        message: e.to_string(),
    })?;
    let s = &r.stats;
    out!(
        "nursery_bytes={nursery} live_set_bytes={live} allocations={} live_bytes_after_build={}",
        r.allocations, r.live_bytes_after_build
    );
    out!(
        "minor_collections={} promoted_bytes={} reserve_bytes={} old_objects={}",
        s.minor_collections, s.promoted_bytes, s.reserve_bytes, s.old_objects
    );
    eprintln!(
        "elapsed={:.3}s max_pause={} p99_pause={} median_pause={}",
        r.elapsed.as_secs_f64(),
        micros(s.max_pause),
        micros(s.p99_pause),
        micros(s.median_pause)
    );
    Ok(OK)
}

fn cmd_simulate(path: &Path, program: Option<PathBuf>, out: Option<PathBuf>) -> CmdResult {
    let text = String::from_utf8(read(path)?).map_err(|_| usage("scenario is not UTF-8"))?;
    let scenario = Scenario::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let program_path = match (program, &scenario.program) {
        (Some(p), _) => p,
        (None, Some(rel)) => path.parent().unwrap_or(Path::new(".")).join(rel),
        (None, None) => return Err(usage("scenario names no program; pass --program")),
    };
    let program = load_program(&program_path)?;
    let run = distsim::simulate(&program, &scenario).map_err(|e| usage(e.to_string()))?;
    let dir = out.unwrap_or_else(|| PathBuf::from(format!("run-{}", scenario.name)));
    run.write_dir(&dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    for (node, o) in &run.outcomes {
        out!("{node} {} {}", o.corr, o.canonical());
    }
    let count = |f: Fate| run.messages.iter().filter(|m| m.fate == f).count();
    out!(
        "messages={} dropped={} duplicated={} virtual_time={}",
        run.messages.len(),
        count(Fate::Dropped),
        count(Fate::Duplicated),
        run.final_time
    );
    for (id, log) in &run.logs {
        out!("{id}.ektrace events={} effect_events={}", log.events.len(), log.effect_events());
    }
    out!("wrote {}", dir.display());
    Ok(OK)
}

fn cmd_gather(dir: &Path, program: &Path, workers: usize, timeline: bool) -> CmdResult {
    let program = load_program(program)?;
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let gathered = distsim::read_run_dir(dir).map_err(|e| usage(e.to_string()))?;
    let results = distsim::verify(&program, &gathered.logs, workers).map_err(|e| {
        out!("REPLAY-DIVERGED");
        Fail {
            code: DIVERGENCE,
            message: e.to_string(),
        }
    })?;
    let recorded: BTreeMap<String, Vec<String>> = gathered
        .manifest
        .get("nodes")
        .and_then(|n| n.as_array())
        .into_iter()
        .flatten()
        .filter_map(|n| {
            let id = n.get("id")?.as_str()?.to_string();
            let rs = n.get("results")?.as_array()?.iter().filter_map(|r| r.as_str().map(str::to_string)).collect();
            Some((id, rs))
        })
        .collect();
    if recorded != results {
        out!("REPLAY-DIVERGED");
        return Err(Fail {
            code: DIVERGENCE,
            message: "replayed results differ from the manifest".into(),
        });
    }
    for (id, rs) in &results {
        for r in rs {
            out!("{id} {r}");
        }
    }
    let logs: Vec<(&str, &ReplayLog)> = gathered.logs.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let merged = edgekernel::trace::merge_timelines(&logs);
    for call in merged.undelivered() {
        out!("undelivered {} {}#{} {}", call.corr, call.caller, call.request_seq, call.api);
    }
    if timeline {
        out_raw!("{}", merged.render());
    }
    let requests: usize = gathered.logs.values().map(|l| l.count(EventKind::EffectRequest)).sum();
    out!("nodes={} effect_requests={requests}", results.len());
    out!("REPLAY-OK");
    Ok(OK)
}
