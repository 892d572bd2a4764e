use std::sync::atomic::{AtomicU64, Ordering};

use proptest::prelude::*;

use super::*;
use crate::bapi::packages::{fs_handler, fs_package, log_package, LogSink, MemFs};
use crate::bapi::{CapabilityPackage, HandlerError, OperationSig};
use crate::lang::{load, SourceProgram, TypeExpr};
use crate::trace::EventKind;

const READFILE: &str = r#"import Fs;
action doit(): ByteBuffer {
  let data = Task::run<Fs::ReadFile>("file.txt");
  match(data) {
    APIResult::Success => { return data.value; }
    _ => { yield APIResult::error("Failed read"); }
  }
}

api main(): APIResult<Int, String> {
  let result = doit();
  return APIResult::success(result);
}
"#;

fn program(text: &str) -> Program {
    load(&SourceProgram::new("test.bsql", text)).unwrap_or_else(|d| panic!("{d:?}"))
}

fn fs(files: &[(&str, &[u8])]) -> Registry {
    let store = files.iter().fold(MemFs::new(), |s, (p, d)| s.with_file(p, d.to_vec()));
    Registry::new().with(fs_package(), fs_handler(Arc::new(store)))
}

/// `Count::Tick(n)` answers `Success(n)` and counts calls.
fn counter(count: Arc<AtomicU64>) -> (CapabilityPackage, crate::bapi::Handler) {
    let package = CapabilityPackage {
        name: "Count".into(),
        operations: vec![OperationSig::new(
            "Tick",
            &[("n", TypeExpr::Int)],
            TypeExpr::ApiResult(Box::new(TypeExpr::Int), Box::new(TypeExpr::String)),
        )],
    };
    let handler: crate::bapi::Handler = Arc::new(move |_, req| {
        count.fetch_add(1, Ordering::SeqCst);
        Ok(Value::success(req.field("n").cloned().unwrap_or(Value::Unit)))
    });
    (package, handler)
}

fn run(text: &str, registry: Registry, config: RuntimeConfig) -> (Outcome, Runtime) {
    let mut rt = Runtime::new(program(text), Arc::new(registry), config).unwrap();
    let out = rt.invoke("main", &[]).unwrap();
    (out, rt)
}

fn record(text: &str, registry: Registry, config: RuntimeConfig) -> (Outcome, ReplayLog) {
    let (out, mut rt) = run(text, registry, config.with_mode(Mode::Record));
    (out, rt.take_log().unwrap())
}

#[test]
fn readfile_success() {
    let (out, rt) = run(READFILE, fs(&[("file.txt", b"hello")]), RuntimeConfig::default());
    assert_eq!(out.result, Value::success(Value::bytes(b"hello")));
    assert!(!out.yielded && out.failure.is_none());
    assert_eq!(rt.live_handles(), 0);
}

#[test]
fn readfile_failure() {
    let (out, rt) = run(READFILE, fs(&[]), RuntimeConfig::default());
    assert_eq!(out.result, Value::error(Value::str("Failed read")));
    assert!(out.yielded && out.failure.is_none());
    assert_eq!(out.canonical(), r#"{"$enum":"APIResult","$variant":"Error","info":"Failed read"}"#);
    assert_eq!(rt.live_handles(), 0);
}

#[test]
fn constant_addition() {
    let (out, _) = run(
        "api main(): APIResult<Int,String> { return APIResult::success(2 + 3); }",
        Registry::new(),
        RuntimeConfig::default(),
    );
    assert_eq!(out.result, Value::success(Value::Int(5)));
}

const DEEP_YIELD: &str = r#"import Count;
action c(): Int {
  Task::run<Count::Tick>(1);
  yield APIResult::error("deep");
  Task::run<Count::Tick>(100);
  return 0;
}
action b(): Int {
  let x = c();
  Task::run<Count::Tick>(100);
  return x;
}
action a(): Int {
  let x = b();
  Task::run<Count::Tick>(100);
  return x;
}
api main(): APIResult<Int, String> {
  let x = a();
  Task::run<Count::Tick>(100);
  return APIResult::success(x);
}
"#;

#[test]
fn yield_skips_every_unwound_statement() {
    let count = Arc::new(AtomicU64::new(0));
    let (pkg, h) = counter(count.clone());
    let (out, rt) = run(DEEP_YIELD, Registry::new().with(pkg, h), RuntimeConfig::default());
    assert_eq!(out.result, Value::error(Value::str("deep")));
    assert_eq!(count.load(Ordering::SeqCst), 1);
    assert_eq!(rt.live_handles(), 0);
}

#[test]
fn yield_in_api_body_equals_return() {
    let a = run("api main(): APIResult<Int,String> { yield APIResult::success(7); }", Registry::new(), RuntimeConfig::default()).0;
    let b = run("api main(): APIResult<Int,String> { return APIResult::success(7); }", Registry::new(), RuntimeConfig::default()).0;
    assert_eq!(a.result, b.result);
    assert!(a.yielded && !b.yielded);
}

#[test]
fn yield_cancels_blocked_sibling() {
    let text = r#"import Count;
action slow(): Int { let r = Task::run<Count::Tick>(5); return 1; }
api main(): APIResult<Int, String> {
  let t = Task::run<slow>();
  yield APIResult::error("early");
}
"#;
    let count = Arc::new(AtomicU64::new(0));
    let (pkg, h) = counter(count);
    let (out, log) = record(text, Registry::new().with(pkg, h), RuntimeConfig::default());
    assert_eq!(out.result, Value::error(Value::str("early")));
    let kinds: Vec<EventKind> = log.events.iter().map(|e| e.kind).collect();
    let y = kinds.iter().position(|k| *k == EventKind::Yield).unwrap();
    let exit = kinds.iter().position(|k| *k == EventKind::ApiExit).unwrap();
    assert!(kinds[y..exit].contains(&EventKind::Cancel), "{kinds:?}");
    assert_eq!(exit, kinds.len() - 1);
}

#[test]
fn unregistered_capability_is_a_failure() {
    let (out, rt) = run(READFILE, Registry::new(), RuntimeConfig::default());
    let f = out.failure.expect("failure");
    assert_eq!(f.kind, FailureKind::EffectError);
    assert!(f.message.contains("capability not available"), "{f}");
    assert_eq!(out.result.api_result_ok(), Some(false));
    assert_eq!(rt.live_handles(), 0);
}

#[test]
fn invalid_response_is_a_validation_failure() {
    let bad: crate::bapi::Handler = Arc::new(|_, _| Ok(Value::Int(3)));
    let (out, _) = run(READFILE, Registry::new().with(fs_package(), bad), RuntimeConfig::default());
    let f = out.failure.expect("failure");
    assert_eq!(f.kind, FailureKind::EffectError);
    assert!(f.message.contains("validation"), "{f}");
}

#[test]
fn handler_errors_and_timeouts_are_typed() {
    let failing: crate::bapi::Handler = Arc::new(|_, _| Err(HandlerError::Failed("disk on fire".into())));
    let f = run(READFILE, Registry::new().with(fs_package(), failing), RuntimeConfig::default()).0.failure.unwrap();
    assert_eq!(f.kind, FailureKind::EffectError);
    let slow: crate::bapi::Handler = Arc::new(|_, _| Err(HandlerError::Timeout("deadline".into())));
    let f = run(READFILE, Registry::new().with(fs_package(), slow), RuntimeConfig::default()).0.failure.unwrap();
    assert_eq!(f.kind, FailureKind::Timeout);
    let panicking: crate::bapi::Handler = Arc::new(|_, _| panic!("boom"));
    let f = run(READFILE, Registry::new().with(fs_package(), panicking), RuntimeConfig::default()).0.failure.unwrap();
    assert_eq!(f.kind, FailureKind::EffectError);
}

#[test]
fn logic_errors_become_failure_objects() {
    let cases = [
        ("function f(x: Int): Int { return 10 / x; }\napi main(): APIResult<Int,String> { return APIResult::success(f(0)); }", FailureKind::LogicError),
        ("function f(x: Int): Int { return x * x; }\napi main(): APIResult<Int,String> { return APIResult::success(f(9223372036854775807)); }", FailureKind::Overflow),
        ("enum E { A, B }\nfunction f(x: Int): Int { match(x) { E::A => { return 1; } E::B => { return 2; } } }\napi main(): APIResult<Int,String> { return APIResult::success(f(1)); }", FailureKind::MatchNonExhaustive),
        ("function f(): Int { return at([1], 3); }\napi main(): APIResult<Int,String> { return APIResult::success(f()); }", FailureKind::LogicError),
        ("function f(n: Int): Int { return f(n + 1); }\napi main(): APIResult<Int,String> { return APIResult::success(f(0)); }", FailureKind::LogicError),
    ];
    for (text, kind) in cases {
        let (out, rt) = run(text, Registry::new(), RuntimeConfig::default());
        let f = out.failure.unwrap_or_else(|| panic!("{text}: {:?}", out.result));
        assert_eq!(f.kind, kind, "{text}: {f}");
        assert_eq!(out.result, Value::error(f.to_value()));
        assert_eq!(f.origin.function, "f");
        assert_eq!(rt.live_handles(), 0, "{text}");
    }
}

#[test]
fn child_failure_is_wrapped_at_join() {
    let text = "action bad(): Int { return 1 / 0; }\napi main(): APIResult<Int,String> { let t = Task::run<bad>(); return APIResult::success(t + 1); }";
    let f = run(text, Registry::new(), RuntimeConfig::default()).0.failure.unwrap();
    assert_eq!(f.origin.function, "main");
    let cause = f.cause.as_deref().unwrap();
    assert_eq!((cause.kind, cause.origin.function.as_str()), (FailureKind::LogicError, "bad"));
    assert_eq!(f.root_cause(), cause);
}

#[test]
fn unjoined_failed_child_fails_parent() {
    let text = "action bad(): Int { return 1 / 0; }\napi main(): APIResult<Int,String> { let t = Task::run<bad>(); return APIResult::success(1); }";
    let f = run(text, Registry::new(), RuntimeConfig::default()).0.failure.unwrap();
    assert_eq!(f.root_cause().origin.function, "bad");
}

#[test]
fn pure_function_is_referentially_transparent() {
    let text = "function sq(xs: List<Int>): List<Int> { return push(xs, len(xs) * len(xs)); }\napi main(): APIResult<Bool,String> { return APIResult::success(sq([1, 2]) == sq([1, 2])); }";
    let (out, log) = record(text, Registry::new(), RuntimeConfig::default());
    assert_eq!(out.result, Value::success(Value::Bool(true)));
    assert_eq!(log.effect_events(), 0);
}

#[test]
fn failure_leaves_bound_values_intact() {
    // The child fails after deriving from `xs`; the parent observes `xs`
    // afterwards (schedules vary by seed) and must see it unchanged.
    let text = r#"import Log;
action boom(xs: List<Int>): Int { let ys = push(xs, 4); return at(ys, 10); }
api main(): APIResult<Int,String> {
  let xs = [1, 2, 3];
  let before = str(xs);
  let t = Task::run<boom>(xs);
  Task::run<Log::Emit>(before);
  Task::run<Log::Emit>(str(xs));
  return APIResult::success(t);
}
"#;
    let mut both = 0;
    for seed in 0..20 {
        let sink = LogSink::new();
        let registry = Registry::new().with(log_package(), sink.handler());
        let mut rt = Runtime::new(program(text), Arc::new(registry), RuntimeConfig::default().with_seed(seed)).unwrap();
        let out = rt.invoke("main", &[]).unwrap();
        assert_eq!(out.failure.unwrap().root_cause().origin.function, "boom");
        // Log calls still in flight when the join fails are cancelled.
        let expected = Value::str(crate::bapi::encode_canonical(&Value::List(vec![Value::Int(1), Value::Int(2), Value::Int(3)])));
        let entries = sink.entries();
        assert!(entries.iter().all(|e| *e == expected), "seed {seed}: {entries:?}");
        both += (entries.len() == 2) as u32;
        assert_eq!(rt.live_handles(), 0);
    }
    assert!(both > 0);
}

const FANOUT: &str = r#"function work(n: Int): Int { return n * n + 1; }
action leaf(n: Int): Int { return work(n); }
action pair(n: Int): Int {
  let a = Task::run<leaf>(n);
  let b = Task::run<leaf>(n + 1);
  return a * 3 + b;
}
api main(): APIResult<List<Int>,String> {
  let a = Task::run<pair>(1);
  let b = Task::run<pair>(2);
  let c = Task::run<pair>(3);
  let d = Task::run<leaf>(9);
  return APIResult::success([a, b, c, d]);
}
"#;

#[test]
fn results_are_schedule_independent() {
    let expected = run(FANOUT, Registry::new(), RuntimeConfig::default()).0.canonical();
    for workers in [1, 2, 4] {
        for seed in 0..50 {
            let config = RuntimeConfig::default().with_workers(workers).with_seed(seed);
            let (out, rt) = run(FANOUT, Registry::new(), config);
            assert_eq!(out.canonical(), expected, "workers {workers} seed {seed}");
            assert_eq!(rt.live_handles(), 0);
        }
    }
}

#[test]
fn free_mode_interleaving_is_reproducible() {
    let logs: Vec<Vec<u8>> = (0..100)
        .map(|_| record(FANOUT, Registry::new(), RuntimeConfig::default().with_seed(7)).1.encode())
        .collect();
    assert!(logs.iter().all(|l| *l == logs[0]));
    let other = record(FANOUT, Registry::new(), RuntimeConfig::default().with_seed(8)).1.encode();
    assert_ne!(other, logs[0], "seed should change the interleaving");
}

#[test]
fn pure_log_has_no_effect_events() {
    let (_, log) = record(FANOUT, Registry::new(), RuntimeConfig::default());
    assert_eq!(log.effect_events(), 0);
    assert_eq!(log.events[0].kind, EventKind::ApiEnter);
    assert_eq!(log.events.last().unwrap().kind, EventKind::ApiExit);
    assert!(log.count(EventKind::ScheduleChoice) > 0);
}

#[test]
fn readfile_replays_without_handlers() {
    for files in [&[("file.txt", &b"hello"[..])][..], &[]] {
        let (out, log) = record(READFILE, fs(files), RuntimeConfig::default());
        assert_eq!(log.count(EventKind::EffectRequest), 1);
        assert_eq!(log.count(EventKind::EffectResponse), 1);
        let decoded = ReplayLog::decode(&log.encode()).unwrap();
        for workers in [1, 4] {
            let replayed = replay(&program(READFILE), &decoded, workers).unwrap();
            assert_eq!(replayed.len(), 1);
            assert_eq!(replayed[0].canonical(), out.canonical());
        }
    }
}

#[test]
fn replay_across_worker_counts() {
    let count = Arc::new(AtomicU64::new(0));
    let (pkg, h) = counter(count);
    let text = format!(
        "import Count;\n{}",
        FANOUT.replace("return work(n);", "let t = Task::run<Count::Tick>(n); return work(n);")
    );
    for seed in 0..5 {
        let config = RuntimeConfig::default().with_seed(seed);
        let (out, log) = record(&text, Registry::new().with(pkg.clone(), h.clone()), config);
        for workers in [1, 2, 4] {
            let replayed = replay(&program(&text), &log, workers).unwrap();
            assert_eq!(replayed[0].canonical(), out.canonical());
        }
        let (out4, _) = record(&text, Registry::new().with(pkg.clone(), h.clone()), config.with_workers(4));
        assert_eq!(out4.canonical(), out.canonical());
    }
}

#[test]
fn replay_rejects_other_program() {
    let (_, log) = record(READFILE, fs(&[]), RuntimeConfig::default());
    let other = program(&READFILE.replace("Failed read", "Failed reed"));
    let err = replay(&other, &log, 1).unwrap_err();
    assert_eq!(err.seq, 0);
    assert!(err.reason.contains("hash"), "{err}");
}

#[test]
fn mutated_response_is_flagged() {
    let (out, log) = record(READFILE, fs(&[("file.txt", b"hello")]), RuntimeConfig::default());
    let mut mutated = log.clone();
    let i = mutated.events.iter().position(|e| e.kind == EventKind::EffectResponse).unwrap();
    let text = mutated.events[i].to_canonical().replace("aGVsbG8=", "aGVsbG9=");
    mutated.events[i] = crate::trace::TraceEvent::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
    match replay(&program(READFILE), &mutated, 1) {
        Err(d) => assert!(d.seq as usize >= i),
        Ok(r) => assert_ne!(r[0].canonical(), out.canonical()),
    }
    let mut mutated = log.clone();
    let i = mutated.events.iter().position(|e| e.kind == EventKind::EffectRequest).unwrap();
    let text = mutated.events[i].to_canonical().replace("file.txt", "file.txu");
    mutated.events[i] = crate::trace::TraceEvent::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
    let d = replay(&program(READFILE), &mutated, 1).unwrap_err();
    assert_eq!(d.seq as usize, i);
}

#[test]
fn several_invocations_share_one_log() {
    let p = program(READFILE);
    let mut rt = Runtime::new(
        p.clone(),
        Arc::new(fs(&[("file.txt", b"x")])),
        RuntimeConfig::default().with_mode(Mode::Record),
    )
    .unwrap();
    let a = rt.invoke("main", &[]).unwrap();
    let b = rt.invoke("main", &[]).unwrap();
    assert_ne!(a.corr, b.corr);
    let log = rt.take_log().unwrap();
    assert_eq!(log.invocations().len(), 2);
    let r = replay(&p, &log, 2).unwrap();
    assert_eq!((r[0].corr.clone(), r[1].corr.clone()), (a.corr, b.corr));
}

const LOOPY: &str = r#"import Count;
action step(i: Int, acc: List<Int>): List<Int> {
  let t = Task::run<Count::Tick>(i);
  match(i >= 40) {
    true => { return acc; }
    _ => { return step(i + 1, push(acc, t.value * 2)); }
  }
}
api main(): APIResult<List<Int>, String> {
  let a = Task::run<step>(0, []);
  let b = Task::run<step>(20, [7]);
  return APIResult::success([len(a), len(b), at(a, 3)]);
}
"#;

#[test]
fn snapshot_resume_matches_full_replay() {
    let count = Arc::new(AtomicU64::new(0));
    let (pkg, h) = counter(count);
    let p = program(LOOPY);
    for workers in [1, 4] {
        let config = RuntimeConfig::default().with_snapshots(5).with_workers(workers);
        let (out, log) = record(LOOPY, Registry::new().with(pkg.clone(), h.clone()), config);
        let full = replay(&p, &log, 1).unwrap();
        assert_eq!(full[0].canonical(), out.canonical());
        let marks: Vec<u64> = log.snapshots.keys().copied().collect();
        assert!(marks.len() >= 3, "{marks:?}");
        for mark in marks {
            let resumed = resume_at(&p, &log, mark, workers).unwrap();
            assert_eq!(resumed[0].canonical(), out.canonical(), "mark {mark}");
        }
    }
}

#[test]
fn snapshot_rejects_other_program() {
    let count = Arc::new(AtomicU64::new(0));
    let (pkg, h) = counter(count);
    let (_, log) = record(LOOPY, Registry::new().with(pkg, h), RuntimeConfig::default().with_snapshots(3));
    let (&mark, bytes) = log.snapshots.iter().nth(1).unwrap();
    let other = program(&LOOPY.replace(">= 40", ">= 41"));
    assert!(matches!(resume(&other, &log, bytes, 1), Err(ResumeError::SnapshotIncompatible { .. })));
    let mut corrupt = bytes.clone();
    let n = corrupt.len();
    corrupt[n - 3] ^= 1;
    assert!(resume(&program(LOOPY), &log, &corrupt, 1).is_err());
    assert!(matches!(resume_at(&program(LOOPY), &log, mark + 1, 1), Err(ResumeError::NoSnapshot(_))));
}

#[test]
fn snapshot_bytes_have_no_host_details() {
    let count = Arc::new(AtomicU64::new(0));
    let (pkg, h) = counter(count);
    let (_, log) = record(LOOPY, Registry::new().with(pkg, h), RuntimeConfig::default().with_snapshots(4).with_workers(2));
    let (_, log1) = record(
        LOOPY,
        Registry::new().with(counter(Arc::new(AtomicU64::new(0))).0, counter(Arc::new(AtomicU64::new(0))).1),
        RuntimeConfig::default().with_snapshots(4).with_workers(1),
    );
    for bytes in log.snapshots.values().chain(log1.snapshots.values()) {
        let file = SnapshotFile::decode(bytes).unwrap();
        let text = file.continuation.to_string();
        assert!(!text.contains("0x") && !text.contains("thread"));
    }
}

#[test]
fn limits_fail_tasks_not_the_host() {
    let spin = "function f(n: Int): Int { match(n == 0) { true => { return 0; } _ => { return f(n - 1); } } }\napi main(): APIResult<Int,String> { return APIResult::success(f(3000)); }";
    let mut config = RuntimeConfig::default();
    config.limits.max_instructions = 1000;
    let f = run(spin, Registry::new(), config).0.failure.unwrap();
    assert_eq!(f.kind, FailureKind::Timeout);
    let spawny = "action s(n: Int): Int { match(n == 0) { true => { return 0; } _ => { return Task::run<s>(n - 1); } } }\napi main(): APIResult<Int,String> { return APIResult::success(Task::run<s>(50)); }";
    let mut config = RuntimeConfig::default();
    config.limits.max_tasks = 10;
    let (out, rt) = run(spawny, Registry::new(), config);
    assert_eq!(out.failure.unwrap().root_cause().kind, FailureKind::LogicError);
    assert_eq!(rt.live_handles(), 0);
}

#[test]
fn out_of_memory_is_captured() {
    let text = "function grow(s: String, n: Int): String { match(n == 0) { true => { return s; } _ => { return grow(s ++ s, n - 1); } } }\napi main(): APIResult<Int,String> { return APIResult::success(len(grow(\"ab\", 40))); }";
    let mut config = RuntimeConfig::default();
    config.gc.heap_limit_bytes = 4 << 20;
    config.gc.nursery_bytes = 256 << 10;
    let (out, rt) = run(text, Registry::new(), config);
    assert_eq!(out.failure.unwrap().kind, FailureKind::OutOfMemory);
    assert_eq!(rt.live_handles(), 0);
}

#[test]
fn api_arguments_are_checked() {
    let text = "api main(x: Int): APIResult<Int,String> { return APIResult::success(x); }";
    let mut rt = Runtime::new(program(text), Arc::new(Registry::new()), RuntimeConfig::default()).unwrap();
    assert!(matches!(rt.invoke("main", &[Value::str("no")]), Err(RuntimeError::ArgumentMismatch { .. })));
    assert!(matches!(rt.invoke("nope", &[]), Err(RuntimeError::UnknownApi(_))));
    assert_eq!(rt.invoke("main", &[Value::Int(4)]).unwrap().result, Value::success(Value::Int(4)));
}

#[test]
fn config_round_trips_through_json() {
    for profile in [Profile::Embedded, Profile::Server] {
        let c = profile.config().with_snapshots(9);
        let back = RuntimeConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back.gc, c.gc);
        assert_eq!(back.limits, c.limits);
        assert_eq!(back.snapshot_every, c.snapshot_every);
    }
}

#[test]
fn failure_object_value_round_trip() {
    let inner = FailureObject::new(FailureKind::Overflow, "x", Origin { function: "g".into(), statement: 2 });
    let mut outer = FailureObject::new(FailureKind::LogicError, "y", Origin { function: "f".into(), statement: 0 });
    outer.cause = Some(Box::new(inner));
    assert_eq!(FailureObject::from_value(&outer.to_value()), Some(outer));
}

fn arb_expr(depth: u32) -> BoxedStrategy<String> {
    let leaf = prop_oneof![
        (-5i64..5).prop_map(|i| i.to_string()),
        Just("9223372036854775807".to_string()),
        Just("x".to_string()),
    ];
    leaf.prop_recursive(depth, 24, 2, |inner| {
        (inner.clone(), prop::sample::select(vec!["+", "-", "*", "/"]), inner)
            .prop_map(|(a, op, b)| format!("({a} {op} {b})"))
    })
    .boxed()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arithmetic_never_panics(e in arb_expr(4), x in -3i64..3, workers in 1usize..3) {
        let text = format!(
            "function f(x: Int): Int {{ return {e}; }}\naction g(x: Int): Int {{ return f(x); }}\napi main(x: Int): APIResult<Int,String> {{ let a = Task::run<g>(x); let b = Task::run<g>(x); return APIResult::success(a - b); }}"
        );
        let mut rt = Runtime::new(program(&text), Arc::new(Registry::new()), RuntimeConfig::default().with_workers(workers)).unwrap();
        let out = rt.invoke("main", &[Value::Int(x)]).unwrap();
        match &out.failure {
            None => prop_assert_eq!(out.result, Value::success(Value::Int(0))),
            Some(f) => prop_assert!(matches!(f.root_cause().kind, FailureKind::Overflow | FailureKind::LogicError)),
        }
        prop_assert_eq!(rt.live_handles(), 0);
    }
}
