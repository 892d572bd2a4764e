//! Seeded program generators shared by the integration and acceptance tests.
//!
//! Corpus programs are effect-free unless asked otherwise: a small enum, a
//! value-clamping helper, a chain of pure functions, a DAG of actions that
//! spawn each other as child tasks, and one `main` api joining the lot. Every
//! intermediate integer is clamped, so generated programs never overflow by
//! accident; faults only appear where the fuzz generator injects them.
//!
//! The generator keeps the program as a small tree that both renders the
//! source text and evaluates itself directly, giving an oracle for the
//! canonical result that shares no code with the runtime.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use edgekernel::bapi::{CapabilityPackage, Handler, HandlerError, OperationSig, Registry};
use edgekernel::heap::Value;
use edgekernel::lang::{load, Program, SourceProgram, TypeExpr};
use edgekernel::runtime::FailureKind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CORPUS_SIZE: u64 = 100;

pub struct Generated {
    pub name: String,
    pub text: String,
    /// Argument for `main(n)`.
    pub arg: i64,
    /// Canonical result text computed by direct evaluation (fault-free
    /// programs only).
    pub expected: Option<String>,
}

impl Generated {
    pub fn load(&self) -> Program {
        load(&SourceProgram::new(self.name.clone(), self.text.clone()))
            .unwrap_or_else(|d| panic!("{}: {d:?}\n{}", self.name, self.text))
    }

    pub fn args(&self) -> Vec<Value> {
        vec![Value::Int(self.arg)]
    }
}

/// A fault planted in one reachable action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Overflow,
    DivZero,
    NonExhaustive,
    /// `Probe::Hit` answered by a handler that fails in the given way.
    Handler(HandlerFault),
    /// `Ghost::Hit` with no registered package.
    Unregistered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerFault {
    Error,
    Panic,
    Timeout,
    BadResponse,
}

impl Fault {
    pub const ALL: [Fault; 8] = [
        Fault::Overflow,
        Fault::DivZero,
        Fault::NonExhaustive,
        Fault::Handler(HandlerFault::Error),
        Fault::Handler(HandlerFault::Panic),
        Fault::Handler(HandlerFault::Timeout),
        Fault::Handler(HandlerFault::BadResponse),
        Fault::Unregistered,
    ];

    pub fn expected(self) -> FailureKind {
        match self {
            Fault::Overflow => FailureKind::Overflow,
            Fault::DivZero => FailureKind::LogicError,
            Fault::NonExhaustive => FailureKind::MatchNonExhaustive,
            Fault::Handler(HandlerFault::Timeout) => FailureKind::Timeout,
            Fault::Handler(_) | Fault::Unregistered => FailureKind::EffectError,
        }
    }

    /// Capability registry matching the fault; `Count` is always present.
    pub fn registry(self) -> Registry {
        let registry = Registry::new().with(count_package(), count_handler());
        match self {
            Fault::Handler(h) => registry.with(probe_package("Probe"), probe_handler(h)),
            _ => registry,
        }
    }
}

fn op_package(name: &str, op: &str) -> CapabilityPackage {
    CapabilityPackage {
        name: name.into(),
        operations: vec![OperationSig::new(
            op,
            &[("n", TypeExpr::Int)],
            TypeExpr::ApiResult(Box::new(TypeExpr::Int), Box::new(TypeExpr::String)),
        )],
    }
}

/// `Count::Tick(n)` answers `Success(3n + 1)`.
pub fn count_package() -> CapabilityPackage {
    op_package("Count", "Tick")
}

pub fn count_handler() -> Handler {
    Arc::new(|_, req| {
        let n = match req.field("n") {
            Some(Value::Int(n)) => *n,
            _ => return Err(HandlerError::Failed("missing n".into())),
        };
        Ok(Value::success(Value::Int(n.wrapping_mul(3).wrapping_add(1))))
    })
}

fn probe_package(name: &str) -> CapabilityPackage {
    op_package(name, "Hit")
}

fn probe_handler(fault: HandlerFault) -> Handler {
    Arc::new(move |_, _| match fault {
        HandlerFault::Error => Err(HandlerError::Failed("probe refused".into())),
        HandlerFault::Panic => panic!("probe handler crashed"),
        HandlerFault::Timeout => Err(HandlerError::Timeout("probe deadline passed".into())),
        HandlerFault::BadResponse => Ok(Value::str("not an APIResult")),
    })
}

const PRELUDE: &str = r#"enum Tag { Low, Mid{v: Int}, High{v: Int, w: Int} }

function clamp(x: Int): Int {
  match(x > 100000) {
    true => { return clamp(x / 1000); }
    _ => {
      match(x < 0 - 100000) {
        true => { return clamp(x / 1000); }
        _ => { return x; }
      }
    }
  }
}

function classify(x: Int): Tag {
  match(x < 10) {
    true => { return Tag::Low; }
    _ => {
      match(x < 1000) {
        true => { return Tag::Mid{v: x}; }
        _ => { return Tag::High{v: x / 10, w: x / 100}; }
      }
    }
  }
}

function weigh(t: Tag): Int {
  match(t) {
    Tag::Low => { return 1; }
    Tag::Mid => { return t.v * 2; }
    Tag::High => { return t.v + t.w; }
  }
}
"#;

#[derive(Debug, Clone)]
enum E {
    Var(String),
    Lit(i64),
    Add(Box<E>, Box<E>),
    Sub(Box<E>, Box<E>),
    MulK(Box<E>, i64),
    DivK(Box<E>, i64),
    Call(usize, Box<E>, Box<E>),
    Weigh(Box<E>),
}

impl E {
    fn render(&self) -> String {
        match self {
            E::Var(v) => v.clone(),
            E::Lit(n) => n.to_string(),
            E::Add(a, b) => format!("({} + {})", a.render(), b.render()),
            E::Sub(a, b) => format!("({} - {})", a.render(), b.render()),
            E::MulK(a, k) => format!("({} * {k})", a.render()),
            E::DivK(a, k) => format!("({} / {k})", a.render()),
            E::Call(f, a, b) => format!("f{f}({}, {})", a.render(), b.render()),
            E::Weigh(a) => format!("weigh(classify({}))", a.render()),
        }
    }

    fn eval(&self, env: &BTreeMap<String, i64>, fns: &[Func]) -> i64 {
        match self {
            E::Var(v) => env[v],
            E::Lit(n) => *n,
            E::Add(a, b) => a.eval(env, fns).checked_add(b.eval(env, fns)).unwrap(),
            E::Sub(a, b) => a.eval(env, fns).checked_sub(b.eval(env, fns)).unwrap(),
            E::MulK(a, k) => a.eval(env, fns).checked_mul(*k).unwrap(),
            E::DivK(a, k) => a.eval(env, fns) / k,
            E::Call(f, a, b) => fns[*f].eval(a.eval(env, fns), b.eval(env, fns), fns),
            E::Weigh(a) => weigh(a.eval(env, fns)),
        }
    }
}

fn clamp(x: i64) -> i64 {
    if !(-100000..=100000).contains(&x) {
        clamp(x / 1000)
    } else {
        x
    }
}

/// `weigh(classify(x))`.
fn weigh(x: i64) -> i64 {
    if x < 10 {
        1
    } else if x < 1000 {
        x * 2
    } else {
        x / 10 + x / 100
    }
}

struct Func {
    first: E,
    cut: i64,
    then: E,
    otherwise: E,
}

impl Func {
    fn eval(&self, x: i64, y: i64, fns: &[Func]) -> i64 {
        let mut env = BTreeMap::from([("x".to_string(), x), ("y".to_string(), y)]);
        let a = clamp(self.first.eval(&env, fns));
        env.insert("a".into(), a);
        clamp(if a < self.cut { self.then.eval(&env, fns) } else { self.otherwise.eval(&env, fns) })
    }
}

struct Action {
    /// `Count::Tick(n + k)`.
    tick: Option<i64>,
    /// `(action, k)`: `Task::run<a{action}>(clamp(n + k))`.
    kids: Vec<(usize, i64)>,
    /// `(function, argument variable)`.
    s: Option<(usize, String)>,
    ret: E,
    /// Planted fault statement and its position among the body lines.
    fault: Option<(usize, &'static str)>,
}

impl Action {
    fn lines(&self) -> Vec<String> {
        let mut body = Vec::new();
        if let Some(k) = self.tick {
            body.push(format!("let e = Task::run<Count::Tick>(n + {k});"));
            body.push("let m = clamp(e.value);".to_string());
        }
        for (i, (j, k)) in self.kids.iter().enumerate() {
            body.push(format!("let c{i} = Task::run<a{j}>(clamp(n + {k}));"));
        }
        if let Some((f, arg)) = &self.s {
            body.push(format!("let s = f{f}(n, {arg});"));
        }
        body.push(format!("return clamp({});", self.ret.render()));
        if let Some((at, site)) = self.fault {
            body.insert(at, site.to_string());
        }
        body
    }

    fn eval(&self, n: i64, actions: &[Action], fns: &[Func]) -> i64 {
        let mut env = BTreeMap::from([("n".to_string(), n)]);
        if let Some(k) = self.tick {
            env.insert("m".into(), clamp(3 * (n + k) + 1));
        }
        for (i, (j, k)) in self.kids.iter().enumerate() {
            env.insert(format!("c{i}"), actions[*j].eval(clamp(n + k), actions, fns));
        }
        if let Some((f, arg)) = &self.s {
            let s = fns[*f].eval(n, env[arg], fns);
            env.insert("s".into(), s);
        }
        clamp(self.ret.eval(&env, fns))
    }

    fn vars(&self) -> Vec<String> {
        let mut vars = vec!["n".to_string()];
        if self.tick.is_some() {
            vars.push("m".into());
        }
        vars.extend((0..self.kids.len()).map(|i| format!("c{i}")));
        vars
    }
}

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn expr(&mut self, vars: &[String], nfns: usize, depth: u32) -> E {
        let leaf = depth == 0 || self.rng.gen_bool(0.3);
        if leaf {
            return if self.rng.gen_bool(0.7) {
                E::Var(vars.choose(&mut self.rng).unwrap().clone())
            } else {
                E::Lit(self.rng.gen_range(0..20))
            };
        }
        let sub = |g: &mut Gen| Box::new(g.expr(vars, nfns, depth - 1));
        match self.rng.gen_range(0..6) {
            0 => E::Add(sub(self), sub(self)),
            1 => E::Sub(sub(self), sub(self)),
            2 => {
                let a = sub(self);
                E::MulK(a, self.rng.gen_range(2..6))
            }
            3 => {
                let a = sub(self);
                E::DivK(a, self.rng.gen_range(1..8))
            }
            4 if nfns > 0 => {
                let f = self.rng.gen_range(0..nfns);
                E::Call(f, sub(self), sub(self))
            }
            _ => E::Weigh(sub(self)),
        }
    }
}

/// Corpus program `seed`; with `effects`, actions also call `Count::Tick`.
pub fn corpus_program(seed: u64, effects: bool) -> Generated {
    generate(seed, effects, None)
}

/// Fuzz case `seed`: a corpus-shaped program with `fault` planted in an
/// action that `main` is guaranteed to reach.
pub fn fault_program(seed: u64, fault: Fault) -> Generated {
    generate(seed, seed % 3 == 0, Some(fault))
}

fn generate(seed: u64, effects: bool, fault: Option<Fault>) -> Generated {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = String::new();
    if effects {
        out.push_str("import Count;\n");
    }
    match fault {
        Some(Fault::Handler(_)) => out.push_str("import Probe;\n"),
        Some(Fault::Unregistered) => out.push_str("import Ghost;\n"),
        _ => {}
    }
    out.push('\n');
    out.push_str(PRELUDE);

    let nf = g.rng.gen_range(2..6);
    let mut fns: Vec<Func> = Vec::new();
    let xy = ["x".to_string(), "y".to_string()];
    let xya = ["x".to_string(), "y".to_string(), "a".to_string()];
    for k in 0..nf {
        let f = Func {
            first: g.expr(&xy, k, 3),
            cut: g.rng.gen_range(0..50),
            then: g.expr(&xya, k, 3),
            otherwise: g.expr(&xya, k, 3),
        };
        out.push_str(&format!(
            "\nfunction f{k}(x: Int, y: Int): Int {{\n  let a = clamp({});\n  match(a < {}) {{\n    true => {{ return clamp({}); }}\n    _ => {{ return clamp({}); }}\n  }}\n}}\n",
            f.first.render(),
            f.cut,
            f.then.render(),
            f.otherwise.render()
        ));
        fns.push(f);
    }

    let na = g.rng.gen_range(2..6);
    let mut actions: Vec<Action> = Vec::new();
    for k in 0..na {
        let tick = (effects && g.rng.gen_bool(0.5)).then(|| g.rng.gen_range(0..5));
        let mut kids = Vec::new();
        if k > 0 {
            for _ in 0..g.rng.gen_range(0..3) {
                kids.push((g.rng.gen_range(0..k), g.rng.gen_range(1..9)));
            }
        }
        let mut a = Action {
            tick,
            kids,
            s: None,
            ret: E::Lit(0),
            fault: None,
        };
        let mut vars = a.vars();
        if g.rng.gen_bool(0.6) {
            let f = g.rng.gen_range(0..nf);
            a.s = Some((f, vars.choose(&mut g.rng).unwrap().clone()));
            vars.push("s".into());
        }
        a.ret = g.expr(&vars, nf, 2);
        actions.push(a);
    }

    let spawns: Vec<(usize, i64)> = (0..g.rng.gen_range(2..6)).map(|_| (g.rng.gen_range(0..na), g.rng.gen_range(0..7))).collect();

    if let Some(fault) = fault {
        // Plant the fault in an action main reaches, at a random depth.
        let mut reachable: Vec<usize> = Vec::new();
        let mut stack: Vec<usize> = spawns.iter().map(|s| s.0).collect();
        while let Some(a) = stack.pop() {
            if !reachable.contains(&a) {
                reachable.push(a);
                stack.extend(actions[a].kids.iter().map(|k| k.0));
            }
        }
        reachable.sort();
        let target = *reachable.choose(&mut g.rng).unwrap();
        let site = match fault {
            Fault::Overflow => "let boom = overflow(n + 2);",
            Fault::DivZero => "let boom = divide(n);",
            Fault::NonExhaustive => "let boom = pick(n);",
            Fault::Handler(_) => "let boom = Task::run<Probe::Hit>(n);",
            Fault::Unregistered => "let boom = Task::run<Ghost::Hit>(n);",
        };
        let len = actions[target].lines().len();
        actions[target].fault = Some((g.rng.gen_range(0..len), site));
        out.push_str(
            "\nfunction overflow(x: Int): Int { return x * 9223372036854775807; }\n\
             function divide(x: Int): Int { return 100 / (x - x); }\n\
             function pick(x: Int): Int {\n  match(x) {\n    Tag::Low => { return 1; }\n    Tag::Mid => { return 2; }\n    Tag::High => { return 3; }\n  }\n}\n",
        );
    }

    for (k, a) in actions.iter().enumerate() {
        out.push_str(&format!("\naction a{k}(n: Int): Int {{\n"));
        for line in a.lines() {
            out.push_str(&format!("  {line}\n"));
        }
        out.push_str("}\n");
    }

    out.push_str("\napi main(n: Int): APIResult<{label: String, parts: List<Int>, total: Int}, String> {\n");
    let mut names = Vec::new();
    for (i, (a, k)) in spawns.iter().enumerate() {
        out.push_str(&format!("  let p{i} = Task::run<a{a}>(n + {k});\n"));
        names.push(format!("p{i}"));
    }
    out.push_str(&format!("  let parts = [{}];\n", names.join(", ")));
    out.push_str(&format!("  let total = clamp({});\n", names.join(" + ")));
    let guarded = g.rng.gen_bool(0.2);
    if guarded {
        out.push_str(
            "  let tag = classify(total);\n  match(tag) {\n    Tag::Low => { yield APIResult::error(\"low total \" ++ str(total)); }\n    _ => { let fine = true; }\n  }\n",
        );
    }
    out.push_str("  return APIResult::success({label: \"total \" ++ str(total), parts: parts, total: total});\n}\n");
    let arg = g.rng.gen_range(0..40);

    let expected = fault.is_none().then(|| {
        let parts: Vec<i64> = spawns.iter().map(|(a, k)| actions[*a].eval(arg + k, &actions, &fns)).collect();
        let total = clamp(parts.iter().sum());
        if guarded && total < 10 {
            format!(r#"{{"$enum":"APIResult","$variant":"Error","info":"low total {total}"}}"#)
        } else {
            let list: Vec<String> = parts.iter().map(|p| format!(r#"{{"$int":"{p}"}}"#)).collect();
            format!(
                r#"{{"$enum":"APIResult","$variant":"Success","value":{{"label":"total {total}","parts":[{}],"total":{{"$int":"{total}"}}}}}}"#,
                list.join(",")
            )
        }
    });

    Generated {
        name: format!("gen{seed:03}.bsql"),
        text: out,
        arg,
        expected,
    }
}
