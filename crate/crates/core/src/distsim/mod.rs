//! A multi-node deployment simulator.
//!
//! Every node is an isolated [`Runtime`] (own heap, registry and log) running
//! the same program. Api calls between nodes go through the `Rpc`
//! capability: node `a` calling `Rpc::quote(..)` sends a request message
//! over the modeled network to whichever node the topology routes `(a,
//! quote)` to, which runs `quote` as a new root task carrying the caller's
//! correlation id. Time is virtual; the network's latency and faults are a
//! pure function of the scenario, so two runs of a scenario produce
//! byte-identical logs.
//!
//! Delivery is at-least-once: a duplicated request runs twice on the callee
//! and the caller keeps the first response. A dropped message surfaces on
//! the caller as a `Timeout` failure once the virtual deadline passes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bapi::packages::{clock_package, fs_handler, fs_package, log_package, LogSink, MemFs};
use crate::bapi::{encode_canonical, from_json, to_json, CapabilityPackage, Handler, HandlerError, OperationSig, Registry};
use crate::canon;
use crate::heap::Value;
use crate::lang::{program_hash, FnKind, Program, TypeExpr};
use crate::runtime::{effect_context, replay, Caller, Mode, Outcome, Profile, Runtime, RuntimeError};
use crate::trace::{merge_timelines, LogError, ReplayDivergence, ReplayLog, Timeline, RPC_CAPABILITY};


#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub id: String,
    pub profile: Profile,
    /// Packages registered besides `Rpc`: any of `Clock`, `Fs`, `Log`.
    pub capabilities: Vec<String>,
    /// Contents of the node's in-memory `Fs`.
    pub files: BTreeMap<String, Vec<u8>>,
}

impl NodeConfig {
    pub fn new(id: &str, profile: Profile) -> NodeConfig {
        NodeConfig {
            id: id.to_string(),
            profile,
            capabilities: Vec::new(),
            files: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub from: String,
    pub api: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    pub nodes: Vec<NodeConfig>,
    pub routes: Vec<Route>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Drop,
    Duplicate,
}

impl Fault {
    fn name(self) -> &'static str {
        match self {
            Fault::Drop => "drop",
            Fault::Duplicate => "duplicate",
        }
    }
}

/// Latency and faults, indexed by the global message number (requests and
/// responses alike, in send order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkModel {
    pub seed: u64,
    pub base_latency: u64,
    pub jitter: u64,
    /// Virtual deadline for a call's round trip.
    pub timeout: u64,
    pub faults: BTreeMap<u64, Fault>,
}

impl Default for NetworkModel {
    fn default() -> NetworkModel {
        NetworkModel {
            seed: 0,
            base_latency: 5,
            jitter: 10,
            timeout: 250,
            faults: BTreeMap::new(),
        }
    }
}

impl NetworkModel {
    /// `base + hash(seed, from, to, index) mod (jitter + 1)`.
    pub fn latency(&self, from: &str, to: &str, index: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(from.as_bytes());
        h.update([0]);
        h.update(to.as_bytes());
        h.update([0]);
        h.update(index.to_le_bytes());
        let d = h.finalize();
        let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        self.base_latency + x % (self.jitter + 1)
    }
}

/// One external invocation of the workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub node: String,
    pub api: String,
    pub args: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    /// Program path relative to the scenario file, if it names one.
    pub program: Option<String>,
    pub topology: Topology,
    pub network: NetworkModel,
    pub workload: Vec<Call>,
    /// Virtual time between consecutive external invocations.
    pub interval: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("scenario is not JSON: {0}")]
    Json(String),
    #[error("scenario field `{0}` is missing or malformed")]
    Field(String),
}

fn field<'a>(j: &'a Json, key: &str) -> Result<&'a Json, ScenarioError> {
    j.get(key).ok_or_else(|| ScenarioError::Field(key.to_string()))
}

fn text(j: &Json, key: &str) -> Result<String, ScenarioError> {
    field(j, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| ScenarioError::Field(key.to_string()))
}

fn number(j: &Json, key: &str, default: u64) -> Result<u64, ScenarioError> {
    match j.get(key) {
        None => Ok(default),
        Some(v) => v.as_u64().ok_or_else(|| ScenarioError::Field(key.to_string())),
    }
}

fn list<'a>(j: &'a Json, key: &str) -> Result<&'a [Json], ScenarioError> {
    match j.get(key) {
        None => Ok(&[]),
        Some(v) => v.as_array().map(Vec::as_slice).ok_or_else(|| ScenarioError::Field(key.to_string())),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let j: Json = serde_json::from_str(text).map_err(|e| ScenarioError::Json(e.to_string()))?;
        Scenario::from_json(&j)
    }

    pub fn from_json(j: &Json) -> Result<Scenario, ScenarioError> {
        let bad = |k: &str| ScenarioError::Field(k.to_string());
        let mut nodes = Vec::new();
        for n in list(j, "nodes")? {
            let profile = match n.get("profile") {
                None => Profile::Embedded,
                Some(p) => p.as_str().and_then(Profile::parse).ok_or_else(|| bad("profile"))?,
            };
            let capabilities = list(n, "capabilities")?
                .iter()
                .map(|c| c.as_str().map(str::to_string).ok_or_else(|| bad("capabilities")))
                .collect::<Result<_, _>>()?;
            let mut files = BTreeMap::new();
            if let Some(f) = n.get("files") {
                for (path, data) in f.as_object().ok_or_else(|| bad("files"))? {
                    files.insert(path.clone(), data.as_str().ok_or_else(|| bad("files"))?.as_bytes().to_vec());
                }
            }
            nodes.push(NodeConfig {
                id: text(n, "id")?,
                profile,
                capabilities,
                files,
            });
        }
        let routes = list(j, "routes")?
            .iter()
            .map(|r| {
                Ok(Route {
                    from: text(r, "from")?,
                    api: text(r, "api")?,
                    to: text(r, "to")?,
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        let defaults = NetworkModel::default();
        let network = match j.get("network") {
            None => defaults,
            Some(n) => {
                let mut faults = BTreeMap::new();
                for f in list(n, "faults")? {
                    let fault = match text(f, "fault")?.as_str() {
                        "drop" => Fault::Drop,
                        "duplicate" => Fault::Duplicate,
                        _ => return Err(bad("fault")),
                    };
                    let message = field(f, "message")?.as_u64().ok_or_else(|| bad("message"))?;
                    faults.insert(message, fault);
                }
                NetworkModel {
                    seed: number(n, "seed", defaults.seed)?,
                    base_latency: number(n, "base_latency", defaults.base_latency)?,
                    jitter: number(n, "jitter", defaults.jitter)?,
                    timeout: number(n, "timeout", defaults.timeout)?,
                    faults,
                }
            }
        };
        let workload = list(j, "workload")?
            .iter()
            .map(|c| {
                let args = list(c, "args")?
                    .iter()
                    .map(|a| from_json(a).map_err(|_| bad("args")))
                    .collect::<Result<_, _>>()?;
                Ok(Call {
                    node: text(c, "node")?,
                    api: text(c, "api")?,
                    args,
                })
            })
            .collect::<Result<_, ScenarioError>>()?;
        Ok(Scenario {
            name: text(j, "name")?,
            program: j.get("program").and_then(Json::as_str).map(str::to_string),
            topology: Topology { nodes, routes },
            network,
            workload,
            interval: number(j, "interval", 100)?,
        })
    }

    pub fn to_json(&self) -> Json {
        json!({
            "name": self.name,
            "program": self.program,
            "interval": self.interval,
            "nodes": self.topology.nodes.iter().map(|n| json!({
                "id": n.id,
                "profile": n.profile.name(),
                "capabilities": n.capabilities,
                "files": n.files.iter().map(|(k, v)| (k.clone(), Json::String(String::from_utf8_lossy(v).into_owned()))).collect::<serde_json::Map<_, _>>(),
            })).collect::<Vec<_>>(),
            "routes": self.topology.routes.iter().map(|r| json!({"from": r.from, "api": r.api, "to": r.to})).collect::<Vec<_>>(),
            "network": {
                "seed": self.network.seed,
                "base_latency": self.network.base_latency,
                "jitter": self.network.jitter,
                "timeout": self.network.timeout,
                "faults": self.network.faults.iter().map(|(m, f)| json!({"message": m, "fault": f.name()})).collect::<Vec<_>>(),
            },
            "workload": self.workload.iter().map(|c| json!({
                "node": c.node,
                "api": c.api,
                "args": c.args.iter().map(to_json).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }

    /// The same scenario with every node on `profile`.
    pub fn with_profile(&self, profile: Profile) -> Scenario {
        let mut s = self.clone();
        for n in &mut s.topology.nodes {
            n.profile = profile;
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("route {from} -> {api}: the program has no api `{api}`")]
    RouteToMissingApi { from: String, api: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("node `{0}` routes to itself")]
    SelfRoute(String),
    #[error("route ({from}, {api}) is declared twice")]
    DuplicateRoute { from: String, api: String },
    #[error("node `{node}` asks for unknown capability `{capability}`")]
    UnknownCapability { node: String, capability: String },
    #[error("node `{node}`: {error}")]
    Runtime { node: String, error: RuntimeError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Request,
    Response,
}

/// What happened to a message on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Delivered,
    Dropped,
    Duplicated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub index: u64,
    pub kind: MessageKind,
    pub from: String,
    pub to: String,
    pub api: String,
    pub corr: String,
    /// Seq of the caller's `EffectRequest`.
    pub caller_seq: u64,
    /// Canonical arguments (requests) or response (responses).
    pub payload: String,
    pub sent_at: u64,
    pub latency: u64,
    pub fate: Fate,
}

impl Message {
    pub fn to_json(&self) -> Json {
        json!({
            "index": self.index,
            "kind": match self.kind { MessageKind::Request => "request", MessageKind::Response => "response" },
            "from": self.from,
            "to": self.to,
            "api": self.api,
            "corr": self.corr,
            "caller_seq": self.caller_seq,
            "payload": self.payload,
            "sent_at": self.sent_at,
            "latency": self.latency,
            "fate": match self.fate { Fate::Delivered => "delivered", Fate::Dropped => "dropped", Fate::Duplicated => "duplicated" },
        })
    }
}

#[derive(Debug, Default)]
struct Network {
    clock: u64,
    messages: Vec<Message>,
}

type NodeSlot = Arc<Mutex<Option<Runtime>>>;

/// A deployed topology.
pub struct System {
    program_hash: String,
    nodes: BTreeMap<String, NodeSlot>,
    sinks: BTreeMap<String, LogSink>,
    net: Arc<Mutex<Network>>,
}

struct RpcEnv {
    node: String,
    routes: BTreeMap<String, String>,
    program: Arc<Program>,
    peers: BTreeMap<String, Weak<Mutex<Option<Runtime>>>>,
    net: Arc<Mutex<Network>>,
    model: NetworkModel,
}

impl RpcEnv {
    fn send(&self, kind: MessageKind, from: &str, to: &str, api: &str, corr: &str, caller_seq: u64, payload: String) -> Message {
        let mut net = self.net.lock();
        let index = net.messages.len() as u64;
        let latency = self.model.latency(from, to, index);
        let fate = match self.model.faults.get(&index) {
            Some(Fault::Drop) => Fate::Dropped,
            Some(Fault::Duplicate) => Fate::Duplicated,
            None => Fate::Delivered,
        };
        let m = Message {
            index,
            kind,
            from: from.to_string(),
            to: to.to_string(),
            api: api.to_string(),
            corr: corr.to_string(),
            caller_seq,
            payload,
            sent_at: net.clock,
            latency,
            fate,
        };
        net.messages.push(m.clone());
        m
    }

    fn call(&self, api: &str, request: &Value) -> Result<Value, HandlerError> {
        let ctx = effect_context().ok_or_else(|| HandlerError::Failed("Rpc used outside an effect".into()))?;
        let to = self
            .routes
            .get(api)
            .ok_or_else(|| HandlerError::Failed(format!("no route for {api} from {}", self.node)))?;
        let decl = self.program.function(api).expect("routes are checked at deploy");
        let args: Vec<Value> = decl
            .params
            .iter()
            .map(|p| request.field(&p.name).cloned().unwrap_or(Value::Unit))
            .collect();
        let payload = encode_canonical(&Value::List(args.clone()));
        let start = self.net.lock().clock;
        let deadline = start + self.model.timeout;
        let timeout = |net: &Arc<Mutex<Network>>| {
            let mut n = net.lock();
            n.clock = n.clock.max(deadline);
            HandlerError::Timeout(format!("{api} on {to}: no response within {} virtual ms", self.model.timeout))
        };
        let req = self.send(MessageKind::Request, &self.node, to, api, ctx.corr.as_str(), ctx.seq, payload);
        if req.fate == Fate::Dropped {
            return Err(timeout(&self.net));
        }
        self.net.lock().clock += req.latency;
        let peer = self.peers.get(to).and_then(Weak::upgrade).ok_or_else(|| HandlerError::Failed(format!("node {to} is gone")))?;
        let deliveries = if req.fate == Fate::Duplicated { 2 } else { 1 };
        let mut first: Option<Value> = None;
        for _ in 0..deliveries {
            let mut guard = peer
                .try_lock()
                .ok_or_else(|| HandlerError::Failed(format!("re-entrant call into busy node {to}")))?;
            let rt = guard.as_mut().expect("node is deployed");
            let caller = Caller {
                corr: ctx.corr.clone(),
                node: self.node.clone(),
                seq: ctx.seq,
            };
            let out = rt
                .invoke_from(api, &args, caller)
                .map_err(|e| HandlerError::Failed(format!("{to}: {e}")))?;
            drop(guard);
            let resp = self.send(MessageKind::Response, to, &self.node, api, ctx.corr.as_str(), ctx.seq, out.canonical());
            if resp.fate == Fate::Dropped {
                continue;
            }
            let arrives = self.net.lock().clock + resp.latency;
            if first.is_none() && arrives <= deadline {
                self.net.lock().clock = arrives;
                first = Some(out.result);
            }
        }
        first.ok_or_else(|| timeout(&self.net))
    }
}

fn rpc_package(program: &Program, apis: &[&str]) -> CapabilityPackage {
    let operations = apis
        .iter()
        .map(|api| {
            let f = program.function(api).expect("checked api");
            let params: Vec<(&str, TypeExpr)> = f.params.iter().map(|p| (p.name.as_str(), p.ty.clone())).collect();
            // Callee failures arrive as `Error(<failure record>)`.
            let ok = match &f.ret {
                TypeExpr::ApiResult(ok, _) => (**ok).clone(),
                other => other.clone(),
            };
            OperationSig::new(api, &params, TypeExpr::ApiResult(Box::new(ok), Box::new(TypeExpr::Any)))
        })
        .collect();
    CapabilityPackage {
        name: RPC_CAPABILITY.into(),
        operations,
    }
}

impl System {
    pub fn deploy(program: &Program, topology: &Topology, model: &NetworkModel) -> Result<System, DeployError> {
        let mut slots: BTreeMap<String, NodeSlot> = BTreeMap::new();
        for n in &topology.nodes {
            if slots.insert(n.id.clone(), Arc::new(Mutex::new(None))).is_some() {
                return Err(DeployError::DuplicateNode(n.id.clone()));
            }
        }
        let mut routes: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for r in &topology.routes {
            for node in [&r.from, &r.to] {
                if !slots.contains_key(node) {
                    return Err(DeployError::UnknownNode(node.clone()));
                }
            }
            if r.from == r.to {
                return Err(DeployError::SelfRoute(r.from.clone()));
            }
            if program.function(&r.api).is_none_or(|f| f.kind != FnKind::Api) {
                return Err(DeployError::RouteToMissingApi {
                    from: r.from.clone(),
                    api: r.api.clone(),
                });
            }
            if routes.entry(r.from.clone()).or_default().insert(r.api.clone(), r.to.clone()).is_some() {
                return Err(DeployError::DuplicateRoute {
                    from: r.from.clone(),
                    api: r.api.clone(),
                });
            }
        }
        let shared = Arc::new(program.clone());
        let net = Arc::new(Mutex::new(Network::default()));
        let mut sinks = BTreeMap::new();
        for n in &topology.nodes {
            let mut registry = Registry::new();
            let sink = LogSink::new();
            for cap in &n.capabilities {
                let (package, handler): (CapabilityPackage, Handler) = match cap.as_str() {
                    "Clock" => {
                        let net = net.clone();
                        (clock_package(), crate::bapi::packages::clock_handler(move || net.lock().clock as i64))
                    }
                    "Fs" => {
                        let store = n.files.iter().fold(MemFs::new(), |s, (p, d)| s.with_file(p, d.clone()));
                        (fs_package(), fs_handler(Arc::new(store)))
                    }
                    "Log" => (log_package(), sink.handler()),
                    _ => {
                        return Err(DeployError::UnknownCapability {
                            node: n.id.clone(),
                            capability: cap.clone(),
                        })
                    }
                };
                registry.register(package, handler).map_err(|_| DeployError::UnknownCapability {
                    node: n.id.clone(),
                    capability: cap.clone(),
                })?;
            }
            let node_routes = routes.get(&n.id).cloned().unwrap_or_default();
            let apis: Vec<&str> = node_routes.keys().map(String::as_str).collect();
            let env = Arc::new(RpcEnv {
                node: n.id.clone(),
                program: shared.clone(),
                peers: slots.iter().map(|(k, v)| (k.clone(), Arc::downgrade(v))).collect(),
                net: net.clone(),
                model: model.clone(),
                routes: node_routes.clone(),
            });
            let handler: Handler = Arc::new(move |op, req| env.call(op, req));
            registry
                .register(rpc_package(program, &apis), handler)
                .map_err(|_| DeployError::UnknownCapability {
                    node: n.id.clone(),
                    capability: RPC_CAPABILITY.into(),
                })?;
            let config = n.profile.config().with_mode(Mode::Record).with_seed(model.seed);
            let rt = Runtime::new(program.clone(), Arc::new(registry), config)
                .map_err(|error| DeployError::Runtime {
                    node: n.id.clone(),
                    error,
                })?
                .with_node(&n.id);
            *slots[&n.id].lock() = Some(rt);
            sinks.insert(n.id.clone(), sink);
        }
        Ok(System {
            program_hash: program_hash(program),
            nodes: slots,
            sinks,
            net,
        })
    }

    pub fn program_hash(&self) -> &str {
        &self.program_hash
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.keys().cloned().collect()
    }

    /// Program hash as deployed on `node`.
    pub fn node_hash(&self, node: &str) -> Option<String> {
        let slot = self.nodes.get(node)?.lock();
        slot.as_ref().map(|rt| rt.program_hash().to_string())
    }

    pub fn node_config(&self, node: &str) -> Option<crate::runtime::RuntimeConfig> {
        let slot = self.nodes.get(node)?.lock();
        slot.as_ref().map(|rt| *rt.config())
    }

    /// An external invocation on `node`.
    pub fn call(&mut self, node: &str, api: &str, args: &[Value]) -> Result<Outcome, SimError> {
        let slot = self.nodes.get(node).ok_or_else(|| SimError::UnknownNode(node.to_string()))?.clone();
        let mut guard = slot.lock();
        let rt = guard.as_mut().expect("node is deployed");
        rt.invoke(api, args).map_err(|error| SimError::Runtime {
            node: node.to_string(),
            error,
        })
    }

    pub fn advance(&mut self, by: u64) {
        self.net.lock().clock += by;
    }

    pub fn now(&self) -> u64 {
        self.net.lock().clock
    }

    pub fn messages(&self) -> Vec<Message> {
        self.net.lock().messages.clone()
    }

    /// Entries emitted through `Log::Emit` on `node`.
    pub fn log_entries(&self, node: &str) -> Vec<Value> {
        self.sinks.get(node).map(LogSink::entries).unwrap_or_default()
    }

    /// Every node's log so far.
    pub fn logs(&self) -> BTreeMap<String, ReplayLog> {
        self.nodes
            .iter()
            .map(|(id, slot)| (id.clone(), slot.lock().as_ref().and_then(Runtime::log).cloned().expect("record mode")))
            .collect()
    }
}

impl Drop for System {
    fn drop(&mut self) {
        // Runtimes hold registries whose handlers point back at peers.
        for slot in self.nodes.values() {
            slot.lock().take();
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{node}`: {error}")]
    Runtime { node: String, error: RuntimeError },
}

/// The record of one scenario execution.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub scenario: String,
    pub program_hash: String,
    pub profiles: BTreeMap<String, Profile>,
    /// External invocations in workload order: `(node, outcome)`.
    pub outcomes: Vec<(String, Outcome)>,
    pub logs: BTreeMap<String, ReplayLog>,
    pub messages: Vec<Message>,
    pub final_time: u64,
}

pub fn simulate(program: &Program, scenario: &Scenario) -> Result<SimRun, SimError> {
    let mut system = System::deploy(program, &scenario.topology, &scenario.network)?;
    let mut outcomes = Vec::new();
    for call in &scenario.workload {
        let out = system.call(&call.node, &call.api, &call.args)?;
        outcomes.push((call.node.clone(), out));
        system.advance(scenario.interval);
    }
    Ok(SimRun {
        scenario: scenario.name.clone(),
        program_hash: system.program_hash.clone(),
        profiles: scenario.topology.nodes.iter().map(|n| (n.id.clone(), n.profile)).collect(),
        outcomes,
        logs: system.logs(),
        messages: system.messages(),
        final_time: system.now(),
    })
}

/// Per-node results in log order (external and served invocations).
pub type NodeResults = BTreeMap<String, Vec<String>>;

fn node_results(logs: &BTreeMap<String, ReplayLog>) -> NodeResults {
    logs.iter()
        .map(|(id, log)| (id.clone(), log.results().into_iter().map(canon::to_string).collect()))
        .collect()
}

impl SimRun {
    pub fn timeline(&self) -> Timeline {
        let logs: Vec<(&str, &ReplayLog)> = self.logs.iter().map(|(k, v)| (k.as_str(), v)).collect();
        merge_timelines(&logs)
    }

    pub fn results(&self) -> NodeResults {
        node_results(&self.logs)
    }

    pub fn manifest(&self) -> Json {
        json!({
            "scenario": self.scenario,
            "program_hash": self.program_hash,
            "final_time": self.final_time,
            "nodes": self.logs.iter().map(|(id, log)| json!({
                "id": id,
                "profile": self.profiles.get(id).map(|p| p.name()),
                "log": format!("{id}.ektrace"),
                "events": log.events.len(),
                "results": log.results().into_iter().map(canon::to_string).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "workload": self.outcomes.iter().map(|(node, o)| json!({
                "node": node,
                "corr": o.corr.as_str(),
                "result": o.canonical(),
            })).collect::<Vec<_>>(),
            "messages": self.messages.iter().map(Message::to_json).collect::<Vec<_>>(),
        })
    }

    /// Writes `<node>.ektrace` per node, their snapshots, and `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (id, log) in &self.logs {
            fs::write(dir.join(format!("{id}.ektrace")), log.encode())?;
        }
        let mut manifest = canon::to_string(&self.manifest());
        manifest.push('\n');
        fs::write(dir.join("manifest.json"), manifest)
    }
}

#[derive(Debug, Error)]
pub enum GatherError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{node}: {error}")]
    Log { node: String, error: LogError },
    #[error(transparent)]
    Divergence(#[from] ReplayDivergence),
    #[error("node `{node}` replayed to {replayed} but recorded {recorded}")]
    Mismatch { node: String, recorded: String, replayed: String },
}

/// A run directory read back from disk.
#[derive(Debug, Clone)]
pub struct Gathered {
    pub manifest: Json,
    pub logs: BTreeMap<String, ReplayLog>,
}

pub fn read_run_dir(dir: &Path) -> Result<Gathered, GatherError> {
    let read = |p: PathBuf| fs::read(&p).map_err(|source| GatherError::Io { path: p, source });
    let manifest: Json = serde_json::from_slice(&read(dir.join("manifest.json"))?)
        .map_err(|e| GatherError::Manifest(e.to_string()))?;
    let mut logs = BTreeMap::new();
    let nodes = manifest.get("nodes").and_then(Json::as_array).ok_or_else(|| GatherError::Manifest("nodes".into()))?;
    for n in nodes {
        let id = n.get("id").and_then(Json::as_str).ok_or_else(|| GatherError::Manifest("node id".into()))?;
        let file = n.get("log").and_then(Json::as_str).ok_or_else(|| GatherError::Manifest("node log".into()))?;
        if file.contains('/') || file.contains('\\') || file.starts_with('.') {
            return Err(GatherError::Manifest(format!("log path {file} leaves the run directory")));
        }
        let log = ReplayLog::decode(&read(dir.join(file))?).map_err(|error| GatherError::Log {
            node: id.to_string(),
            error,
        })?;
        logs.insert(id.to_string(), log);
    }
    Ok(Gathered { manifest, logs })
}

/// Replays every node's log on this machine, with no network and no live
/// handlers, and returns each node's replayed results.
pub fn gather_and_replay(program: &Program, logs: &BTreeMap<String, ReplayLog>, workers: usize) -> Result<BTreeMap<String, Vec<Outcome>>, ReplayDivergence> {
    logs.iter()
        .map(|(id, log)| Ok((id.clone(), replay(program, log, workers)?)))
        .collect()
}

/// [`gather_and_replay`] plus a byte comparison against what the logs
/// recorded.
pub fn verify(program: &Program, logs: &BTreeMap<String, ReplayLog>, workers: usize) -> Result<NodeResults, GatherError> {
    let replayed = gather_and_replay(program, logs, workers)?;
    let recorded = node_results(logs);
    let mut out = BTreeMap::new();
    for (id, outcomes) in replayed {
        let got: Vec<String> = outcomes.iter().map(|o| canon::to_string(&to_json(&o.result))).collect();
        let want = &recorded[&id];
        if &got != want {
            return Err(GatherError::Mismatch {
                node: id,
                recorded: want.join(" "),
                replayed: got.join(" "),
            });
        }
        out.insert(id, got);
    }
    Ok(out)
}
