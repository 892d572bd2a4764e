//! Built-in capability packages: `Fs`, `Clock` and `Log`.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;

use super::{CapabilityPackage, Handler, HandlerError, OperationSig};
use crate::heap::Value;
use crate::lang::TypeExpr;

fn api_result(ok: TypeExpr) -> TypeExpr {
    TypeExpr::ApiResult(Box::new(ok), Box::new(TypeExpr::String))
}

fn str_arg<'a>(req: &'a Value, name: &str) -> Result<&'a str, HandlerError> {
    match req.field(name) {
        Some(Value::Str(s)) => Ok(s),
        _ => Err(format!("missing string argument `{name}`").into()),
    }
}

/// Storage behind the `Fs` capability.
pub trait FileStore: Send + Sync {
    fn read(&self, path: &str) -> Result<Vec<u8>, String>;
    fn write(&self, path: &str, data: &[u8]) -> Result<(), String>;
    fn exists(&self, path: &str) -> bool;
}

/// An in-memory file store.
#[derive(Debug, Default)]
pub struct MemFs {
    files: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemFs {
    pub fn new() -> MemFs {
        MemFs::default()
    }

    pub fn with_file(self, path: &str, data: impl Into<Vec<u8>>) -> MemFs {
        self.files.lock().insert(path.to_string(), data.into());
        self
    }
}

impl FileStore for MemFs {
    fn read(&self, path: &str) -> Result<Vec<u8>, String> {
        self.files.lock().get(path).cloned().ok_or_else(|| format!("no such file: {path}"))
    }

    fn write(&self, path: &str, data: &[u8]) -> Result<(), String> {
        self.files.lock().insert(path.to_string(), data.to_vec());
        Ok(())
    }

    fn exists(&self, path: &str) -> bool {
        self.files.lock().contains_key(path)
    }
}

/// A file store confined to one directory. Absolute paths and `..` are
/// rejected.
#[derive(Debug, Clone)]
pub struct DirFs {
    root: PathBuf,
}

impl DirFs {
    pub fn new(root: impl Into<PathBuf>) -> DirFs {
        DirFs { root: root.into() }
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, String> {
        let rel = Path::new(path);
        if path.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
            return Err(format!("path escapes the file root: {path}"));
        }
        Ok(self.root.join(rel))
    }
}

impl FileStore for DirFs {
    fn read(&self, path: &str) -> Result<Vec<u8>, String> {
        std::fs::read(self.resolve(path)?).map_err(|e| format!("{path}: {e}"))
    }

    fn write(&self, path: &str, data: &[u8]) -> Result<(), String> {
        std::fs::write(self.resolve(path)?, data).map_err(|e| format!("{path}: {e}"))
    }

    fn exists(&self, path: &str) -> bool {
        self.resolve(path).map(|p| p.is_file()).unwrap_or(false)
    }
}

pub fn fs_package() -> CapabilityPackage {
    CapabilityPackage {
        name: "Fs".into(),
        operations: vec![
            OperationSig::new("ReadFile", &[("path", TypeExpr::String)], api_result(TypeExpr::Bytes)),
            OperationSig::new(
                "WriteFile",
                &[("path", TypeExpr::String), ("data", TypeExpr::Bytes)],
                api_result(TypeExpr::Unit),
            ),
            OperationSig::new("Exists", &[("path", TypeExpr::String)], api_result(TypeExpr::Bool)),
        ],
    }
}

/// Storage failures become `APIResult::Error` values the program can match
/// on; only malformed requests fail the effect itself.
pub fn fs_handler(store: Arc<dyn FileStore>) -> Handler {
    Arc::new(move |op, req| {
        let path = str_arg(req, "path")?;
        Ok(match op {
            "ReadFile" => match store.read(path) {
                Ok(bytes) => Value::success(Value::Bytes(bytes)),
                Err(e) => Value::error(Value::Str(e)),
            },
            "WriteFile" => {
                let Some(Value::Bytes(data)) = req.field("data") else {
                    return Err("missing bytes argument `data`".into());
                };
                match store.write(path, data) {
                    Ok(()) => Value::success(Value::Unit),
                    Err(e) => Value::error(Value::Str(e)),
                }
            }
            "Exists" => Value::success(Value::Bool(store.exists(path))),
            other => return Err(format!("unknown Fs operation {other}").into()),
        })
    })
}

pub fn clock_package() -> CapabilityPackage {
    CapabilityPackage {
        name: "Clock".into(),
        operations: vec![OperationSig::new("Now", &[], api_result(TypeExpr::Int))],
    }
}

/// `Clock::Now` answered by `now` (milliseconds).
pub fn clock_handler(now: impl Fn() -> i64 + Send + Sync + 'static) -> Handler {
    Arc::new(move |op, _| match op {
        "Now" => Ok(Value::success(Value::Int(now()))),
        other => Err(format!("unknown Clock operation {other}").into()),
    })
}

/// Wall-clock milliseconds since the Unix epoch.
pub fn system_millis() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

pub fn log_package() -> CapabilityPackage {
    CapabilityPackage {
        name: "Log".into(),
        operations: vec![OperationSig::new("Emit", &[("message", TypeExpr::Any)], api_result(TypeExpr::Unit))],
    }
}

/// Collects every emitted message. Also serves as an effect counter: the
/// number of entries is the number of completed `Log::Emit` calls.
#[derive(Debug, Clone, Default)]
pub struct LogSink {
    entries: Arc<Mutex<Vec<Value>>>,
}

impl LogSink {
    pub fn new() -> LogSink {
        LogSink::default()
    }

    pub fn entries(&self) -> Vec<Value> {
        self.entries.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn handler(&self) -> Handler {
        let entries = self.entries.clone();
        Arc::new(move |op, req| match op {
            "Emit" => {
                entries.lock().push(req.field("message").cloned().unwrap_or(Value::Unit));
                Ok(Value::success(Value::Unit))
            }
            other => Err(format!("unknown Log operation {other}").into()),
        })
    }
}
