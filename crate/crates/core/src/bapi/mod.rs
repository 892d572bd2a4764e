//! The effect boundary.
//!
//! Every interaction with the environment goes through a [`Registry`] of
//! capability packages. A package names its operations and their typed
//! signatures; its handler is a plain synchronous function from a request
//! record to an `APIResult` value. The registry validates both directions,
//! converts handler errors and panics into [`EffectError`]s, and is the only
//! path from a running program to the outside world.

pub mod bindings;
mod canonical;
pub(crate) use canonical::escape_key;
pub mod packages;

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::heap::Value;
use crate::lang::{Param, TypeExpr};

pub use canonical::{conforms, decode, decode_validate, encode_canonical, from_json, to_json, Canonical, ValidationError};

/// Handler for every operation of one package: `(operation, request) -> response`.
/// The request is a record keyed by parameter name.
pub type Handler = Arc<dyn Fn(&str, &Value) -> Result<Value, HandlerError> + Send + Sync>;

/// Why a handler could not answer.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HandlerError {
    #[error("{0}")]
    Failed(String),
    /// The operation's deadline passed (for example a lost network message).
    #[error("{0}")]
    Timeout(String),
}

impl From<String> for HandlerError {
    fn from(s: String) -> HandlerError {
        HandlerError::Failed(s)
    }
}

impl From<&str> for HandlerError {
    fn from(s: &str) -> HandlerError {
        HandlerError::Failed(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OperationSig {
    pub name: String,
    pub params: Vec<Param>,
    /// Always `APIResult<_, _>`.
    pub response: TypeExpr,
}

impl OperationSig {
    pub fn new(name: &str, params: &[(&str, TypeExpr)], response: TypeExpr) -> OperationSig {
        assert!(matches!(response, TypeExpr::ApiResult(..)), "responses are APIResult-shaped");
        OperationSig {
            name: name.to_string(),
            params: params
                .iter()
                .map(|(n, t)| Param {
                    name: n.to_string(),
                    ty: t.clone(),
                })
                .collect(),
            response,
        }
    }

    pub fn request_schema(&self) -> TypeExpr {
        let mut fields: Vec<(String, TypeExpr)> = self.params.iter().map(|p| (p.name.clone(), p.ty.clone())).collect();
        fields.sort_by(|a, b| a.0.cmp(&b.0));
        TypeExpr::Record(fields)
    }

    /// Positional arguments → request record.
    pub fn request(&self, args: &[Value]) -> Result<Value, EffectError> {
        if args.len() != self.params.len() {
            return Err(EffectError::Arity {
                operation: self.name.clone(),
                expected: self.params.len(),
                given: args.len(),
            });
        }
        Ok(Value::Record(
            self.params.iter().map(|p| p.name.clone()).zip(args.iter().cloned()).collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CapabilityPackage {
    pub name: String,
    pub operations: Vec<OperationSig>,
}

impl CapabilityPackage {
    pub fn operation(&self, name: &str) -> Option<&OperationSig> {
        self.operations.iter().find(|o| o.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BapiError {
    #[error("capability `{0}` is already registered")]
    DuplicateRegistration(String),
}

/// Why an effect did not produce a valid response.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EffectError {
    #[error("capability not available: {0}")]
    CapabilityNotAvailable(String),
    #[error("unknown operation {capability}::{operation}")]
    UnknownOperation { capability: String, operation: String },
    #[error("{operation} takes {expected} arguments, {given} given")]
    Arity {
        operation: String,
        expected: usize,
        given: usize,
    },
    #[error("validation: request {0}")]
    InvalidRequest(ValidationError),
    #[error("validation: response {0}")]
    InvalidResponse(ValidationError),
    #[error("handler failed: {0}")]
    Handler(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("handler panicked: {0}")]
    Panic(String),
}

struct Registered {
    package: CapabilityPackage,
    handler: Handler,
}

/// The per-node set of registered capability packages. Immutable once the
/// node starts running programs; share it behind an `Arc`.
#[derive(Default)]
pub struct Registry {
    packages: BTreeMap<String, Registered>,
    invocations: AtomicU64,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("packages", &self.packages.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn register(&mut self, package: CapabilityPackage, handler: Handler) -> Result<(), BapiError> {
        if self.packages.contains_key(&package.name) {
            return Err(BapiError::DuplicateRegistration(package.name));
        }
        self.packages.insert(package.name.clone(), Registered { package, handler });
        Ok(())
    }

    /// Builder form of [`register`](Registry::register); panics on duplicates.
    pub fn with(mut self, package: CapabilityPackage, handler: Handler) -> Registry {
        self.register(package, handler).expect("duplicate capability");
        self
    }

    pub fn package(&self, name: &str) -> Option<&CapabilityPackage> {
        self.packages.get(name).map(|r| &r.package)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.packages.keys().map(String::as_str)
    }

    pub fn operation(&self, capability: &str, operation: &str) -> Result<&OperationSig, EffectError> {
        let pkg = self
            .package(capability)
            .ok_or_else(|| EffectError::CapabilityNotAvailable(capability.to_string()))?;
        pkg.operation(operation).ok_or_else(|| EffectError::UnknownOperation {
            capability: capability.to_string(),
            operation: operation.to_string(),
        })
    }

    /// Number of handler invocations so far.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    /// Positional form of [`invoke`](Registry::invoke).
    pub fn invoke_args(&self, capability: &str, operation: &str, args: &[Value]) -> Result<Value, EffectError> {
        let request = self.operation(capability, operation)?.request(args)?;
        self.invoke(capability, operation, &request)
    }

    /// Validates `request` (a record as built by [`OperationSig::request`]),
    /// runs the handler and validates its response.
    pub fn invoke(&self, capability: &str, operation: &str, request: &Value) -> Result<Value, EffectError> {
        let sig = self.operation(capability, operation)?;
        conforms(request, &sig.request_schema(), &[]).map_err(EffectError::InvalidRequest)?;
        let handler = &self.packages[capability].handler;
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let outcome = catch_unwind(AssertUnwindSafe(|| handler(operation, request)));
        let response = match outcome {
            Ok(Ok(v)) => v,
            Ok(Err(HandlerError::Failed(msg))) => return Err(EffectError::Handler(msg)),
            Ok(Err(HandlerError::Timeout(msg))) => return Err(EffectError::Timeout(msg)),
            Err(payload) => return Err(EffectError::Panic(panic_message(payload.as_ref()))),
        };
        conforms(&response, &sig.response, &[]).map_err(EffectError::InvalidResponse)?;
        Ok(response)
    }
}

pub(crate) fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}
