use std::collections::BTreeMap;
use std::fmt;

/// Kind tag shared by heap objects, snapshots and the canonical encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Unit = 0,
    Bool = 1,
    Int = 2,
    Str = 3,
    Bytes = 4,
    List = 5,
    Record = 6,
    Enum = 7,
}

impl Kind {
    pub fn from_u8(tag: u8) -> Option<Kind> {
        Some(match tag {
            0 => Kind::Unit,
            1 => Kind::Bool,
            2 => Kind::Int,
            3 => Kind::Str,
            4 => Kind::Bytes,
            5 => Kind::List,
            6 => Kind::Record,
            7 => Kind::Enum,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Unit => "Unit",
            Kind::Bool => "Bool",
            Kind::Int => "Int",
            Kind::Str => "String",
            Kind::Bytes => "Bytes",
            Kind::List => "List",
            Kind::Record => "Record",
            Kind::Enum => "Enum",
        }
    }
}

pub const API_RESULT: &str = "APIResult";
pub const SUCCESS: &str = "Success";
pub const ERROR: &str = "Error";

/// An owned, immutable value tree.
///
/// This is the boundary representation: arguments handed to an api, effect
/// payloads, decoded interchange text and test expectations. Inside a running
/// program values live on the [`Heap`](super::Heap) and are reached through
/// handles; [`Heap::import`](super::Heap::import) and
/// [`Heap::export`](super::Heap::export) convert between the two.
///
/// Equality, ordering and hashing are structural. Record and enum fields are
/// kept in a `BTreeMap`, so field order never leaks into comparisons.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Unit,
    Bool(bool),
    Int(i64),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    Record(BTreeMap<String, Value>),
    Enum {
        name: String,
        variant: String,
        fields: BTreeMap<String, Value>,
    },
}

impl Value {
    pub fn kind(&self) -> Kind {
        match self {
            Value::Unit => Kind::Unit,
            Value::Bool(_) => Kind::Bool,
            Value::Int(_) => Kind::Int,
            Value::Str(_) => Kind::Str,
            Value::Bytes(_) => Kind::Bytes,
            Value::List(_) => Kind::List,
            Value::Record(_) => Kind::Record,
            Value::Enum { .. } => Kind::Enum,
        }
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    pub fn bytes(b: impl Into<Vec<u8>>) -> Value {
        Value::Bytes(b.into())
    }

    pub fn record<K: Into<String>>(fields: impl IntoIterator<Item = (K, Value)>) -> Value {
        Value::Record(fields.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn variant(name: impl Into<String>, variant: impl Into<String>) -> Value {
        Value::Enum {
            name: name.into(),
            variant: variant.into(),
            fields: BTreeMap::new(),
        }
    }

    /// `APIResult::Success { value }`
    pub fn success(value: Value) -> Value {
        let mut fields = BTreeMap::new();
        fields.insert("value".to_string(), value);
        Value::Enum {
            name: API_RESULT.into(),
            variant: SUCCESS.into(),
            fields,
        }
    }

    /// `APIResult::Error { info }`
    pub fn error(info: Value) -> Value {
        let mut fields = BTreeMap::new();
        fields.insert("info".to_string(), info);
        Value::Enum {
            name: API_RESULT.into(),
            variant: ERROR.into(),
            fields,
        }
    }

    /// Returns `Some(true)` for `Success`, `Some(false)` for `Error` and
    /// `None` when the value is not APIResult-shaped.
    pub fn api_result_ok(&self) -> Option<bool> {
        match self {
            Value::Enum { name, variant, .. } if name == API_RESULT => match variant.as_str() {
                SUCCESS => Some(true),
                ERROR => Some(false),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn field(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Record(fields) | Value::Enum { fields, .. } => fields.get(key),
            _ => None,
        }
    }

    /// Number of nodes in the tree (shared subtrees are counted once per path).
    pub fn node_count(&self) -> usize {
        1 + match self {
            Value::List(items) => items.iter().map(Value::node_count).sum(),
            Value::Record(fields) | Value::Enum { fields, .. } => {
                fields.values().map(Value::node_count).sum()
            }
            _ => 0,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::bapi::encode_canonical(self))
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}
