//! Canonical interchange text for values.
//!
//! | value            | text                                              |
//! |------------------|---------------------------------------------------|
//! | `Unit`           | `null`                                            |
//! | `Bool`           | `true` / `false`                                  |
//! | `Int(42)`        | `{"$int":"42"}`                                   |
//! | `Str`            | JSON string                                       |
//! | `Bytes`          | `{"$bytes":"<base64, padded>"}`                   |
//! | `List`           | array                                             |
//! | `Record`         | object, keys sorted bytewise                      |
//! | `Enum`           | `{"$enum":"E","$variant":"V",<fields>}`           |
//!
//! Integers travel as decimal strings so no consumer truncates them to a
//! double. Record and enum field names that begin with `$` are written with
//! one extra leading `$`, which keeps the tagged forms unambiguous. No
//! insignificant whitespace is emitted, so the text is a function of the
//! value alone.

use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::canon;
use crate::heap::{Value, API_RESULT};
use crate::lang::{EnumDecl, TypeExpr};

const INT: &str = "$int";
const BYTES: &str = "$bytes";
const ENUM: &str = "$enum";
const VARIANT: &str = "$variant";

/// Where and why decoding or validation failed. Paths look like `.a[2].b`;
/// the root is the empty path.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ValidationError {
    pub path: String,
    pub rule: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = if self.path.is_empty() { "." } else { &self.path };
        write!(f, "{} at `{path}`", self.rule)
    }
}

impl ValidationError {
    fn new(path: &str, rule: impl Into<String>) -> ValidationError {
        ValidationError {
            path: path.to_string(),
            rule: rule.into(),
        }
    }
}

pub(crate) fn escape_key(k: &str) -> String {
    if k.starts_with('$') {
        format!("${k}")
    } else {
        k.to_string()
    }
}

fn unescape_key(k: &str) -> Option<String> {
    match k.strip_prefix('$') {
        Some(rest) if rest.starts_with('$') => Some(rest.to_string()),
        Some(_) => None,
        None => Some(k.to_string()),
    }
}

/// Value → JSON tree in the canonical shape.
pub fn to_json(v: &Value) -> Json {
    match v {
        Value::Unit => Json::Null,
        Value::Bool(b) => Json::Bool(*b),
        Value::Int(i) => tagged(INT, Json::String(i.to_string())),
        Value::Str(s) => Json::String(s.clone()),
        Value::Bytes(b) => tagged(BYTES, Json::String(BASE64.encode(b))),
        Value::List(items) => Json::Array(items.iter().map(to_json).collect()),
        Value::Record(fields) => Json::Object(fields_json(fields)),
        Value::Enum {
            name,
            variant,
            fields,
        } => {
            let mut m = fields_json(fields);
            m.insert(ENUM.into(), Json::String(name.clone()));
            m.insert(VARIANT.into(), Json::String(variant.clone()));
            Json::Object(m)
        }
    }
}

fn tagged(tag: &str, v: Json) -> Json {
    let mut m = Map::new();
    m.insert(tag.into(), v);
    Json::Object(m)
}

fn fields_json(fields: &BTreeMap<String, Value>) -> Map<String, Json> {
    fields.iter().map(|(k, v)| (escape_key(k), to_json(v))).collect()
}

/// Canonical text of a value.
pub fn encode_canonical(v: &Value) -> String {
    canon::to_string(&to_json(v))
}

/// JSON tree → value, checking the tagged forms.
pub fn from_json(j: &Json) -> Result<Value, ValidationError> {
    from_json_at(j, &mut String::new())
}

fn from_json_at(j: &Json, path: &mut String) -> Result<Value, ValidationError> {
    Ok(match j {
        Json::Null => Value::Unit,
        Json::Bool(b) => Value::Bool(*b),
        Json::Number(_) => {
            return Err(ValidationError::new(path, "bare number; integers are written {\"$int\":\"<decimal>\"}"))
        }
        Json::String(s) => Value::Str(s.clone()),
        Json::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                out.push(from_json_at(item, path)?);
                path.truncate(len);
            }
            Value::List(out)
        }
        Json::Object(m) => {
            if let Some(tag) = m.get(INT) {
                let text = tag.as_str().filter(|_| m.len() == 1);
                let text = text.ok_or_else(|| ValidationError::new(path, "malformed $int"))?;
                let canonical = text == "0" || {
                    let digits = text.strip_prefix('-').unwrap_or(text);
                    !digits.is_empty() && !digits.starts_with('0') && digits.bytes().all(|b| b.is_ascii_digit())
                };
                let n = text.parse::<i64>().ok().filter(|_| canonical);
                return n.map(Value::Int).ok_or_else(|| ValidationError::new(path, "invalid integer"));
            }
            if let Some(tag) = m.get(BYTES) {
                let text = tag.as_str().filter(|_| m.len() == 1);
                let text = text.ok_or_else(|| ValidationError::new(path, "malformed $bytes"))?;
                return BASE64
                    .decode(text)
                    .map(Value::Bytes)
                    .map_err(|_| ValidationError::new(path, "invalid base64"));
            }
            let mut fields = BTreeMap::new();
            let mut name = None;
            let mut variant = None;
            for (k, v) in m {
                match k.as_str() {
                    ENUM => name = Some(v.as_str().ok_or_else(|| ValidationError::new(path, "malformed $enum"))?),
                    VARIANT => {
                        variant = Some(v.as_str().ok_or_else(|| ValidationError::new(path, "malformed $variant"))?)
                    }
                    _ => {
                        let key = unescape_key(k)
                            .ok_or_else(|| ValidationError::new(path, format!("unknown tag `{k}`")))?;
                        let len = path.len();
                        path.push('.');
                        path.push_str(&key);
                        let fv = from_json_at(v, path)?;
                        path.truncate(len);
                        fields.insert(key, fv);
                    }
                }
            }
            match (name, variant) {
                (None, None) => Value::Record(fields),
                (Some(n), Some(var)) => Value::Enum {
                    name: n.to_string(),
                    variant: var.to_string(),
                    fields,
                },
                _ => return Err(ValidationError::new(path, "$enum and $variant must appear together")),
            }
        }
    })
}

/// Decodes canonical text. Anything that is not byte-for-byte the canonical
/// encoding of some value is rejected.
pub fn decode(bytes: &[u8]) -> Result<Value, ValidationError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ValidationError::new("", "not utf-8"))?;
    let json: Json = serde_json::from_str(text).map_err(|e| ValidationError::new("", format!("not JSON: {e}")))?;
    let v = from_json(&json)?;
    if encode_canonical(&v) != text {
        return Err(ValidationError::new("", "not in canonical form"));
    }
    Ok(v)
}

/// Decodes canonical text and checks it against `schema`.
pub fn decode_validate(bytes: &[u8], schema: &TypeExpr) -> Result<Value, ValidationError> {
    let v = decode(bytes)?;
    conforms(&v, schema, &[])?;
    Ok(v)
}

/// Checks a value against a type. `enums` resolves named types; a named type
/// with no declaration accepts any enum value of that name.
pub fn conforms(v: &Value, ty: &TypeExpr, enums: &[EnumDecl]) -> Result<(), ValidationError> {
    conforms_at(v, ty, enums, &mut String::new())
}

fn conforms_at(v: &Value, ty: &TypeExpr, enums: &[EnumDecl], path: &mut String) -> Result<(), ValidationError> {
    let mismatch = |path: &str| ValidationError::new(path, format!("expected {ty}, found {}", v.kind().name()));
    match (ty, v) {
        (TypeExpr::Any, _)
        | (TypeExpr::Unit, Value::Unit)
        | (TypeExpr::Bool, Value::Bool(_))
        | (TypeExpr::Int, Value::Int(_))
        | (TypeExpr::String, Value::Str(_))
        | (TypeExpr::Bytes, Value::Bytes(_)) => Ok(()),
        (TypeExpr::List(t), Value::List(items)) => {
            for (i, item) in items.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                conforms_at(item, t, enums, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        (TypeExpr::Record(decl), Value::Record(fields)) => fields_conform(decl, fields, enums, path),
        (TypeExpr::ApiResult(ok, err), Value::Enum { name, variant, fields }) if name == API_RESULT => {
            let decl = match variant.as_str() {
                "Success" => vec![("value".to_string(), (**ok).clone())],
                "Error" => vec![("info".to_string(), (**err).clone())],
                _ => return Err(ValidationError::new(path, format!("unknown variant APIResult::{variant}"))),
            };
            fields_conform(&decl, fields, enums, path)
        }
        (TypeExpr::Named(n), Value::Enum { name, variant, fields }) if name == n => {
            let Some(e) = enums.iter().find(|e| e.name == *n) else {
                return Ok(());
            };
            let Some(vd) = e.variants.iter().find(|vd| vd.name == *variant) else {
                return Err(ValidationError::new(path, format!("unknown variant {n}::{variant}")));
            };
            fields_conform(&vd.fields, fields, enums, path)
        }
        _ => Err(mismatch(path)),
    }
}

fn fields_conform(
    decl: &[(String, TypeExpr)],
    fields: &BTreeMap<String, Value>,
    enums: &[EnumDecl],
    path: &mut String,
) -> Result<(), ValidationError> {
    for (k, t) in decl {
        let len = path.len();
        path.push('.');
        path.push_str(k);
        match fields.get(k) {
            None => return Err(ValidationError::new(path, "missing required field")),
            Some(fv) => conforms_at(fv, t, enums, path)?,
        }
        path.truncate(len);
    }
    if let Some(extra) = fields.keys().find(|k| !decl.iter().any(|(d, _)| d == *k)) {
        return Err(ValidationError::new(&format!("{path}.{extra}"), "unexpected field"));
    }
    Ok(())
}

/// Display adapter for canonical text.
pub struct Canonical<'a>(pub &'a Value);

impl fmt::Display for Canonical<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&encode_canonical(self.0))
    }
}
