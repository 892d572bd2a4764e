//! Key-sorted, whitespace-free JSON text.
//!
//! Object keys are ordered bytewise by this writer itself rather than by
//! `serde_json::Map`, whose ordering depends on crate features chosen
//! elsewhere in the build.

use serde_json::Value as Json;
use sha2::{Digest, Sha256};

pub fn to_string(v: &Json) -> String {
    let mut out = String::new();
    write(&mut out, v);
    out
}

pub fn write(out: &mut String, v: &Json) {
    match v {
        Json::Object(map) => {
            let mut entries: Vec<(&String, &Json)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_str(out, k);
                out.push(':');
                write(out, v);
            }
            out.push('}');
        }
        Json::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write(out, v);
            }
            out.push(']');
        }
        Json::String(s) => write_str(out, s),
        other => out.push_str(&other.to_string()),
    }
}

/// Key-sorted, two-space indented JSON for human-facing documents.
pub fn to_pretty(v: &Json) -> String {
    let mut out = String::new();
    pretty(&mut out, v, 0);
    out.push('\n');
    out
}

fn pretty(out: &mut String, v: &Json, depth: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat("  ").take(d));
    match v {
        Json::Object(map) if !map.is_empty() => {
            let mut entries: Vec<(&String, &Json)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push_str("{\n");
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push_str(",\n");
                }
                pad(out, depth + 1);
                write_str(out, k);
                out.push_str(": ");
                pretty(out, v, depth + 1);
            }
            out.push('\n');
            pad(out, depth);
            out.push('}');
        }
        Json::Array(items) if !items.is_empty() => {
            out.push_str("[\n");
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(",\n");
                }
                pad(out, depth + 1);
                pretty(out, v, depth + 1);
            }
            out.push('\n');
            pad(out, depth);
            out.push(']');
        }
        other => write(out, other),
    }
}

pub fn write_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
