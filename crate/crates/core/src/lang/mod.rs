//! BosqueLite: the source language.
//!
//! A program is a set of `import`ed capability packages, `enum`s and three
//! kinds of callable: pure `function`s, effectful `action`s, and `api`s, the
//! external entry points. Effects only enter through `Task::run<Pkg::Op>`,
//! and the language has no construct that can observe time, randomness,
//! host identity or addresses.

pub mod ast;
mod lexer;
mod parser;
mod pretty;
mod validate;

use std::fmt;

use serde::Serialize;

pub use ast::*;
pub use parser::{parse_type, KEYWORDS};
pub use pretty::serialize;
pub use validate::validate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
    pub span: Span,
}

impl Diagnostic {
    pub fn error(message: impl Into<String>, span: Span) -> Diagnostic {
        Diagnostic {
            severity: Severity::Error,
            message: message.into(),
            span,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}: {sev}: {}", self.span, self.message)
    }
}

/// Parses source text. Never panics; syntax errors come back as diagnostics.
pub fn parse(src: &SourceProgram) -> Result<Program, Vec<Diagnostic>> {
    parser::parse(src)
}

/// Parses and validates.
pub fn load(src: &SourceProgram) -> Result<Program, Vec<Diagnostic>> {
    let program = parse(src)?;
    let diags = validate(&program);
    if diags.is_empty() {
        Ok(program)
    } else {
        Err(diags)
    }
}

/// Key-sorted JSON rendering of the AST (no spans), the input to
/// [`program_hash`].
pub fn canonical_ast(p: &Program) -> String {
    let json = serde_json::to_value(p).expect("AST serializes");
    crate::canon::to_string(&json)
}

/// SHA-256 of the canonical AST, hex encoded.
pub fn program_hash(p: &Program) -> String {
    crate::canon::sha256_hex(canonical_ast(p).as_bytes())
}

/// Renders diagnostics with the offending source line underneath.
pub fn render_diagnostics(src: &SourceProgram, diags: &[Diagnostic]) -> String {
    let lines: Vec<&str> = src.text.lines().collect();
    let mut out = String::new();
    for d in diags {
        out.push_str(&format!("{}:{d}\n", src.origin));
        if let Some(line) = lines.get((d.span.line as usize).wrapping_sub(1)) {
            let pad = " ".repeat(d.span.column.saturating_sub(1) as usize);
            let marks = "^".repeat(d.span.len.max(1) as usize);
            out.push_str(&format!("  {line}\n  {pad}{marks}\n"));
        }
    }
    out
}
