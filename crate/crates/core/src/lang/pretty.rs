//! Canonical source rendering. The output re-parses to an equal [`Program`].

use std::fmt::Write;

use super::ast::*;

pub fn serialize(p: &Program) -> String {
    let mut out = String::new();
    for i in &p.imports {
        let _ = writeln!(out, "import {};", i.name);
    }
    for e in &p.enums {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = write!(out, "enum {} {{", e.name);
        for (i, v) in e.variants.iter().enumerate() {
            out.push_str(if i == 0 { " " } else { ", " });
            out.push_str(&v.name);
            if !v.fields.is_empty() {
                out.push_str(&TypeExpr::Record(v.fields.clone()).to_string());
            }
        }
        out.push_str(" }\n");
    }
    for f in &p.functions {
        if !out.is_empty() {
            out.push('\n');
        }
        let params: Vec<String> = f.params.iter().map(|p| format!("{}: {}", p.name, p.ty)).collect();
        let _ = writeln!(out, "{} {}({}): {} {{", f.kind.keyword(), f.name, params.join(", "), f.ret);
        stmts(&mut out, &f.body, 1);
        out.push_str("}\n");
    }
    out
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

fn stmts(out: &mut String, body: &[Stmt], depth: usize) {
    for s in body {
        indent(out, depth);
        match s {
            Stmt::Let { name, value, .. } => {
                let _ = writeln!(out, "let {name} = {};", expr(value));
            }
            Stmt::Return { value, .. } => {
                let _ = writeln!(out, "return {};", expr(value));
            }
            Stmt::Yield { value, .. } => {
                let _ = writeln!(out, "yield {};", expr(value));
            }
            Stmt::Expr { expr: e, .. } => {
                let _ = writeln!(out, "{};", expr(e));
            }
            Stmt::Match {
                scrutinee, arms, ..
            } => {
                let _ = writeln!(out, "match({}) {{", expr(scrutinee));
                for arm in arms {
                    indent(out, depth + 1);
                    let _ = writeln!(out, "{} => {{", pattern(&arm.pattern));
                    stmts(out, &arm.body, depth + 2);
                    indent(out, depth + 1);
                    out.push_str("}\n");
                }
                indent(out, depth);
                out.push_str("}\n");
            }
        }
    }
}

fn pattern(p: &Pattern) -> String {
    match p {
        Pattern::Wildcard => "_".into(),
        Pattern::Variant { enum_name, variant } => format!("{enum_name}::{variant}"),
        Pattern::Literal(l) => literal(l),
    }
}

pub fn literal(l: &Literal) -> String {
    match l {
        Literal::Unit => "none".into(),
        Literal::Bool(b) => b.to_string(),
        Literal::Int(i) => i.to_string(),
        Literal::Str(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\r' => out.push_str("\\r"),
                    c if c.is_control() => {
                        let _ = write!(out, "\\u{{{:x}}}", c as u32);
                    }
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
        Literal::Bytes(b) => {
            let mut out = String::from("b\"");
            for &byte in b {
                match byte {
                    b'"' => out.push_str("\\\""),
                    b'\\' => out.push_str("\\\\"),
                    0x20..=0x7e => out.push(byte as char),
                    _ => {
                        let _ = write!(out, "\\x{byte:02x}");
                    }
                }
            }
            out.push('"');
            out
        }
    }
}

fn args(items: &[Expr]) -> String {
    items.iter().map(expr).collect::<Vec<_>>().join(", ")
}

fn field_inits(fields: &[(String, Expr)]) -> String {
    let inner: Vec<String> = fields.iter().map(|(k, v)| format!("{k}: {}", expr(v))).collect();
    format!("{{{}}}", inner.join(", "))
}

pub fn expr(e: &Expr) -> String {
    match e {
        Expr::Literal { value, .. } => literal(value),
        Expr::Var { name, .. } => name.clone(),
        Expr::Call { name, args: a, .. } => format!("{name}({})", args(a)),
        Expr::TaskRun {
            capability,
            operation,
            args: a,
            ..
        } => match capability {
            Some(c) => format!("Task::run<{c}::{operation}>({})", args(a)),
            None => format!("Task::run<{operation}>({})", args(a)),
        },
        Expr::Construct { ctor, .. } => match ctor {
            Construct::List(items) => format!("[{}]", args(items)),
            Construct::Record(fields) => field_inits(fields),
            Construct::Variant {
                enum_name,
                variant,
                fields,
            } => {
                let sugar = match (enum_name.as_str(), variant.as_str(), fields.as_slice()) {
                    ("APIResult", "Success", [(k, v)]) if k == "value" => Some(("success", v)),
                    ("APIResult", "Error", [(k, v)]) if k == "info" => Some(("error", v)),
                    _ => None,
                };
                match sugar {
                    Some((ctor, v)) => format!("APIResult::{ctor}({})", expr(v)),
                    None if fields.is_empty() => format!("{enum_name}::{variant}"),
                    None => format!("{enum_name}::{variant}{}", field_inits(fields)),
                }
            }
        },
        Expr::Field { base, name, .. } => match **base {
            Expr::BinOp { .. } | Expr::Literal { .. } => format!("({}).{name}", expr(base)),
            _ => format!("{}.{name}", expr(base)),
        },
        Expr::BinOp { op, lhs, rhs, .. } => {
            let p = op.precedence();
            let side = |child: &Expr, right: bool| -> String {
                let wrap = match child {
                    Expr::BinOp { op: c, .. } => {
                        let cp = c.precedence();
                        cp < p || (right && cp == p) || (cp == 1 && p == 1)
                    }
                    _ => false,
                };
                if wrap {
                    format!("({})", expr(child))
                } else {
                    expr(child)
                }
            };
            format!("{} {} {}", side(lhs, false), op.symbol(), side(rhs, true))
        }
    }
}
