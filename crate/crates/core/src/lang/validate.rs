use std::collections::{BTreeSet, HashMap};

use super::ast::*;
use super::Diagnostic;
use crate::heap::API_RESULT;

const BUILTIN_TYPES: &[&str] = &["None", "Bool", "Int", "String", "ByteBuffer", "Any", "List"];

pub fn validate(p: &Program) -> Vec<Diagnostic> {
    let mut v = Validator {
        program: p,
        diags: Vec::new(),
        functions: HashMap::new(),
    };
    v.run();
    v.diags
}

struct Validator<'p> {
    program: &'p Program,
    diags: Vec<Diagnostic>,
    functions: HashMap<&'p str, &'p FunctionDecl>,
}

impl<'p> Validator<'p> {
    fn error(&mut self, msg: impl Into<String>, span: Span) {
        self.diags.push(Diagnostic::error(msg, span));
    }

    fn run(&mut self) {
        let p = self.program;
        let mut seen_imports = BTreeSet::new();
        for i in &p.imports {
            if !seen_imports.insert(i.name.as_str()) {
                self.error(format!("duplicate import `{}`", i.name), i.span);
            }
        }

        let mut type_names: BTreeSet<&str> = BTreeSet::new();
        for e in &p.enums {
            if BUILTIN_TYPES.contains(&e.name.as_str()) {
                self.error(format!("`{}` is a built-in type name", e.name), e.span);
            } else if e.name == API_RESULT || !type_names.insert(&e.name) {
                self.error(format!("duplicate name `{}`", e.name), e.span);
            }
            let mut variants = BTreeSet::new();
            for var in &e.variants {
                if !variants.insert(var.name.as_str()) {
                    self.error(format!("duplicate variant `{}::{}`", e.name, var.name), e.span);
                }
                for (_, t) in &var.fields {
                    self.check_type(t, e.span);
                }
            }
        }

        for f in &p.functions {
            if builtin_arity(&f.name).is_some() || self.functions.insert(&f.name, f).is_some() {
                self.error(format!("duplicate name `{}`", f.name), f.span);
            }
        }

        for f in &p.functions {
            if f.kind == FnKind::Api && !matches!(f.ret, TypeExpr::ApiResult(..)) {
                self.error(format!("api `{}` must return APIResult<_, _>", f.name), f.span);
            }
            self.check_type(&f.ret, f.span);
            let mut scope = Scope::default();
            for param in &f.params {
                self.check_type(&param.ty, f.span);
                if !scope.declare(&param.name) {
                    self.error(format!("duplicate name `{}`", param.name), f.span);
                }
            }
            self.stmts(f, &f.body, &mut scope);
        }
    }

    fn check_type(&mut self, t: &TypeExpr, span: Span) {
        match t {
            TypeExpr::Named(n) if self.program.enum_decl(n).is_none() => {
                self.error(format!("undeclared type `{n}`"), span)
            }
            TypeExpr::List(inner) => self.check_type(inner, span),
            TypeExpr::Record(fields) => fields.iter().for_each(|(_, t)| self.check_type(t, span)),
            TypeExpr::ApiResult(ok, err) => {
                self.check_type(ok, span);
                self.check_type(err, span);
            }
            _ => {}
        }
    }

    fn stmts(&mut self, f: &FunctionDecl, body: &[Stmt], scope: &mut Scope) {
        scope.push();
        for s in body {
            match s {
                Stmt::Let { name, value, span } => {
                    self.expr(f, value, scope);
                    if !scope.declare(name) {
                        self.error(format!("duplicate name `{name}`"), *span);
                    }
                }
                Stmt::Return { value, .. } | Stmt::Expr { expr: value, .. } => self.expr(f, value, scope),
                Stmt::Yield { value, span } => {
                    if f.kind == FnKind::Function {
                        self.error(format!("yield outside action in function `{}`", f.name), *span);
                    }
                    self.expr(f, value, scope);
                }
                Stmt::Match { scrutinee, arms, span } => {
                    self.expr(f, scrutinee, scope);
                    self.check_coverage(arms, *span);
                    for arm in arms {
                        if let Pattern::Variant { enum_name, variant } = &arm.pattern {
                            if self.variant_fields(enum_name, variant).is_none() {
                                self.error(format!("undeclared variant `{enum_name}::{variant}`"), arm.span);
                            }
                        }
                        self.stmts(f, &arm.body, scope);
                    }
                }
            }
        }
        scope.pop();
    }

    /// A match needs a `_` arm or one arm per variant of a single enum.
    /// Scrutinees of another shape still fail at run time.
    fn check_coverage(&mut self, arms: &[Arm], span: Span) {
        if arms.iter().any(|a| a.pattern == Pattern::Wildcard) {
            return;
        }
        let mut enum_name: Option<&str> = None;
        let mut covered = BTreeSet::new();
        for arm in arms {
            match &arm.pattern {
                Pattern::Variant { enum_name: e, variant } if enum_name.is_none_or(|n| n == e) => {
                    enum_name = Some(e);
                    covered.insert(variant.as_str());
                }
                _ => return self.error("non-exhaustive match: add a `_` arm", span),
            }
        }
        let Some(e) = enum_name else {
            return self.error("non-exhaustive match: no arms", span);
        };
        let all: Vec<&str> = if e == API_RESULT {
            vec!["Error", "Success"]
        } else {
            match self.program.enum_decl(e) {
                Some(d) => d.variants.iter().map(|v| v.name.as_str()).collect(),
                None => return,
            }
        };
        let missing: Vec<String> = all.iter().filter(|v| !covered.contains(*v)).map(|v| format!("{e}::{v}")).collect();
        if !missing.is_empty() {
            self.error(format!("non-exhaustive match: missing {}", missing.join(", ")), span);
        }
    }

    /// Declared field names of a variant, sorted.
    fn variant_fields(&self, enum_name: &str, variant: &str) -> Option<Vec<String>> {
        if enum_name == API_RESULT {
            return match variant {
                "Success" => Some(vec!["value".into()]),
                "Error" => Some(vec!["info".into()]),
                _ => None,
            };
        }
        let v = self.program.enum_decl(enum_name)?.variants.iter().find(|v| v.name == variant)?;
        Some(v.fields.iter().map(|(k, _)| k.clone()).collect())
    }

    fn expr(&mut self, f: &FunctionDecl, e: &Expr, scope: &mut Scope) {
        match e {
            Expr::Literal { .. } => {}
            Expr::Var { name, span } => {
                if !scope.contains(name) {
                    self.error(format!("undeclared name `{name}`"), *span);
                }
            }
            Expr::Call { name, args, span } => {
                let arity = match (builtin_arity(name), self.functions.get(name.as_str()).copied()) {
                    (Some(a), _) => Some(a),
                    (None, Some(target)) => {
                        if f.kind == FnKind::Function && target.kind.effectful() {
                            self.error(
                                format!("effect in pure function `{}`: calls {} `{name}`", f.name, target.kind.keyword()),
                                *span,
                            );
                        }
                        Some(target.params.len())
                    }
                    (None, None) => {
                        self.error(format!("undeclared function `{name}`"), *span);
                        None
                    }
                };
                if let Some(a) = arity.filter(|a| *a != args.len()) {
                    self.error(format!("`{name}` takes {a} arguments, {} given", args.len()), *span);
                }
                args.iter().for_each(|a| self.expr(f, a, scope));
            }
            Expr::TaskRun {
                capability,
                operation,
                args,
                span,
            } => {
                if f.kind == FnKind::Function {
                    self.error(format!("effect in pure function `{}`: Task::run", f.name), *span);
                } else {
                    match capability {
                        Some(c) if !self.program.imports(c) => {
                            self.error(format!("capability not imported: `{c}` (add `import {c};`)"), *span)
                        }
                        Some(_) => {}
                        None => match self.functions.get(operation.as_str()).copied() {
                            Some(t) if t.kind == FnKind::Action => {
                                if t.params.len() != args.len() {
                                    self.error(
                                        format!("`{operation}` takes {} arguments, {} given", t.params.len(), args.len()),
                                        *span,
                                    );
                                }
                            }
                            _ => self.error(format!("`Task::run<{operation}>` must name a capability operation or an action"), *span),
                        },
                    }
                }
                args.iter().for_each(|a| self.expr(f, a, scope));
            }
            Expr::Construct { ctor, span } => match ctor {
                Construct::List(items) => items.iter().for_each(|a| self.expr(f, a, scope)),
                Construct::Record(fields) => {
                    self.field_inits(f, fields, *span, scope);
                }
                Construct::Variant {
                    enum_name,
                    variant,
                    fields,
                } => {
                    match self.variant_fields(enum_name, variant) {
                        None => self.error(format!("undeclared variant `{enum_name}::{variant}`"), *span),
                        Some(declared) => {
                            let mut given: Vec<String> = fields.iter().map(|(k, _)| k.clone()).collect();
                            given.sort();
                            if given != declared {
                                self.error(
                                    format!("`{enum_name}::{variant}` expects fields {{{}}}", declared.join(", ")),
                                    *span,
                                );
                            }
                        }
                    }
                    self.field_inits(f, fields, *span, scope);
                }
            },
            Expr::Field { base, .. } => self.expr(f, base, scope),
            Expr::BinOp { lhs, rhs, .. } => {
                self.expr(f, lhs, scope);
                self.expr(f, rhs, scope);
            }
        }
    }

    fn field_inits(&mut self, f: &FunctionDecl, fields: &[(String, Expr)], span: Span, scope: &mut Scope) {
        let mut seen = BTreeSet::new();
        for (k, v) in fields {
            if !seen.insert(k.as_str()) {
                self.error(format!("duplicate field `{k}`"), span);
            }
            self.expr(f, v, scope);
        }
    }
}

#[derive(Default)]
struct Scope {
    frames: Vec<Vec<String>>,
    params: Vec<String>,
}

impl Scope {
    fn push(&mut self) {
        self.frames.push(Vec::new());
    }

    fn pop(&mut self) {
        self.frames.pop();
    }

    fn contains(&self, name: &str) -> bool {
        self.params.iter().any(|p| p == name) || self.frames.iter().flatten().any(|n| n == name)
    }

    /// Declares a name; shadowing a visible name is rejected.
    fn declare(&mut self, name: &str) -> bool {
        if self.contains(name) {
            return false;
        }
        match self.frames.last_mut() {
            Some(frame) => frame.push(name.to_string()),
            None => self.params.push(name.to_string()),
        }
        true
    }
}
