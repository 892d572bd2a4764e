//! Recursive-descent parser.
//!
//! ```text
//! program  := item*
//! item     := "import" IDENT ";"
//!           | "enum" IDENT "{" variant ("," variant)* ","? "}"
//!           | ("function" | "action" | "api") IDENT "(" params ")" ":" type block
//! variant  := IDENT ("{" IDENT ":" type ("," IDENT ":" type)* "}")?
//! type     := "None" | "Bool" | "Int" | "String" | "ByteBuffer" | "Any"
//!           | "List" "<" type ">" | "APIResult" "<" type "," type ">"
//!           | "{" (IDENT ":" type),* "}" | IDENT
//! block    := "{" stmt* "}"
//! stmt     := "let" IDENT "=" expr ";" | "return" expr ";" | "yield" expr ";"
//!           | "match" "(" expr ")" "{" (pattern "=>" block ","?)* "}"
//!           | expr ";"
//! pattern  := "_" | IDENT "::" IDENT | literal
//! expr     := operand (binop operand)*        precedence: * / > + - ++ > comparisons
//! operand  := primary ("." IDENT)*
//! primary  := literal | "(" expr ")" | "[" exprs "]" | "{" (IDENT ":" expr),* "}"
//!           | "Task" "::" "run" "<" IDENT ("::" IDENT)? ">" "(" exprs ")"
//!           | IDENT "::" IDENT ("(" expr ")" | "{" fields "}")?
//!           | IDENT "(" exprs ")" | IDENT
//! literal  := INT | "-" INT | STRING | BYTES | "true" | "false" | "none"
//! ```

use super::ast::*;
use super::lexer::{lex, Tok, Token};
use super::Diagnostic;

pub const KEYWORDS: &[&str] = &[
    "import", "enum", "function", "action", "api", "let", "return", "yield", "match", "true", "false", "none", "Task",
];

pub fn parse(src: &SourceProgram) -> Result<Program, Vec<Diagnostic>> {
    let tokens = lex(&src.text).map_err(|d| vec![d])?;
    let mut p = Parser { tokens, pos: 0 };
    p.program().map_err(|d| vec![d])
}

/// Parses a single type expression, e.g. `APIResult<Int, String>`.
pub fn parse_type(text: &str) -> Result<TypeExpr, Diagnostic> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0 };
    let t = p.ty()?;
    p.expect(Tok::Eof)?;
    Ok(t)
}

type PResult<T> = Result<T, Diagnostic>;

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.tokens.len() - 1);
        &self.tokens[i].tok
    }

    fn span(&self) -> Span {
        self.tokens[self.pos].span
    }

    fn prev_span(&self) -> Span {
        self.tokens[self.pos.saturating_sub(1)].span
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn at(&self, t: &Tok) -> bool {
        self.peek() == t
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.at(t) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn unexpected(&self, what: &str) -> Diagnostic {
        Diagnostic::error(format!("expected {what}, found {}", self.peek().describe()), self.span())
    }

    fn expect(&mut self, t: Tok) -> PResult<Span> {
        if self.at(&t) {
            Ok(self.bump().span)
        } else {
            Err(self.unexpected(&t.describe()))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<Span> {
        if self.at_kw(kw) {
            Ok(self.bump().span)
        } else {
            Err(self.unexpected(&format!("`{kw}`")))
        }
    }

    fn ident(&mut self) -> PResult<(String, Span)> {
        match self.peek().clone() {
            Tok::Ident(s) if !KEYWORDS.contains(&s.as_str()) => {
                let span = self.bump().span;
                Ok((s, span))
            }
            Tok::Ident(s) => Err(Diagnostic::error(format!("`{s}` is a reserved word"), self.span())),
            _ => Err(self.unexpected("an identifier")),
        }
    }

    fn program(&mut self) -> PResult<Program> {
        let mut program = Program {
            imports: Vec::new(),
            enums: Vec::new(),
            functions: Vec::new(),
        };
        while !self.at(&Tok::Eof) {
            if self.at_kw("import") {
                let start = self.bump().span;
                let (name, _) = self.ident()?;
                let end = self.expect(Tok::Semi)?;
                program.imports.push(Import {
                    name,
                    span: start.to(end),
                });
            } else if self.at_kw("enum") {
                program.enums.push(self.enum_decl()?);
            } else if self.at_kw("function") || self.at_kw("action") || self.at_kw("api") {
                program.functions.push(self.function()?);
            } else {
                return Err(self.unexpected("`import`, `enum`, `function`, `action` or `api`"));
            }
        }
        Ok(program)
    }

    fn enum_decl(&mut self) -> PResult<EnumDecl> {
        let start = self.expect_kw("enum")?;
        let (name, _) = self.ident()?;
        self.expect(Tok::LBrace)?;
        let mut variants = Vec::new();
        while !self.at(&Tok::RBrace) {
            let (vname, _) = self.ident()?;
            let fields = if self.at(&Tok::LBrace) {
                self.typed_fields()?
            } else {
                Vec::new()
            };
            variants.push(VariantDecl { name: vname, fields });
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        let end = self.expect(Tok::RBrace)?;
        Ok(EnumDecl {
            name,
            variants,
            span: start.to(end),
        })
    }

    /// `{a: T, b: U}` sorted by name; duplicates rejected.
    fn typed_fields(&mut self) -> PResult<Vec<(String, TypeExpr)>> {
        self.expect(Tok::LBrace)?;
        let mut fields: Vec<(String, TypeExpr)> = Vec::new();
        while !self.at(&Tok::RBrace) {
            let (k, span) = self.ident()?;
            self.expect(Tok::Colon)?;
            let t = self.ty()?;
            if fields.iter().any(|(f, _)| *f == k) {
                return Err(Diagnostic::error(format!("duplicate field `{k}`"), span));
            }
            fields.push((k, t));
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RBrace)?;
        fields.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(fields)
    }

    fn function(&mut self) -> PResult<FunctionDecl> {
        let start = self.span();
        let kind = match self.bump().tok {
            Tok::Ident(k) if k == "function" => FnKind::Function,
            Tok::Ident(k) if k == "action" => FnKind::Action,
            _ => FnKind::Api,
        };
        let (name, _) = self.ident()?;
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        while !self.at(&Tok::RParen) {
            let (pname, _) = self.ident()?;
            self.expect(Tok::Colon)?;
            params.push(Param {
                name: pname,
                ty: self.ty()?,
            });
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        self.expect(Tok::Colon)?;
        let ret = self.ty()?;
        let body = self.block()?;
        Ok(FunctionDecl {
            name,
            kind,
            params,
            ret,
            body,
            span: start.to(self.prev_span()),
        })
    }

    fn ty(&mut self) -> PResult<TypeExpr> {
        if self.at(&Tok::LBrace) {
            return Ok(TypeExpr::Record(self.typed_fields()?));
        }
        let name = match self.peek().clone() {
            Tok::Ident(s) => s,
            _ => return Err(self.unexpected("a type")),
        };
        self.bump();
        Ok(match name.as_str() {
            "None" => TypeExpr::Unit,
            "Bool" => TypeExpr::Bool,
            "Int" => TypeExpr::Int,
            "String" => TypeExpr::String,
            "ByteBuffer" => TypeExpr::Bytes,
            "Any" => TypeExpr::Any,
            "List" => {
                self.expect(Tok::Lt)?;
                let t = self.ty()?;
                self.expect(Tok::Gt)?;
                TypeExpr::List(Box::new(t))
            }
            "APIResult" => {
                self.expect(Tok::Lt)?;
                let ok = self.ty()?;
                self.expect(Tok::Comma)?;
                let err = self.ty()?;
                self.expect(Tok::Gt)?;
                TypeExpr::ApiResult(Box::new(ok), Box::new(err))
            }
            _ if KEYWORDS.contains(&name.as_str()) => {
                return Err(Diagnostic::error(format!("`{name}` is a reserved word"), self.prev_span()))
            }
            _ => TypeExpr::Named(name),
        })
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        self.expect(Tok::LBrace)?;
        let mut out = Vec::new();
        while !self.at(&Tok::RBrace) {
            if self.at(&Tok::Eof) {
                return Err(self.unexpected("`}`"));
            }
            out.push(self.stmt()?);
        }
        self.bump();
        Ok(out)
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        let start = self.span();
        if self.at_kw("let") {
            self.bump();
            let (name, _) = self.ident()?;
            self.expect(Tok::Assign)?;
            let value = self.expr()?;
            let end = self.expect(Tok::Semi)?;
            return Ok(Stmt::Let {
                name,
                value,
                span: start.to(end),
            });
        }
        if self.at_kw("return") || self.at_kw("yield") {
            let is_return = self.at_kw("return");
            self.bump();
            let value = self.expr()?;
            let span = start.to(self.expect(Tok::Semi)?);
            return Ok(if is_return {
                Stmt::Return { value, span }
            } else {
                Stmt::Yield { value, span }
            });
        }
        if self.at_kw("match") {
            self.bump();
            self.expect(Tok::LParen)?;
            let scrutinee = self.expr()?;
            self.expect(Tok::RParen)?;
            self.expect(Tok::LBrace)?;
            let mut arms = Vec::new();
            while !self.at(&Tok::RBrace) {
                let arm_start = self.span();
                let pattern = self.pattern()?;
                self.expect(Tok::FatArrow)?;
                let body = self.block()?;
                arms.push(Arm {
                    pattern,
                    body,
                    span: arm_start.to(self.prev_span()),
                });
                self.eat(&Tok::Comma);
            }
            let end = self.expect(Tok::RBrace)?;
            return Ok(Stmt::Match {
                scrutinee,
                arms,
                span: start.to(end),
            });
        }
        let expr = self.expr()?;
        let end = self.expect(Tok::Semi)?;
        Ok(Stmt::Expr {
            expr,
            span: start.to(end),
        })
    }

    fn pattern(&mut self) -> PResult<Pattern> {
        if matches!(self.peek(), Tok::Ident(s) if s == "_") {
            self.bump();
            return Ok(Pattern::Wildcard);
        }
        if let Some(lit) = self.literal()? {
            return Ok(Pattern::Literal(lit));
        }
        let (enum_name, _) = self.ident()?;
        self.expect(Tok::PathSep)?;
        let (variant, _) = self.ident()?;
        Ok(Pattern::Variant { enum_name, variant })
    }

    fn literal(&mut self) -> PResult<Option<Literal>> {
        let lit = match self.peek().clone() {
            Tok::Int(n) => {
                if n > i64::MAX as u64 {
                    return Err(Diagnostic::error("integer literal out of range", self.span()));
                }
                Literal::Int(n as i64)
            }
            Tok::Minus => match self.peek_at(1).clone() {
                Tok::Int(n) => {
                    self.bump();
                    Literal::Int((n as i128).wrapping_neg() as i64)
                }
                _ => return Ok(None),
            },
            Tok::Str(s) => Literal::Str(s),
            Tok::Bytes(b) => Literal::Bytes(b),
            Tok::Ident(s) if s == "true" => Literal::Bool(true),
            Tok::Ident(s) if s == "false" => Literal::Bool(false),
            Tok::Ident(s) if s == "none" => Literal::Unit,
            _ => return Ok(None),
        };
        self.bump();
        Ok(Some(lit))
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.binary(1)
    }

    fn binop(&self) -> Option<BinOp> {
        Some(match self.peek() {
            Tok::Plus => BinOp::Add,
            Tok::Minus => BinOp::Sub,
            Tok::Star => BinOp::Mul,
            Tok::Slash => BinOp::Div,
            Tok::PlusPlus => BinOp::Concat,
            Tok::EqEq => BinOp::Eq,
            Tok::Ne => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return None,
        })
    }

    fn binary(&mut self, min: u8) -> PResult<Expr> {
        let mut lhs = self.operand()?;
        while let Some(op) = self.binop().filter(|op| op.precedence() >= min) {
            let op_span = self.bump().span;
            if !self.starts_operand() {
                return Err(Diagnostic::error(
                    format!("expected an operand after `{}`", op.symbol()),
                    op_span,
                ));
            }
            let rhs = self.binary(op.precedence() + 1)?;
            let span = lhs.span().to(rhs.span());
            lhs = Expr::BinOp {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                span,
            };
            if op.precedence() == 1 && self.binop().is_some_and(|o| o.precedence() == 1) {
                return Err(Diagnostic::error("comparisons cannot be chained; add parentheses", self.span()));
            }
        }
        Ok(lhs)
    }

    fn starts_operand(&self) -> bool {
        match self.peek() {
            Tok::Int(_) | Tok::Str(_) | Tok::Bytes(_) | Tok::LParen | Tok::LBracket | Tok::LBrace => true,
            Tok::Minus => matches!(self.peek_at(1), Tok::Int(_)),
            Tok::Ident(s) => !KEYWORDS.contains(&s.as_str()) || ["true", "false", "none", "Task"].contains(&s.as_str()),
            _ => false,
        }
    }

    fn operand(&mut self) -> PResult<Expr> {
        let mut e = self.primary()?;
        while self.eat(&Tok::Dot) {
            let (name, span) = self.ident()?;
            let span = e.span().to(span);
            e = Expr::Field {
                base: Box::new(e),
                name,
                span,
            };
        }
        Ok(e)
    }

    fn args(&mut self) -> PResult<Vec<Expr>> {
        self.expect(Tok::LParen)?;
        let mut out = Vec::new();
        while !self.at(&Tok::RParen) {
            out.push(self.expr()?);
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        Ok(out)
    }

    fn field_inits(&mut self) -> PResult<Vec<(String, Expr)>> {
        self.expect(Tok::LBrace)?;
        let mut out = Vec::new();
        while !self.at(&Tok::RBrace) {
            let (k, _) = self.ident()?;
            self.expect(Tok::Colon)?;
            out.push((k, self.expr()?));
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(out)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let start = self.span();
        if let Some(value) = self.literal()? {
            return Ok(Expr::Literal {
                value,
                span: start.to(self.prev_span()),
            });
        }
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::LBracket => {
                self.bump();
                let mut items = Vec::new();
                while !self.at(&Tok::RBracket) {
                    items.push(self.expr()?);
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                let end = self.expect(Tok::RBracket)?;
                Ok(Expr::Construct {
                    ctor: Construct::List(items),
                    span: start.to(end),
                })
            }
            Tok::LBrace => {
                let fields = self.field_inits()?;
                Ok(Expr::Construct {
                    ctor: Construct::Record(fields),
                    span: start.to(self.prev_span()),
                })
            }
            Tok::Ident(s) if s == "Task" => self.task_run(),
            Tok::Ident(_) => {
                let (name, _) = self.ident()?;
                if self.eat(&Tok::PathSep) {
                    return self.variant(name, start);
                }
                if self.at(&Tok::LParen) {
                    let args = self.args()?;
                    return Ok(Expr::Call {
                        name,
                        args,
                        span: start.to(self.prev_span()),
                    });
                }
                Ok(Expr::Var { name, span: start })
            }
            _ => Err(self.unexpected("an expression")),
        }
    }

    fn task_run(&mut self) -> PResult<Expr> {
        let start = self.expect_kw("Task")?;
        self.expect(Tok::PathSep)?;
        match self.peek() {
            Tok::Ident(s) if s == "run" => {
                self.bump();
            }
            _ => return Err(self.unexpected("`run`")),
        }
        self.expect(Tok::Lt)?;
        let (first, _) = self.ident()?;
        let (capability, operation) = if self.eat(&Tok::PathSep) {
            (Some(first), self.ident()?.0)
        } else {
            (None, first)
        };
        self.expect(Tok::Gt)?;
        let args = self.args()?;
        Ok(Expr::TaskRun {
            capability,
            operation,
            args,
            span: start.to(self.prev_span()),
        })
    }

    fn variant(&mut self, enum_name: String, start: Span) -> PResult<Expr> {
        let (variant, vspan) = self.ident()?;
        let sugar = match (enum_name.as_str(), variant.as_str()) {
            ("APIResult", "success") => Some(("Success", "value")),
            ("APIResult", "error") => Some(("Error", "info")),
            _ => None,
        };
        if let Some((tag, field)) = sugar {
            let args = self.args()?;
            if args.len() != 1 {
                return Err(Diagnostic::error(format!("`APIResult::{variant}` takes one argument"), vspan));
            }
            return Ok(Expr::Construct {
                ctor: Construct::Variant {
                    enum_name,
                    variant: tag.to_string(),
                    fields: vec![(field.to_string(), args.into_iter().next().unwrap())],
                },
                span: start.to(self.prev_span()),
            });
        }
        let fields = if self.at(&Tok::LBrace) {
            self.field_inits()?
        } else {
            Vec::new()
        };
        Ok(Expr::Construct {
            ctor: Construct::Variant {
                enum_name,
                variant,
                fields,
            },
            span: start.to(self.prev_span()),
        })
    }
}
