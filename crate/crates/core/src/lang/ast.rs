use std::fmt;

use serde::Serialize;

/// Source position: 1-based line and column, length in bytes.
///
/// Spans never take part in equality or in the canonical serialization, so
/// two programs that differ only in layout compare equal and hash alike.
#[derive(Debug, Clone, Copy, Default, Eq)]
pub struct Span {
    pub line: u32,
    pub column: u32,
    pub len: u32,
}

impl Span {
    pub fn new(line: u32, column: u32, len: u32) -> Span {
        Span { line, column, len }
    }

    /// From the start of `self` to the end of `end` (same line) or just `self`.
    pub fn to(self, end: Span) -> Span {
        if end.line == self.line && end.column >= self.column {
            Span::new(self.line, self.column, end.column + end.len - self.column)
        } else {
            self
        }
    }
}

impl PartialEq for Span {
    fn eq(&self, _: &Span) -> bool {
        true
    }
}

impl std::hash::Hash for Span {
    fn hash<H: std::hash::Hasher>(&self, _: &mut H) {}
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct SourceProgram {
    pub origin: String,
    pub text: String,
}

impl SourceProgram {
    pub fn new(origin: impl Into<String>, text: impl Into<String>) -> SourceProgram {
        SourceProgram {
            origin: origin.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Program {
    /// Capability packages named by `import` declarations, in source order.
    pub imports: Vec<Import>,
    pub enums: Vec<EnumDecl>,
    /// Functions, actions and apis, in source order.
    pub functions: Vec<FunctionDecl>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&FunctionDecl> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn apis(&self) -> impl Iterator<Item = &FunctionDecl> {
        self.functions.iter().filter(|f| f.kind == FnKind::Api)
    }

    pub fn imports(&self, capability: &str) -> bool {
        self.imports.iter().any(|i| i.name == capability)
    }

    pub fn enum_decl(&self, name: &str) -> Option<&EnumDecl> {
        self.enums.iter().find(|e| e.name == name)
    }

    /// Capability packages the program's `Task::run` sites refer to, sorted
    /// and deduplicated, whether or not they are imported.
    pub fn required_capabilities(&self) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.functions {
            walk_stmts(&f.body, &mut |e| {
                if let Expr::TaskRun {
                    capability: Some(c), ..
                } = e
                {
                    out.push(c.clone());
                }
            });
        }
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Import {
    pub name: String,
    #[serde(skip)]
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct EnumDecl {
    pub name: String,
    pub variants: Vec<VariantDecl>,
    #[serde(skip)]
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct VariantDecl {
    pub name: String,
    pub fields: Vec<(String, TypeExpr)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FnKind {
    Function,
    Action,
    Api,
}

impl FnKind {
    pub fn keyword(self) -> &'static str {
        match self {
            FnKind::Function => "function",
            FnKind::Action => "action",
            FnKind::Api => "api",
        }
    }

    /// Actions and apis may perform effects; functions are pure.
    pub fn effectful(self) -> bool {
        self != FnKind::Function
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct FunctionDecl {
    pub name: String,
    pub kind: FnKind,
    pub params: Vec<Param>,
    pub ret: TypeExpr,
    pub body: Vec<Stmt>,
    #[serde(skip)]
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Param {
    pub name: String,
    pub ty: TypeExpr,
}

/// Types appear in signatures only; they drive boundary validation and
/// binding generation, not static checking of bodies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TypeExpr {
    /// `None`
    Unit,
    Bool,
    Int,
    String,
    /// `ByteBuffer`
    Bytes,
    Any,
    List(Box<TypeExpr>),
    /// `{name: T, ...}`, fields sorted by name.
    Record(Vec<(String, TypeExpr)>),
    /// `APIResult<T, E>`
    ApiResult(Box<TypeExpr>, Box<TypeExpr>),
    /// A declared enum.
    Named(String),
}

impl fmt::Display for TypeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeExpr::Unit => f.write_str("None"),
            TypeExpr::Bool => f.write_str("Bool"),
            TypeExpr::Int => f.write_str("Int"),
            TypeExpr::String => f.write_str("String"),
            TypeExpr::Bytes => f.write_str("ByteBuffer"),
            TypeExpr::Any => f.write_str("Any"),
            TypeExpr::List(t) => write!(f, "List<{t}>"),
            TypeExpr::Record(fields) => {
                f.write_str("{")?;
                for (i, (k, t)) in fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {t}")?;
                }
                f.write_str("}")
            }
            TypeExpr::ApiResult(ok, err) => write!(f, "APIResult<{ok}, {err}>"),
            TypeExpr::Named(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Stmt {
    Let {
        name: String,
        value: Expr,
        #[serde(skip)]
        span: Span,
    },
    Return {
        value: Expr,
        #[serde(skip)]
        span: Span,
    },
    Yield {
        value: Expr,
        #[serde(skip)]
        span: Span,
    },
    Match {
        scrutinee: Expr,
        arms: Vec<Arm>,
        #[serde(skip)]
        span: Span,
    },
    Expr {
        expr: Expr,
        #[serde(skip)]
        span: Span,
    },
}

impl Stmt {
    pub fn span(&self) -> Span {
        match self {
            Stmt::Let { span, .. }
            | Stmt::Return { span, .. }
            | Stmt::Yield { span, .. }
            | Stmt::Match { span, .. }
            | Stmt::Expr { span, .. } => *span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Arm {
    pub pattern: Pattern,
    pub body: Vec<Stmt>,
    #[serde(skip)]
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Pattern {
    Wildcard,
    /// `Enum::Variant`
    Variant { enum_name: String, variant: String },
    Literal(Literal),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Literal {
    Unit,
    Bool(bool),
    Int(i64),
    Str(String),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Concat,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Concat => "++",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
        }
    }

    /// Binding strength; all binary operators are left-associative except
    /// comparisons, which do not chain.
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Mul | BinOp::Div => 3,
            BinOp::Add | BinOp::Sub | BinOp::Concat => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Expr {
    Literal {
        value: Literal,
        #[serde(skip)]
        span: Span,
    },
    Var {
        name: String,
        #[serde(skip)]
        span: Span,
    },
    /// Call of a declared function/action/api or a builtin.
    Call {
        name: String,
        args: Vec<Expr>,
        #[serde(skip)]
        span: Span,
    },
    /// `Task::run<Cap::Op>(args)` submits an effect; `Task::run<act>(args)`
    /// runs a local action as a child task.
    TaskRun {
        capability: Option<String>,
        operation: String,
        args: Vec<Expr>,
        #[serde(skip)]
        span: Span,
    },
    Construct {
        ctor: Construct,
        #[serde(skip)]
        span: Span,
    },
    Field {
        base: Box<Expr>,
        name: String,
        #[serde(skip)]
        span: Span,
    },
    BinOp {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
        #[serde(skip)]
        span: Span,
    },
}

impl Expr {
    pub fn span(&self) -> Span {
        match self {
            Expr::Literal { span, .. }
            | Expr::Var { span, .. }
            | Expr::Call { span, .. }
            | Expr::TaskRun { span, .. }
            | Expr::Construct { span, .. }
            | Expr::Field { span, .. }
            | Expr::BinOp { span, .. } => *span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Construct {
    List(Vec<Expr>),
    /// Fields in source order.
    Record(Vec<(String, Expr)>),
    /// `Enum::Variant` or `Enum::Variant{f: e}`; `APIResult::success(e)` and
    /// `APIResult::error(e)` are sugar for the `Success{value}` and
    /// `Error{info}` variants.
    Variant {
        enum_name: String,
        variant: String,
        fields: Vec<(String, Expr)>,
    },
}

/// Builtin functions, callable from any body.
pub const BUILTINS: &[(&str, usize)] = &[("len", 1), ("at", 2), ("push", 2), ("str", 1), ("bytes", 1)];

pub fn builtin_arity(name: &str) -> Option<usize> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, a)| *a)
}

/// Visits every expression (pre-order) in a statement list.
pub fn walk_stmts(stmts: &[Stmt], f: &mut impl FnMut(&Expr)) {
    for s in stmts {
        match s {
            Stmt::Let { value: e, .. }
            | Stmt::Return { value: e, .. }
            | Stmt::Yield { value: e, .. }
            | Stmt::Expr { expr: e, .. } => walk_expr(e, f),
            Stmt::Match {
                scrutinee, arms, ..
            } => {
                walk_expr(scrutinee, f);
                for arm in arms {
                    walk_stmts(&arm.body, f);
                }
            }
        }
    }
}

pub fn walk_expr(e: &Expr, f: &mut impl FnMut(&Expr)) {
    f(e);
    match e {
        Expr::Literal { .. } | Expr::Var { .. } => {}
        Expr::Call { args, .. } | Expr::TaskRun { args, .. } => args.iter().for_each(|a| walk_expr(a, f)),
        Expr::Construct { ctor, .. } => match ctor {
            Construct::List(items) => items.iter().for_each(|a| walk_expr(a, f)),
            Construct::Record(fields) | Construct::Variant { fields, .. } => {
                fields.iter().for_each(|(_, a)| walk_expr(a, f))
            }
        },
        Expr::Field { base, .. } => walk_expr(base, f),
        Expr::BinOp { lhs, rhs, .. } => {
            walk_expr(lhs, f);
            walk_expr(rhs, f);
        }
    }
}
