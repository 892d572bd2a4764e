//! Lowering of function bodies to a flat register code.
//!
//! Every expression result lives in its own register and a `let` simply
//! names the register of its right-hand side; values are immutable, so
//! aliasing is unobservable. Control flow is limited to `match`, which
//! lowers to a chain of `Test`s.

use std::collections::HashMap;

use crate::lang::{BinOp, Construct, Expr, Literal, Pattern, Program, Stmt};

pub(crate) type Reg = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Builtin {
    Len,
    At,
    Push,
    Str,
    Bytes,
}

impl Builtin {
    fn parse(name: &str) -> Option<Builtin> {
        Some(match name {
            "len" => Builtin::Len,
            "at" => Builtin::At,
            "push" => Builtin::Push,
            "str" => Builtin::Str,
            "bytes" => Builtin::Bytes,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum SpawnTarget {
    Effect { capability: String, operation: String },
    Action(usize),
}

#[derive(Debug, Clone)]
pub(crate) enum Instr {
    Const { dst: Reg, value: Literal },
    Call { dst: Reg, func: usize, args: Vec<Reg> },
    Builtin { dst: Reg, builtin: Builtin, args: Vec<Reg> },
    Spawn { dst: Reg, target: SpawnTarget, args: Vec<Reg> },
    List { dst: Reg, items: Vec<Reg> },
    /// Fields sorted by name.
    Record { dst: Reg, fields: Vec<(String, Reg)> },
    Variant { dst: Reg, enum_name: String, variant: String, fields: Vec<(String, Reg)> },
    Field { dst: Reg, base: Reg, name: String },
    Bin { dst: Reg, op: BinOp, lhs: Reg, rhs: Reg },
    /// Falls through when `src` matches, else jumps.
    Test { src: Reg, pattern: Pattern, else_pc: usize },
    Jump(usize),
    Return(Reg),
    Yield(Reg),
    NoMatch(Reg),
}

#[derive(Debug, Clone)]
pub(crate) struct Code {
    pub name: String,
    pub nregs: usize,
    pub instrs: Vec<Instr>,
    /// Statement index (pre-order over the body) of each instruction.
    pub stmt: Vec<u32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Compiled {
    pub functions: Vec<Code>,
    pub index: HashMap<String, usize>,
}

impl Compiled {
    pub fn function(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// The program must have passed validation.
pub(crate) fn compile(p: &Program) -> Compiled {
    let index: HashMap<String, usize> = p.functions.iter().enumerate().map(|(i, f)| (f.name.clone(), i)).collect();
    let functions = p
        .functions
        .iter()
        .map(|f| {
            let mut c = Lower {
                index: &index,
                scope: HashMap::new(),
                nregs: f.params.len() as Reg,
                instrs: Vec::new(),
                stmt_of: Vec::new(),
                stmt: 0,
                next_stmt: 0,
            };
            for (i, param) in f.params.iter().enumerate() {
                c.scope.insert(param.name.clone(), i as Reg);
            }
            c.block(&f.body);
            // Falling off the end returns `none`.
            let r = c.fresh();
            c.emit(Instr::Const { dst: r, value: Literal::Unit });
            c.emit(Instr::Return(r));
            Code {
                name: f.name.clone(),
                nregs: c.nregs as usize,
                instrs: c.instrs,
                stmt: c.stmt_of,
            }
        })
        .collect();
    Compiled { functions, index }
}

struct Lower<'a> {
    index: &'a HashMap<String, usize>,
    scope: HashMap<String, Reg>,
    nregs: Reg,
    instrs: Vec<Instr>,
    stmt_of: Vec<u32>,
    stmt: u32,
    next_stmt: u32,
}

impl Lower<'_> {
    fn fresh(&mut self) -> Reg {
        self.nregs += 1;
        self.nregs - 1
    }

    fn emit(&mut self, i: Instr) -> usize {
        self.instrs.push(i);
        self.stmt_of.push(self.stmt);
        self.instrs.len() - 1
    }

    fn block(&mut self, body: &[Stmt]) {
        let saved = self.scope.clone();
        for s in body {
            self.stmt = self.next_stmt;
            self.next_stmt += 1;
            match s {
                Stmt::Let { name, value, .. } => {
                    let r = self.expr(value);
                    self.scope.insert(name.clone(), r);
                }
                Stmt::Return { value, .. } => {
                    let r = self.expr(value);
                    self.emit(Instr::Return(r));
                }
                Stmt::Yield { value, .. } => {
                    let r = self.expr(value);
                    self.emit(Instr::Yield(r));
                }
                Stmt::Expr { expr, .. } => {
                    self.expr(expr);
                }
                Stmt::Match { scrutinee, arms, .. } => {
                    let src = self.expr(scrutinee);
                    let stmt = self.stmt;
                    let mut exits = Vec::new();
                    for arm in arms {
                        self.stmt = stmt;
                        let test = self.emit(Instr::Test {
                            src,
                            pattern: arm.pattern.clone(),
                            else_pc: 0,
                        });
                        self.block(&arm.body);
                        self.stmt = stmt;
                        exits.push(self.emit(Instr::Jump(0)));
                        let next = self.instrs.len();
                        if let Instr::Test { else_pc, .. } = &mut self.instrs[test] {
                            *else_pc = next;
                        }
                    }
                    self.emit(Instr::NoMatch(src));
                    let end = self.instrs.len();
                    for j in exits {
                        self.instrs[j] = Instr::Jump(end);
                    }
                }
            }
        }
        self.scope = saved;
    }

    fn exprs(&mut self, es: &[Expr]) -> Vec<Reg> {
        es.iter().map(|e| self.expr(e)).collect()
    }

    fn fields(&mut self, fs: &[(String, Expr)]) -> Vec<(String, Reg)> {
        let mut out: Vec<(String, Reg)> = fs.iter().map(|(k, e)| (k.clone(), self.expr(e))).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn expr(&mut self, e: &Expr) -> Reg {
        match e {
            Expr::Var { name, .. } => self.scope[name],
            Expr::Literal { value, .. } => {
                let dst = self.fresh();
                self.emit(Instr::Const { dst, value: value.clone() });
                dst
            }
            Expr::Call { name, args, .. } => {
                let args = self.exprs(args);
                let dst = self.fresh();
                match Builtin::parse(name) {
                    Some(builtin) => self.emit(Instr::Builtin { dst, builtin, args }),
                    None => self.emit(Instr::Call { dst, func: self.index[name], args }),
                };
                dst
            }
            Expr::TaskRun {
                capability,
                operation,
                args,
                ..
            } => {
                let args = self.exprs(args);
                let dst = self.fresh();
                let target = match capability {
                    Some(c) => SpawnTarget::Effect {
                        capability: c.clone(),
                        operation: operation.clone(),
                    },
                    None => SpawnTarget::Action(self.index[operation]),
                };
                self.emit(Instr::Spawn { dst, target, args });
                dst
            }
            Expr::Construct { ctor, .. } => match ctor {
                Construct::List(items) => {
                    let items = self.exprs(items);
                    let dst = self.fresh();
                    self.emit(Instr::List { dst, items });
                    dst
                }
                Construct::Record(fs) => {
                    let fields = self.fields(fs);
                    let dst = self.fresh();
                    self.emit(Instr::Record { dst, fields });
                    dst
                }
                Construct::Variant {
                    enum_name,
                    variant,
                    fields,
                } => {
                    let fields = self.fields(fields);
                    let dst = self.fresh();
                    self.emit(Instr::Variant {
                        dst,
                        enum_name: enum_name.clone(),
                        variant: variant.clone(),
                        fields,
                    });
                    dst
                }
            },
            Expr::Field { base, name, .. } => {
                let base = self.expr(base);
                let dst = self.fresh();
                self.emit(Instr::Field {
                    dst,
                    base,
                    name: name.clone(),
                });
                dst
            }
            Expr::BinOp { op, lhs, rhs, .. } => {
                let lhs = self.expr(lhs);
                let rhs = self.expr(rhs);
                let dst = self.fresh();
                self.emit(Instr::Bin { dst, op: *op, lhs, rhs });
                dst
            }
        }
    }
}
