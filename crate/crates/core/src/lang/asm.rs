//! Two-pass assembler for the textual program format.
//!
//! Pass one walks the lines, assigns an address to every instruction and
//! records labels, sections and directives. Pass two parses the instruction
//! operands with every label already known.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::layout::{CtxConfig, Layout, Span};
use super::{BinOp, CallConv, CheckKind, Command, Expr, FuncMeta, Privilege, Program, Reg};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("line {line}, column {col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("function `{0}` overlaps function `{1}`")]
    OverlappingFunctions(String, String),
    #[error("table `{table}` references unknown function `{func}`")]
    UnknownTableFunction { table: String, func: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid function: {0}")]
    Function(String),
}

type PResult<T> = Result<T, ParseError>;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(u64),
    Comma,
    LParen,
    RParen,
    Plus,
    Minus,
    Star,
    Eq,
    Colon,
    LBrack,
    RBrack,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    col: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(line: usize, text: &str) -> PResult<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == ';' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let radix = if c == '0' && matches!(chars.get(i + 1), Some('x') | Some('X')) {
                i += 2;
                16
            } else {
                10
            };
            let digits_start = i;
            while i < chars.len() && chars[i].is_digit(radix) {
                i += 1;
            }
            let digits: String = chars[digits_start..i].iter().collect();
            let value = u64::from_str_radix(&digits, radix).map_err(|_| ParseError {
                line,
                col: start + 1,
                kind: ParseErrorKind::Syntax(format!("bad number `{}`", chars[start..i].iter().collect::<String>())),
            })?;
            out.push(Token {
                tok: Tok::Num(value),
                col,
            });
            continue;
        }
        if is_ident_start(c) {
            let start = i;
            while i < chars.len() && is_ident_char(chars[i]) {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                col,
            });
            continue;
        }
        let tok = match c {
            ',' => Tok::Comma,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '=' => Tok::Eq,
            ':' => Tok::Colon,
            '[' => Tok::LBrack,
            ']' => Tok::RBrack,
            _ => {
                return Err(ParseError {
                    line,
                    col,
                    kind: ParseErrorKind::Syntax(format!("unexpected character `{c}`")),
                })
            }
        };
        out.push(Token { tok, col });
        i += 1;
    }
    Ok(out)
}

/// Token cursor over one line.
struct Cursor<'a> {
    line: usize,
    toks: &'a [Token],
    pos: usize,
    /// Column reported at end of line.
    eol_col: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: usize, toks: &'a [Token], eol_col: usize) -> Self {
        Cursor {
            line,
            toks,
            pos: 0,
            eol_col,
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.eol_col, |t| t.col)
    }

    fn err<T>(&self, kind: ParseErrorKind) -> PResult<T> {
        Err(ParseError {
            line: self.line,
            col: self.col(),
            kind,
        })
    }

    fn syntax<T>(&self, msg: impl Into<String>) -> PResult<T> {
        self.err(ParseErrorKind::Syntax(msg.into()))
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.tok.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> PResult<()> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            self.syntax(format!("expected {what}"))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.syntax(format!("expected {what}")),
        }
    }

    fn num(&mut self, what: &str) -> PResult<u64> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => self.syntax(format!("expected {what}")),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn finish(&self) -> PResult<()> {
        if self.at_end() {
            Ok(())
        } else {
            self.syntax("unexpected trailing input")
        }
    }
}

/// One instruction awaiting operand parsing in pass two.
struct PendingInstr {
    addr: u64,
    privilege: Privilege,
    line: usize,
    toks: Vec<Token>,
    eol_col: usize,
}

struct OpenFunc {
    name: String,
    arity: u64,
    exported: bool,
    start: u64,
    line: usize,
    col: usize,
}

struct Context<'a> {
    labels: &'a BTreeMap<String, u64>,
    tables: &'a BTreeMap<String, Vec<String>>,
}

pub fn parse_asm(text: &str) -> Result<Program, ParseError> {
    let mut layout: Option<Layout> = None;
    let mut section: Option<Privilege> = None;
    let mut addr: u64 = 0;
    let mut labels: BTreeMap<String, u64> = BTreeMap::new();
    let mut func_labels: BTreeSet<String> = BTreeSet::new();
    let mut first_app: Option<u64> = None;
    let mut pending: Vec<PendingInstr> = Vec::new();
    let mut funcs: Vec<FuncMeta> = Vec::new();
    let mut open: Option<OpenFunc> = None;
    let mut tables: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut table_refs: Vec<(String, String, usize, usize)> = Vec::new();
    let mut imports_raw: Vec<(Tok, usize, usize)> = Vec::new();
    let mut memory: BTreeMap<u64, u64> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let eol_col = raw.chars().count() + 1;
        let toks = lex(line, raw)?;
        if toks.is_empty() {
            continue;
        }
        let mut cur = Cursor::new(line, &toks, eol_col);

        if let Some(Tok::Ident(word)) = cur.peek() {
            if word.starts_with('.') {
                let word = word.clone();
                let dcol = cur.col();
                cur.next();
                match word.as_str() {
                    ".layout" => {
                        if layout.is_some() {
                            return cur.syntax("duplicate .layout directive");
                        }
                        let rest = strip_comment(raw).trim_start().strip_prefix(".layout").unwrap_or("");
                        layout = Some(parse_layout(rest).map_err(|msg| ParseError {
                            line,
                            col: dcol,
                            kind: ParseErrorKind::Layout(msg),
                        })?);
                    }
                    ".app" | ".lib" => {
                        cur.finish()?;
                        if let Some(f) = &open {
                            return cur.err(ParseErrorKind::Function(format!(
                                "section change inside function `{}`",
                                f.name
                            )));
                        }
                        section = Some(if word == ".app" {
                            Privilege::Trusted
                        } else {
                            Privilege::Untrusted
                        });
                    }
                    ".imports" => loop {
                        let col = cur.col();
                        match cur.next() {
                            Some(t @ (Tok::Ident(_) | Tok::Num(_))) => imports_raw.push((t, line, col)),
                            _ => return cur.syntax("expected import label or address"),
                        }
                        if cur.at_end() {
                            break;
                        }
                        cur.expect(Tok::Comma, "`,`")?;
                    },
                    ".func" => {
                        let col = cur.col();
                        let name = cur.ident("function name")?;
                        let mut arity = None;
                        let mut exported = false;
                        while let Some(Tok::Ident(w)) = cur.peek() {
                            let w = w.clone();
                            if w == "exported" {
                                cur.next();
                                exported = true;
                            } else if w == "arity" {
                                cur.next();
                                cur.expect(Tok::Eq, "`=`")?;
                                arity = Some(cur.num("arity")?);
                            } else {
                                return cur.syntax(format!("unknown .func attribute `{w}`"));
                            }
                        }
                        cur.finish()?;
                        let Some(arity) = arity else {
                            return cur.syntax("missing arity=N");
                        };
                        if let Some(f) = &open {
                            return Err(ParseError {
                                line,
                                col,
                                kind: ParseErrorKind::OverlappingFunctions(name, f.name.clone()),
                            });
                        }
                        if section != Some(Privilege::Untrusted) {
                            return Err(ParseError {
                                line,
                                col,
                                kind: ParseErrorKind::Function(format!("function `{name}` outside the .lib section")),
                            });
                        }
                        if funcs.iter().any(|f| f.name == name) {
                            return Err(ParseError {
                                line,
                                col,
                                kind: ParseErrorKind::Function(format!("duplicate function `{name}`")),
                            });
                        }
                        define_label(&mut labels, &name, addr, line, col)?;
                        func_labels.insert(name.clone());
                        open = Some(OpenFunc {
                            name,
                            arity,
                            exported,
                            start: addr,
                            line,
                            col,
                        });
                    }
                    ".endfunc" => {
                        cur.finish()?;
                        let Some(f) = open.take() else {
                            return cur.syntax(".endfunc without .func");
                        };
                        if f.start == addr {
                            return Err(ParseError {
                                line: f.line,
                                col: f.col,
                                kind: ParseErrorKind::Function(format!("function `{}` has no instructions", f.name)),
                            });
                        }
                        funcs.push(FuncMeta {
                            name: f.name,
                            entry: f.start,
                            arity: f.arity,
                            start: f.start,
                            end: addr,
                            exported: f.exported,
                        });
                    }
                    ".table" => {
                        let name = cur.ident("table name")?;
                        cur.expect(Tok::Eq, "`=`")?;
                        cur.expect(Tok::LBrack, "`[`")?;
                        let mut entries = Vec::new();
                        if cur.peek() != Some(&Tok::RBrack) {
                            loop {
                                let col = cur.col();
                                let f = cur.ident("function name")?;
                                table_refs.push((name.clone(), f.clone(), line, col));
                                entries.push(f);
                                if cur.peek() == Some(&Tok::Comma) {
                                    cur.next();
                                } else {
                                    break;
                                }
                            }
                        }
                        cur.expect(Tok::RBrack, "`]`")?;
                        cur.finish()?;
                        if tables.insert(name.clone(), entries).is_some() {
                            return cur.syntax(format!("duplicate table `{name}`"));
                        }
                    }
                    ".mem" => {
                        let a = cur.num("address")?;
                        cur.expect(Tok::Eq, "`=`")?;
                        let v = cur.num("value")?;
                        cur.finish()?;
                        memory.insert(a, v);
                    }
                    other => return cur.syntax(format!("unknown directive `{other}`")),
                }
                continue;
            }
        }

        // Labels, then an optional instruction.
        while let (Some(Tok::Ident(name)), Some(Tok::Colon)) =
            (cur.peek().cloned(), cur.toks.get(cur.pos + 1).map(|t| &t.tok))
        {
            let col = cur.col();
            if Reg::parse(&name).is_some() {
                return cur.syntax(format!("register name `{name}` used as label"));
            }
            let same_as_func = func_labels.contains(&name) && labels.get(&name) == Some(&addr);
            if !same_as_func {
                define_label(&mut labels, &name, addr, line, col)?;
            }
            cur.pos += 2;
        }
        if cur.at_end() {
            continue;
        }
        let Some(privilege) = section else {
            return cur.syntax("instruction outside .app/.lib section");
        };
        if privilege == Privilege::Trusted && first_app.is_none() {
            first_app = Some(addr);
        }
        pending.push(PendingInstr {
            addr,
            privilege,
            line,
            toks: toks[cur.pos..].to_vec(),
            eol_col,
        });
        addr += 1;
    }

    if let Some(f) = open {
        return Err(ParseError {
            line: f.line,
            col: f.col,
            kind: ParseErrorKind::Function(format!("function `{}` missing .endfunc", f.name)),
        });
    }

    for (table, func, line, col) in &table_refs {
        if !funcs.iter().any(|f| &f.name == func) {
            return Err(ParseError {
                line: *line,
                col: *col,
                kind: ParseErrorKind::UnknownTableFunction {
                    table: table.clone(),
                    func: func.clone(),
                },
            });
        }
    }

    let mut imports = BTreeSet::new();
    for (t, line, col) in imports_raw {
        let a = match t {
            Tok::Num(n) => n,
            Tok::Ident(name) => *labels.get(&name).ok_or(ParseError {
                line,
                col,
                kind: ParseErrorKind::UnknownLabel(name.clone()),
            })?,
            _ => unreachable!("only identifiers and numbers are collected"),
        };
        imports.insert(a);
    }

    let ctx = Context {
        labels: &labels,
        tables: &tables,
    };
    let mut code = BTreeMap::new();
    for p in &pending {
        let mut cur = Cursor::new(p.line, &p.toks, p.eol_col);
        let cmd = parse_command(&mut cur, &ctx)?;
        code.insert(p.addr, (p.privilege, cmd));
    }

    let entry = labels.get("main").copied().or(first_app).unwrap_or(addr);

    Ok(Program {
        code,
        layout: layout.unwrap_or_else(Layout::zerocost_default),
        labels,
        imports,
        funcs,
        tables,
        memory,
        entry,
        conv: CallConv::default(),
    })
}

fn strip_comment(s: &str) -> &str {
    s.split(';').next().unwrap_or("")
}

fn define_label(labels: &mut BTreeMap<String, u64>, name: &str, addr: u64, line: usize, col: usize) -> PResult<()> {
    if labels.insert(name.to_string(), addr).is_some() {
        return Err(ParseError {
            line,
            col,
            kind: ParseErrorKind::DuplicateLabel(name.to_string()),
        });
    }
    Ok(())
}

fn parse_layout(rest: &str) -> Result<Layout, String> {
    let words: Vec<&str> = rest.split_whitespace().collect();
    let Some((&kind, args)) = words.split_first() else {
        return Err("missing layout name".into());
    };
    let layout = match kind {
        "nacl-default" | "zerocost-default" => {
            if !args.is_empty() {
                return Err(format!("`{kind}` takes no arguments"));
            }
            if kind == "nacl-default" {
                Layout::nacl_default()
            } else {
                Layout::zerocost_default()
            }
        }
        "custom" => {
            let mut spans: BTreeMap<&str, Span> = BTreeMap::new();
            let mut shared = false;
            let mut ctx_star = None;
            let mut ctx = None;
            let mut sp0 = None;
            for w in args {
                if *w == "shared" {
                    shared = true;
                    continue;
                }
                let (key, val) = w
                    .split_once('=')
                    .ok_or_else(|| format!("expected key=value, found `{w}`"))?;
                let num = |s: &str| s.parse::<u64>().map_err(|_| format!("bad number `{s}` in `{w}`"));
                match key {
                    "h_t" | "s_t" | "h_u" | "s_u" => {
                        let (lo, hi) = val
                            .split_once("..")
                            .ok_or_else(|| format!("expected LO..HI in `{w}`"))?;
                        let span = Span::new(num(lo)?, num(hi)?);
                        if spans.insert(key, span).is_some() {
                            return Err(format!("duplicate `{key}`"));
                        }
                    }
                    "ctxstar" => ctx_star = Some(num(val)?),
                    "ctx" => ctx = Some(num(val)?),
                    "sp0" => sp0 = Some(num(val)?),
                    _ => return Err(format!("unknown layout key `{key}`")),
                }
            }
            let get = |k: &str| spans.get(k).copied().ok_or_else(|| format!("missing `{k}`"));
            let s_t = get("s_t")?;
            let s_u = if shared {
                spans.get("s_u").copied().unwrap_or(s_t)
            } else {
                get("s_u")?
            };
            let ctx = match (ctx_star, ctx) {
                (Some(ctx_star), Some(ctx)) => Some(CtxConfig { ctx_star, ctx }),
                (None, None) => None,
                _ => return Err("ctxstar and ctx must be given together".into()),
            };
            Layout {
                h_t: get("h_t")?,
                s_t,
                h_u: get("h_u")?,
                s_u,
                shared_stack: shared,
                ctx,
                sp0: sp0.unwrap_or(s_t.lo.saturating_sub(1)),
                preset: None,
            }
        }
        other => return Err(format!("unknown layout `{other}`")),
    };
    layout.validate()?;
    Ok(layout)
}

fn parse_privilege(cur: &mut Cursor) -> PResult<Privilege> {
    match cur.peek() {
        Some(Tok::Ident(s)) if s == "T" => {
            cur.next();
            Ok(Privilege::Trusted)
        }
        Some(Tok::Ident(s)) if s == "U" => {
            cur.next();
            Ok(Privilege::Untrusted)
        }
        _ => cur.syntax("expected privilege `T` or `U`"),
    }
}

fn parse_reg(cur: &mut Cursor) -> PResult<Reg> {
    match cur.peek() {
        Some(Tok::Ident(s)) => match Reg::parse(s) {
            Some(r) => {
                cur.next();
                Ok(r)
            }
            None => cur.syntax(format!("expected register, found `{s}`")),
        },
        _ => cur.syntax("expected register"),
    }
}

/// A destination register for pop/load/movlabel; only general registers.
fn parse_gpr(cur: &mut Cursor) -> PResult<Reg> {
    let col = cur.col();
    let r = parse_reg(cur)?;
    if r.gpr().is_none() {
        return Err(ParseError {
            line: cur.line,
            col,
            kind: ParseErrorKind::Syntax(format!("register `{r}` is not writable here")),
        });
    }
    Ok(r)
}

fn parse_guard(cur: &mut Cursor, ctx: &Context) -> PResult<CheckKind> {
    let col = cur.col();
    let word = cur.ident("guard")?;
    let priv_of = |s: &str| match s {
        "T" => Some(Privilege::Trusted),
        "U" => Some(Privilege::Untrusted),
        _ => None,
    };
    let kind = match word.as_str() {
        "id" => CheckKind::Id,
        "imports" => CheckKind::Imports,
        _ => {
            let bad = || ParseError {
                line: cur.line,
                col,
                kind: ParseErrorKind::Syntax(format!("unknown guard `{word}`")),
            };
            let (head, tail) = word.split_once('.').ok_or_else(bad)?;
            match head {
                "table" => {
                    if !ctx.tables.contains_key(tail) {
                        return Err(ParseError {
                            line: cur.line,
                            col,
                            kind: ParseErrorKind::UnknownTable(tail.to_string()),
                        });
                    }
                    CheckKind::Table(tail.to_string())
                }
                "mem" | "heap" | "stack" | "code" => {
                    let p = priv_of(tail).ok_or_else(bad)?;
                    match head {
                        "mem" => CheckKind::Mem(p),
                        "heap" => CheckKind::Heap(p),
                        "stack" => CheckKind::Stack(p),
                        _ => CheckKind::Code(p),
                    }
                }
                _ => return Err(bad()),
            }
        }
    };
    Ok(kind)
}

fn parse_guarded(cur: &mut Cursor, ctx: &Context) -> PResult<(CheckKind, Expr)> {
    let k = parse_guard(cur, ctx)?;
    cur.expect(Tok::LParen, "`(`")?;
    let e = parse_expr(cur, ctx)?;
    cur.expect(Tok::RParen, "`)`")?;
    Ok((k, e))
}

fn parse_expr(cur: &mut Cursor, ctx: &Context) -> PResult<Expr> {
    let mut lhs = parse_term(cur, ctx)?;
    loop {
        let op = match cur.peek() {
            Some(Tok::Plus) => BinOp::Add,
            Some(Tok::Minus) => BinOp::Monus,
            _ => return Ok(lhs),
        };
        cur.next();
        let rhs = parse_term(cur, ctx)?;
        lhs = Expr::bin(op, lhs, rhs);
    }
}

fn parse_term(cur: &mut Cursor, ctx: &Context) -> PResult<Expr> {
    let mut lhs = parse_atom(cur, ctx)?;
    while cur.peek() == Some(&Tok::Star) {
        cur.next();
        let rhs = parse_atom(cur, ctx)?;
        lhs = Expr::bin(BinOp::Mul, lhs, rhs);
    }
    Ok(lhs)
}

fn parse_atom(cur: &mut Cursor, ctx: &Context) -> PResult<Expr> {
    let col = cur.col();
    match cur.next() {
        Some(Tok::Num(n)) => Ok(Expr::Lit(n)),
        Some(Tok::Ident(s)) => {
            if let Some(r) = Reg::parse(&s) {
                Ok(Expr::Reg(r))
            } else if let Some(a) = ctx.labels.get(&s) {
                Ok(Expr::Lit(*a))
            } else {
                Err(ParseError {
                    line: cur.line,
                    col,
                    kind: ParseErrorKind::UnknownLabel(s),
                })
            }
        }
        Some(Tok::LParen) => {
            let e = parse_expr(cur, ctx)?;
            cur.expect(Tok::RParen, "`)`")?;
            Ok(e)
        }
        _ => {
            cur.pos = cur.pos.saturating_sub(1);
            Err(ParseError {
                line: cur.line,
                col,
                kind: ParseErrorKind::Syntax("expected expression".into()),
            })
        }
    }
}

fn parse_command(cur: &mut Cursor, ctx: &Context) -> PResult<Command> {
    let mnemonic = cur.ident("instruction")?;
    let cmd = match mnemonic.as_str() {
        "pop" => {
            let r = parse_gpr(cur)?;
            cur.expect(Tok::Comma, "`,`")?;
            Command::Pop(r, parse_privilege(cur)?)
        }
        "push" => {
            let p = parse_privilege(cur)?;
            cur.expect(Tok::Comma, "`,`")?;
            Command::Push(p, parse_expr(cur, ctx)?)
        }
        "jmp" => {
            let (k, e) = parse_guarded(cur, ctx)?;
            Command::Jmp(k, e)
        }
        "load" => {
            let r = parse_gpr(cur)?;
            cur.expect(Tok::Comma, "`,`")?;
            let (k, e) = parse_guarded(cur, ctx)?;
            Command::Load(r, k, e)
        }
        "store" => {
            let (k, a) = parse_guarded(cur, ctx)?;
            cur.expect(Tok::Comma, "`,`")?;
            Command::Store(k, a, parse_expr(cur, ctx)?)
        }
        "gatecall" => {
            let n = cur.num("argument count")?;
            cur.expect(Tok::Comma, "`,`")?;
            Command::GateCall(n, parse_expr(cur, ctx)?)
        }
        "gateret" => Command::GateRet,
        "mov" => {
            let col = cur.col();
            let r = parse_reg(cur)?;
            if r == Reg::Pc {
                return Err(ParseError {
                    line: cur.line,
                    col,
                    kind: ParseErrorKind::Syntax("register `pc` is not writable".into()),
                });
            }
            cur.expect(Tok::Comma, "`,`")?;
            Command::Mov(r, parse_expr(cur, ctx)?)
        }
        "call" => {
            let (k, e) = parse_guarded(cur, ctx)?;
            Command::Call(k, e)
        }
        "ret" => {
            if cur.at_end() {
                Command::Ret(CheckKind::Id)
            } else {
                Command::Ret(parse_guard(cur, ctx)?)
            }
        }
        "movlabel" => {
            let r = parse_gpr(cur)?;
            cur.expect(Tok::Comma, "`,`")?;
            Command::MovLabel(r, parse_privilege(cur)?)
        }
        "storelabel" => {
            let p = parse_privilege(cur)?;
            cur.expect(Tok::Comma, "`,`")?;
            Command::StoreLabel(p, parse_expr(cur, ctx)?)
        }
        other => {
            cur.pos -= 1;
            return cur.syntax(format!("unknown instruction `{other}`"));
        }
    };
    cur.finish()?;
    Ok(cmd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_line_app() {
        let p = parse_asm(".app\nmain: mov r1, 7\n").unwrap();
        assert_eq!(
            p.code.get(&0),
            Some(&(Privilege::Trusted, Command::Mov(Reg::R1, Expr::Lit(7))))
        );
        assert_eq!(p.entry, 0);
    }

    #[test]
    fn func_metadata() {
        let src = "\
.lib
.func lib_add5 arity=1 exported
  load r0, id(sp - 1)
  mov r0, r0 + 5
  gateret
.endfunc
.app
main:
  gatecall 1, lib_add5
";
        let p = parse_asm(src).unwrap();
        assert_eq!(
            p.funcs,
            vec![FuncMeta {
                name: "lib_add5".into(),
                entry: 0,
                arity: 1,
                start: 0,
                end: 3,
                exported: true,
            }]
        );
        assert_eq!(p.entry, 3);
        assert_eq!(p.code[&3].1, Command::GateCall(1, Expr::Lit(0)));
    }

    #[test]
    fn forward_labels_resolve() {
        let p = parse_asm(".app\nmain: jmp code.T(end)\nmov r1, 1\nend: mov r2, 2\n").unwrap();
        assert_eq!(
            p.code[&0].1,
            Command::Jmp(CheckKind::Code(Privilege::Trusted), Expr::Lit(2))
        );
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_asm(".app\nmain: mov r1, 7 +\n").unwrap_err();
        assert_eq!((e.line, e.col), (2, 18));
        assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));

        let e = parse_asm(".app\na: mov r1, 1\na: mov r1, 2\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::DuplicateLabel("a".into()));
        assert_eq!(e.line, 3);

        let e = parse_asm(".app\njmp code.T(nowhere)\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownLabel("nowhere".into()));
        assert_eq!((e.line, e.col), (2, 12));
    }

    #[test]
    fn overlapping_functions_rejected() {
        let src = ".lib\n.func f arity=0\nret code.U\n.func g arity=0\nret code.U\n.endfunc\n.endfunc\n";
        let e = parse_asm(src).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::OverlappingFunctions("g".into(), "f".into()));
    }

    #[test]
    fn table_with_unknown_function() {
        let src = ".table t = [f, nope]\n.lib\n.func f arity=0\nret code.U\n.endfunc\n";
        let e = parse_asm(src).unwrap_err();
        assert_eq!(
            e.kind,
            ParseErrorKind::UnknownTableFunction {
                table: "t".into(),
                func: "nope".into()
            }
        );
    }

    #[test]
    fn custom_layout() {
        let p = parse_asm(".layout custom h_t=0..10 s_t=10..20 h_u=20..30 s_u=30..40 ctxstar=0 ctx=2 sp0=9\n").unwrap();
        assert_eq!(p.layout.s_u, Span::new(30, 40));
        assert_eq!(p.layout.ctx, Some(CtxConfig { ctx_star: 0, ctx: 2 }));
        assert_eq!(p.layout.sp0, 9);
        let e = parse_asm(".layout custom h_t=0..10 s_t=5..20 h_u=20..30 s_u=30..40\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Layout(_)));
    }

    #[test]
    fn func_name_label_may_be_repeated() {
        let src = ".lib\n.func f arity=0\nf: ret code.U\n.endfunc\n";
        let p = parse_asm(src).unwrap();
        assert_eq!(p.label("f"), Some(0));
    }

    #[test]
    fn bare_ret_is_identity_guard() {
        let p = parse_asm(".app\nret\n").unwrap();
        assert_eq!(p.code[&0].1, Command::Ret(CheckKind::Id));
    }
}
