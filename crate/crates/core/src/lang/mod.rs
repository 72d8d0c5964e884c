//! The gated assembly language: privileges, registers, expressions, guards and
//! commands, plus the program container and its concrete syntax.

mod asm;
mod layout;
mod print;
mod program;
mod wf;

pub use asm::{parse_asm, ParseError, ParseErrorKind};
pub use layout::{CtxConfig, Layout, LayoutPreset, Region, Span, CONTEXT_SPAN};
pub use print::pretty_print;
pub use program::{CallConv, FuncMeta, Program};
pub use wf::{well_formed, Discipline, Violation};

use std::fmt;

use serde::{Deserialize, Serialize};

/// Security domain of code and data. `Untrusted ⊑ Trusted`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Privilege {
    Untrusted,
    Trusted,
}

impl Privilege {
    /// `self ⊑ other`.
    pub fn flows_to(self, other: Privilege) -> bool {
        self <= other
    }

    pub fn join(self, other: Privilege) -> Privilege {
        self.max(other)
    }

    pub fn opposite(self) -> Privilege {
        match self {
            Privilege::Trusted => Privilege::Untrusted,
            Privilege::Untrusted => Privilege::Trusted,
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Privilege::Trusted => "T",
            Privilege::Untrusted => "U",
        }
    }
}

impl fmt::Display for Privilege {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

pub const NUM_GPRS: usize = 8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reg {
    R0,
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    Sp,
    Pc,
}

impl Reg {
    pub const GPRS: [Reg; NUM_GPRS] = [Reg::R0, Reg::R1, Reg::R2, Reg::R3, Reg::R4, Reg::R5, Reg::R6, Reg::R7];

    /// Index into the general register file, `None` for `sp`/`pc`.
    pub fn gpr(self) -> Option<usize> {
        match self {
            Reg::Sp | Reg::Pc => None,
            r => Some(r as usize),
        }
    }

    pub fn from_gpr(i: usize) -> Reg {
        Reg::GPRS[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg::R0 => "r0",
            Reg::R1 => "r1",
            Reg::R2 => "r2",
            Reg::R3 => "r3",
            Reg::R4 => "r4",
            Reg::R5 => "r5",
            Reg::R6 => "r6",
            Reg::R7 => "r7",
            Reg::Sp => "sp",
            Reg::Pc => "pc",
        }
    }

    pub fn parse(s: &str) -> Option<Reg> {
        Some(match s {
            "r0" => Reg::R0,
            "r1" => Reg::R1,
            "r2" => Reg::R2,
            "r3" => Reg::R3,
            "r4" => Reg::R4,
            "r5" => Reg::R5,
            "r6" => Reg::R6,
            "r7" => Reg::R7,
            "sp" => Reg::Sp,
            "pc" => Reg::Pc,
            _ => return None,
        })
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    /// Truncated subtraction; clamps at zero.
    Monus,
    Mul,
}

impl BinOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.saturating_add(b),
            BinOp::Monus => a.saturating_sub(b),
            BinOp::Mul => a.saturating_mul(b),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Monus => "-",
            BinOp::Mul => "*",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Monus => 1,
            BinOp::Mul => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Lit(u64),
    Reg(Reg),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    /// Registers read by this expression, in left-to-right order.
    pub fn regs(&self) -> Vec<Reg> {
        let mut out = Vec::new();
        self.collect_regs(&mut out);
        out
    }

    fn collect_regs(&self, out: &mut Vec<Reg>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Reg(r) => out.push(*r),
            Expr::Bin(_, a, b) => {
                a.collect_regs(out);
                b.collect_regs(out);
            }
        }
    }

    /// Recognizes `sp`, `sp + c` and `sp - c`, returning the signed offset.
    pub fn sp_offset(&self) -> Option<i64> {
        match self {
            Expr::Reg(Reg::Sp) => Some(0),
            Expr::Bin(op, a, b) => match (op, a.as_ref(), b.as_ref()) {
                (BinOp::Add, Expr::Reg(Reg::Sp), Expr::Lit(c)) | (BinOp::Add, Expr::Lit(c), Expr::Reg(Reg::Sp)) => {
                    i64::try_from(*c).ok()
                }
                (BinOp::Monus, Expr::Reg(Reg::Sp), Expr::Lit(c)) => i64::try_from(*c).ok().map(|c| -c),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn as_lit(&self) -> Option<u64> {
        match self {
            Expr::Lit(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => write!(f, "{v}"),
            Expr::Reg(r) => write!(f, "{r}"),
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                let wrap_left = matches!(a.as_ref(), Expr::Bin(o, _, _) if o.precedence() < p);
                // Right operands of equal precedence need parentheses to keep
                // the left-associative parse tree intact.
                let wrap_right = matches!(b.as_ref(), Expr::Bin(o, _, _) if o.precedence() <= p);
                if wrap_left {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {} ", op.symbol())?;
                if wrap_right {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

/// A guard: a partial map on addresses applied before every guarded access.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckKind {
    Id,
    Mem(Privilege),
    Heap(Privilege),
    Stack(Privilege),
    Code(Privilege),
    Imports,
    Table(String),
}

impl CheckKind {
    /// Applies the guard; `None` where the partial map is undefined.
    pub fn apply(&self, program: &Program, n: u64) -> Option<u64> {
        let layout = &program.layout;
        let keep = |ok: bool| ok.then_some(n);
        match self {
            CheckKind::Id => Some(n),
            CheckKind::Mem(p) => keep(layout.in_mem(*p, n)),
            CheckKind::Heap(p) => keep(layout.in_heap(*p, n)),
            CheckKind::Stack(p) => keep(layout.in_stack(*p, n)),
            CheckKind::Code(p) => keep(program.privilege_at(n) == Some(*p)),
            CheckKind::Imports => keep(program.imports.contains(&n)),
            CheckKind::Table(t) => {
                let i = usize::try_from(n).ok()?;
                program.table_entry(t, i)
            }
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckKind::Id => f.write_str("id"),
            CheckKind::Mem(p) => write!(f, "mem.{p}"),
            CheckKind::Heap(p) => write!(f, "heap.{p}"),
            CheckKind::Stack(p) => write!(f, "stack.{p}"),
            CheckKind::Code(p) => write!(f, "code.{p}"),
            CheckKind::Imports => f.write_str("imports"),
            CheckKind::Table(t) => write!(f, "table.{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Pop(Reg, Privilege),
    Push(Privilege, Expr),
    Jmp(CheckKind, Expr),
    Load(Reg, CheckKind, Expr),
    Store(CheckKind, Expr, Expr),
    GateCall(u64, Expr),
    GateRet,
    Mov(Reg, Expr),
    Call(CheckKind, Expr),
    Ret(CheckKind),
    MovLabel(Reg, Privilege),
    StoreLabel(Privilege, Expr),
}

impl Command {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Command::Pop(..) => "pop",
            Command::Push(..) => "push",
            Command::Jmp(..) => "jmp",
            Command::Load(..) => "load",
            Command::Store(..) => "store",
            Command::GateCall(..) => "gatecall",
            Command::GateRet => "gateret",
            Command::Mov(..) => "mov",
            Command::Call(..) => "call",
            Command::Ret(..) => "ret",
            Command::MovLabel(..) => "movlabel",
            Command::StoreLabel(..) => "storelabel",
        }
    }

    pub fn is_gate(&self) -> bool {
        matches!(self, Command::GateCall(..) | Command::GateRet)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Pop(r, p) => write!(f, "pop {r}, {p}"),
            Command::Push(p, e) => write!(f, "push {p}, {e}"),
            Command::Jmp(k, e) => write!(f, "jmp {k}({e})"),
            Command::Load(r, k, e) => write!(f, "load {r}, {k}({e})"),
            Command::Store(k, a, v) => write!(f, "store {k}({a}), {v}"),
            Command::GateCall(n, e) => write!(f, "gatecall {n}, {e}"),
            Command::GateRet => f.write_str("gateret"),
            Command::Mov(r, e) => write!(f, "mov {r}, {e}"),
            Command::Call(k, e) => write!(f, "call {k}({e})"),
            Command::Ret(k) => write!(f, "ret {k}"),
            Command::MovLabel(r, p) => write!(f, "movlabel {r}, {p}"),
            Command::StoreLabel(p, e) => write!(f, "storelabel {p}, {e}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn privilege_order_and_join() {
        use Privilege::*;
        assert!(Untrusted.flows_to(Trusted));
        assert!(!Trusted.flows_to(Untrusted));
        assert_eq!(Trusted.join(Untrusted), Trusted);
        assert_eq!(Untrusted.join(Trusted), Trusted);
        assert_eq!(Untrusted.join(Untrusted), Untrusted);
    }

    #[test]
    fn monus_clamps() {
        assert_eq!(BinOp::Monus.apply(3, 5), 0);
        assert_eq!(BinOp::Monus.apply(5, 3), 2);
    }

    #[test]
    fn sp_offset_shapes() {
        let sp = || Expr::Reg(Reg::Sp);
        assert_eq!(sp().sp_offset(), Some(0));
        assert_eq!(Expr::bin(BinOp::Monus, sp(), Expr::Lit(3)).sp_offset(), Some(-3));
        assert_eq!(Expr::bin(BinOp::Add, Expr::Lit(2), sp()).sp_offset(), Some(2));
        assert_eq!(Expr::bin(BinOp::Monus, Expr::Lit(2), sp()).sp_offset(), None);
        assert_eq!(Expr::Reg(Reg::R1).sp_offset(), None);
    }

    #[test]
    fn expr_display_keeps_tree_shape() {
        let e = Expr::bin(
            BinOp::Monus,
            Expr::Lit(1),
            Expr::bin(BinOp::Monus, Expr::Lit(1), Expr::Reg(Reg::R1)),
        );
        assert_eq!(e.to_string(), "1 - (1 - r1)");
        let e = Expr::bin(
            BinOp::Mul,
            Expr::bin(BinOp::Add, Expr::Lit(1), Expr::Lit(2)),
            Expr::Lit(3),
        );
        assert_eq!(e.to_string(), "(1 + 2) * 3");
    }
}
