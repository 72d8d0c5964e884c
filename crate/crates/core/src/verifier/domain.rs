use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lang::{BinOp, CallConv, CheckKind, Command, Expr, Privilege, Reg, NUM_GPRS};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AbsVal {
    Uninit,
    Init,
    CalleeSaved(Reg),
}

impl AbsVal {
    pub fn meet(self, other: AbsVal) -> AbsVal {
        if self == other {
            self
        } else {
            AbsVal::Uninit
        }
    }
}

impl fmt::Display for AbsVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbsVal::Uninit => f.write_str("uninit"),
            AbsVal::Init => f.write_str("init"),
            AbsVal::CalleeSaved(r) => write!(f, "callee({r})"),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpOffset {
    Known(i64),
    Invalid,
}

/// Dataflow fact at a program point. Slot offsets are relative to the
/// function's entry `sp`, which addresses the return-address slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsFrame {
    pub regs: [AbsVal; NUM_GPRS],
    /// Missing slots are `Uninit`.
    pub slots: BTreeMap<i64, AbsVal>,
    pub sp: SpOffset,
}

impl AbsFrame {
    pub fn entry(arity: u64, conv: &CallConv) -> AbsFrame {
        let mut regs = [AbsVal::Uninit; NUM_GPRS];
        for &r in &conv.csr {
            if let Some(i) = r.gpr() {
                regs[i] = AbsVal::CalleeSaved(r);
            }
        }
        // Arguments and the return-address slot at offset 0.
        let slots = (-(arity as i64)..=0).map(|o| (o, AbsVal::Init)).collect();
        AbsFrame {
            regs,
            slots,
            sp: SpOffset::Known(0),
        }
    }

    pub fn reg(&self, r: Reg) -> AbsVal {
        match r.gpr() {
            Some(i) => self.regs[i],
            None => AbsVal::Init,
        }
    }

    fn set_reg(&mut self, r: Reg, v: AbsVal) {
        if let Some(i) = r.gpr() {
            self.regs[i] = v;
        }
    }

    pub fn slot(&self, o: i64) -> AbsVal {
        self.slots.get(&o).copied().unwrap_or(AbsVal::Uninit)
    }

    fn set_slot(&mut self, o: i64, v: AbsVal) {
        if v == AbsVal::Uninit {
            self.slots.remove(&o);
        } else {
            self.slots.insert(o, v);
        }
    }

    pub fn meet(&self, other: &AbsFrame) -> AbsFrame {
        let mut regs = self.regs;
        for (a, b) in regs.iter_mut().zip(other.regs) {
            *a = a.meet(b);
        }
        let slots = self
            .slots
            .iter()
            .filter_map(|(o, v)| {
                let m = v.meet(other.slot(*o));
                (m != AbsVal::Uninit).then_some((*o, m))
            })
            .collect();
        let sp = if self.sp == other.sp {
            self.sp
        } else {
            SpOffset::Invalid
        };
        AbsFrame { regs, slots, sp }
    }

    /// Abstract value of an expression: bare registers copy, constants and
    /// `sp` are initialized, compound expressions are initialized only when
    /// every operand is.
    pub fn eval(&self, e: &Expr) -> AbsVal {
        match e {
            Expr::Lit(_) => AbsVal::Init,
            Expr::Reg(r) => self.reg(*r),
            Expr::Bin(..) => {
                if e.regs().iter().all(|r| self.reg(*r) == AbsVal::Init) {
                    AbsVal::Init
                } else {
                    AbsVal::Uninit
                }
            }
        }
    }

    /// Stack slot addressed by `e`, if it has the form `sp ± c` and the
    /// offset is known.
    pub fn slot_of(&self, e: &Expr) -> Option<i64> {
        match (self.sp, e.sp_offset()) {
            (SpOffset::Known(o), Some(c)) => Some(o + c),
            _ => None,
        }
    }
}

/// Abstract post-state after a call returns: the callee may have consumed
/// its `m` arguments and anything above the caller's `sp`; registers other
/// than callee-saves are clobbered, and the return register holds a result.
pub fn after_call(frame: &AbsFrame, m: u64, conv: &CallConv) -> AbsFrame {
    let mut f = frame.clone();
    if let SpOffset::Known(o) = f.sp {
        let lo = o - m as i64;
        f.slots.retain(|k, _| *k <= lo);
    }
    for r in Reg::GPRS {
        if !conv.is_csr(r) {
            f.set_reg(r, AbsVal::Uninit);
        }
    }
    f.set_reg(conv.ret, AbsVal::Init);
    f
}

/// Transfer for straight-line commands. Control transfers (`jmp`, `call`,
/// `ret`, gates) are handled by the analysis.
pub fn transfer(frame: &AbsFrame, cmd: &Command, frame_limit: i64) -> AbsFrame {
    let mut f = frame.clone();
    let known = match f.sp {
        SpOffset::Known(o) => Some(o),
        SpOffset::Invalid => None,
    };
    match cmd {
        Command::Pop(r, _) => {
            if let Some(o) = known {
                f.set_reg(*r, f.slot(o));
                f.sp = SpOffset::Known(o - 1);
            } else {
                f.set_reg(*r, AbsVal::Uninit);
            }
        }
        Command::Push(_, e) => {
            let v = f.eval(e);
            if let Some(o) = known {
                f.set_slot(o + 1, v);
                f.sp = bounded(o + 1, frame_limit);
            }
        }
        Command::Load(r, k, a) => {
            let v = match (k, f.slot_of(a)) {
                (CheckKind::Heap(Privilege::Untrusted), _) => AbsVal::Init,
                (_, Some(o)) => f.slot(o),
                _ => AbsVal::Uninit,
            };
            f.set_reg(*r, v);
        }
        Command::Store(k, a, e) => {
            if !matches!(k, CheckKind::Heap(_)) {
                if let Some(o) = f.slot_of(a) {
                    let v = f.eval(e);
                    f.set_slot(o, v);
                }
            }
        }
        Command::Mov(Reg::Sp, e) => {
            f.sp = match f.slot_of(e) {
                Some(o) => bounded(o, frame_limit),
                None => SpOffset::Invalid,
            };
        }
        Command::Mov(r, e) => {
            let v = f.eval(e);
            f.set_reg(*r, v);
        }
        Command::MovLabel(r, p) => {
            if *p == Privilege::Trusted {
                f.set_reg(*r, AbsVal::Uninit);
            }
        }
        Command::StoreLabel(..)
        | Command::Jmp(..)
        | Command::Call(..)
        | Command::Ret(..)
        | Command::GateCall(..)
        | Command::GateRet => {}
    }
    f
}

fn bounded(o: i64, frame_limit: i64) -> SpOffset {
    if o > frame_limit {
        SpOffset::Invalid
    } else {
        SpOffset::Known(o)
    }
}

/// Over-approximation of the values an expression may take when registers
/// are unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueSet {
    Finite(BTreeSet<u64>),
    Top,
}

/// Sets larger than this collapse to `Top`.
pub const VALUE_SET_CAP: usize = 64;

impl ValueSet {
    fn finite(set: BTreeSet<u64>) -> ValueSet {
        if set.len() > VALUE_SET_CAP {
            ValueSet::Top
        } else {
            ValueSet::Finite(set)
        }
    }

    pub fn of(e: &Expr) -> ValueSet {
        match e {
            Expr::Lit(v) => ValueSet::Finite(BTreeSet::from([*v])),
            Expr::Reg(_) => ValueSet::Top,
            Expr::Bin(op, a, b) => match (ValueSet::of(a), ValueSet::of(b)) {
                // `c - x` is bounded by `c` whatever `x` is.
                (ValueSet::Finite(xs), ValueSet::Top) if *op == BinOp::Monus => {
                    let max = xs.iter().copied().max().unwrap_or(0);
                    if max as usize >= VALUE_SET_CAP {
                        ValueSet::Top
                    } else {
                        ValueSet::Finite((0..=max).collect())
                    }
                }
                (ValueSet::Finite(xs), ValueSet::Finite(ys)) => {
                    if xs.len().saturating_mul(ys.len()) > VALUE_SET_CAP * VALUE_SET_CAP {
                        return ValueSet::Top;
                    }
                    ValueSet::finite(
                        xs.iter()
                            .flat_map(|x| ys.iter().map(move |y| op.apply(*x, *y)))
                            .collect(),
                    )
                }
                _ => ValueSet::Top,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::Privilege::Untrusted;

    fn conv() -> CallConv {
        CallConv::default()
    }

    #[test]
    fn meet_is_a_semilattice() {
        use AbsVal::*;
        let vals = [Uninit, Init, CalleeSaved(Reg::R4), CalleeSaved(Reg::R5)];
        for a in vals {
            assert_eq!(a.meet(a), a);
            assert_eq!(a.meet(Uninit), Uninit);
            for b in vals {
                assert_eq!(a.meet(b), b.meet(a));
                if a != b {
                    assert_eq!(a.meet(b), Uninit);
                }
            }
        }
    }

    #[test]
    fn push_csr_tracks_slot() {
        let f = AbsFrame::entry(0, &conv());
        let g = transfer(&f, &Command::Push(Untrusted, Expr::Reg(Reg::R4)), 64);
        assert_eq!(g.sp, SpOffset::Known(1));
        assert_eq!(g.slot(1), AbsVal::CalleeSaved(Reg::R4));
    }

    #[test]
    fn binop_with_callee_saved_is_uninit() {
        let mut f = AbsFrame::entry(0, &conv());
        f.regs[1] = AbsVal::Init;
        let e = Expr::bin(BinOp::Add, Expr::Reg(Reg::R5), Expr::Reg(Reg::R1));
        let g = transfer(&f, &Command::Mov(Reg::R3, e), 64);
        assert_eq!(g.regs[3], AbsVal::Uninit);
        let g = transfer(&g, &Command::Mov(Reg::R1, Expr::Lit(2)), 64);
        assert_eq!(g.regs[1], AbsVal::Init);
    }

    #[test]
    fn entry_frame_shape() {
        let f = AbsFrame::entry(2, &conv());
        assert_eq!(f.slot(-2), AbsVal::Init);
        assert_eq!(f.slot(-1), AbsVal::Init);
        assert_eq!(f.slot(-3), AbsVal::Uninit);
        assert_eq!(f.regs[0], AbsVal::Uninit);
        assert_eq!(f.regs[3], AbsVal::Uninit);
        assert_eq!(f.regs[4], AbsVal::CalleeSaved(Reg::R4));
        assert_eq!(f.regs[7], AbsVal::CalleeSaved(Reg::R7));
    }

    #[test]
    fn value_sets_of_computed_jumps() {
        let e = Expr::bin(
            BinOp::Add,
            Expr::Lit(10),
            Expr::bin(
                BinOp::Mul,
                Expr::Lit(5),
                Expr::bin(BinOp::Monus, Expr::Lit(1), Expr::Reg(Reg::R1)),
            ),
        );
        assert_eq!(ValueSet::of(&e), ValueSet::Finite(BTreeSet::from([10, 15])));
        assert_eq!(ValueSet::of(&Expr::Reg(Reg::R1)), ValueSet::Top);
    }

    #[test]
    fn call_clobbers_scratch_and_arguments() {
        let mut f = AbsFrame::entry(0, &conv());
        f = transfer(&f, &Command::Push(Untrusted, Expr::Lit(1)), 64);
        f = transfer(&f, &Command::Push(Untrusted, Expr::Lit(2)), 64);
        f.regs[1] = AbsVal::Init;
        let g = after_call(&f, 1, &conv());
        assert_eq!(g.slot(1), AbsVal::Init);
        assert_eq!(g.slot(2), AbsVal::Uninit);
        assert_eq!(g.regs[0], AbsVal::Init);
        assert_eq!(g.regs[1], AbsVal::Uninit);
        assert_eq!(g.regs[4], AbsVal::CalleeSaved(Reg::R4));
    }
}
