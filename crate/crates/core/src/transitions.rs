//! Gate semantics. `ZeroCost` gates reduce like a plain call/return across
//! domains; `NaClHeavy` gates run the springboard and trampoline templates
//! atomically and report their instruction count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::lang::{CallConv, CtxConfig, Expr, Privilege, Program};
use crate::machine::{eval_expr, ErrorKind, MachineError, MachineState};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    ZeroCost,
    NaClHeavy,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::ZeroCost => "zero",
            Strategy::NaClHeavy => "nacl",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Strategy::ZeroCost),
            "nacl" => Ok(Strategy::NaClHeavy),
            _ => Err(format!("unknown gate strategy `{s}` (expected zero|nacl)")),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    AppToLib,
    LibToApp,
}

impl Direction {
    /// Direction of a gatecall issued from code of privilege `p`.
    pub fn of_call(p: Privilege) -> Direction {
        match p {
            Privilege::Trusted => Direction::AppToLib,
            Privilege::Untrusted => Direction::LibToApp,
        }
    }
}

type GateResult = Result<(MachineState, u32), MachineError>;

impl Strategy {
    pub fn gatecall(self, program: &Program, state: &MachineState, p: Privilege, n: u64, target: &Expr) -> GateResult {
        match self {
            Strategy::ZeroCost => zerocost_gatecall(program, state, p, target),
            Strategy::NaClHeavy => match p {
                Privilege::Trusted => nacl_springboard(program, state, n, target),
                Privilege::Untrusted => nacl_cb_springboard(program, state, n, target),
            },
        }
    }

    pub fn gateret(self, program: &Program, state: &MachineState, p: Privilege) -> GateResult {
        match self {
            Strategy::ZeroCost => zerocost_gateret(program, state, p),
            Strategy::NaClHeavy => match p {
                Privilege::Untrusted => nacl_trampoline(program, state),
                Privilege::Trusted => nacl_cb_trampoline(program, state),
            },
        }
    }
}

/// Micro-op count of a gatecall with `n` stack arguments.
pub fn gate_cost(strategy: Strategy, direction: Direction, n: u64, conv: &CallConv) -> u64 {
    let csr = conv.csr.len() as u64;
    let clear = conv.clear.len() as u64;
    match (strategy, direction) {
        (Strategy::ZeroCost, _) => 1,
        (Strategy::NaClHeavy, Direction::AppToLib) => 10 + 2 * csr + 3 * n + clear,
        (Strategy::NaClHeavy, Direction::LibToApp) => 10 + 3 * n,
    }
}

/// Micro-op count of the gateret matching a gatecall in `direction`.
pub fn gateret_cost(strategy: Strategy, direction: Direction, conv: &CallConv) -> u64 {
    let csr = conv.csr.len() as u64;
    let clear = conv.clear.len() as u64;
    match (strategy, direction) {
        (Strategy::ZeroCost, _) => 1,
        (Strategy::NaClHeavy, Direction::AppToLib) => 8 + 2 * csr,
        (Strategy::NaClHeavy, Direction::LibToApp) => 6 + clear,
    }
}

fn err(kind: ErrorKind, pc: u64, detail: impl Into<String>) -> MachineError {
    MachineError::new(kind, pc, detail)
}

fn zerocost_gatecall(program: &Program, state: &MachineState, p: Privilege, target: &Expr) -> GateResult {
    let pc = state.pc;
    let sp1 = state.sp.saturating_add(1);
    if !program.layout.in_any_stack(sp1) {
        return Err(err(
            ErrorKind::RegionViolation,
            pc,
            format!("gatecall: {sp1} not in a stack"),
        ));
    }
    let t = eval_expr(state, target);
    check_gate_target(program, pc, p, t)?;
    let mut s = state.clone();
    s.write(sp1, pc + 1);
    s.sp = sp1;
    s.pc = t;
    Ok((s, 1))
}

fn check_gate_target(program: &Program, pc: u64, p: Privilege, t: u64) -> Result<(), MachineError> {
    if program.privilege_at(t) != Some(p.opposite()) {
        return Err(err(
            ErrorKind::GuardUndefined,
            pc,
            format!("gatecall target {t} not in {} code", p.opposite()),
        ));
    }
    if p == Privilege::Untrusted && !program.imports.contains(&t) {
        return Err(err(
            ErrorKind::GuardUndefined,
            pc,
            format!("gatecall target {t} is not an import"),
        ));
    }
    Ok(())
}

fn zerocost_gateret(program: &Program, state: &MachineState, p: Privilege) -> GateResult {
    let pc = state.pc;
    if !program.layout.in_any_stack(state.sp) {
        return Err(err(
            ErrorKind::RegionViolation,
            pc,
            format!("gateret: sp {} not in a stack", state.sp),
        ));
    }
    // The return may leave the code entirely, which halts the machine.
    let ra = state.read(state.sp);
    if program.privilege_at(ra) == Some(p) {
        return Err(err(
            ErrorKind::GuardUndefined,
            pc,
            format!("gateret: return address {ra} is in {p} code"),
        ));
    }
    let mut s = state.clone();
    s.sp = s.sp.saturating_sub(1);
    s.pc = ra;
    Ok((s, 1))
}

/// Template execution context: the state being transformed plus the three
/// template temporaries and an instruction counter.
struct Tpl<'a> {
    program: &'a Program,
    s: MachineState,
    t: [u64; 3],
    ops: u32,
    pc: u64,
    ctx: CtxConfig,
}

impl<'a> Tpl<'a> {
    fn new(program: &'a Program, state: &MachineState) -> Result<Tpl<'a>, MachineError> {
        let ctx = program
            .layout
            .ctx
            .ok_or_else(|| err(ErrorKind::RegionViolation, state.pc, "layout has no transition context"))?;
        Ok(Tpl {
            program,
            s: state.clone(),
            t: [0; 3],
            ops: 0,
            pc: state.pc,
            ctx,
        })
    }

    fn op(&mut self) {
        self.ops += 1;
    }

    fn fail(&self, kind: ErrorKind, detail: String) -> MachineError {
        err(kind, self.pc, detail)
    }

    fn ctx_addr(&self, a: u64) -> Result<u64, MachineError> {
        if self.program.layout.in_heap(Privilege::Trusted, a) {
            Ok(a)
        } else {
            Err(self.fail(
                ErrorKind::RegionViolation,
                format!("context access at {a} outside the trusted heap"),
            ))
        }
    }

    fn load_ctx(&mut self, a: u64) -> Result<u64, MachineError> {
        self.op();
        let a = self.ctx_addr(a)?;
        Ok(self.s.read(a))
    }

    fn store_ctx(&mut self, a: u64, v: u64) -> Result<(), MachineError> {
        self.op();
        let a = self.ctx_addr(a)?;
        self.s.write(a, v);
        Ok(())
    }

    /// Pushes the return address `pc + 1`, requiring the slot in stack `p`.
    fn push_ra(&mut self, p: Privilege) -> Result<(), MachineError> {
        self.op();
        let sp1 = self.s.sp.saturating_add(1);
        if !self.program.layout.in_stack(p, sp1) {
            return Err(self.fail(
                ErrorKind::RegionViolation,
                format!("return address slot {sp1} not in S_{p}"),
            ));
        }
        self.s.write(sp1, self.pc + 1);
        self.s.sp = sp1;
        Ok(())
    }

    /// Copies `n` arguments from below `sp` (in stack `from`) to the cells
    /// ending at `t1` (in stack `to`), three template lines per argument.
    fn copy_args(&mut self, n: u64, from: Privilege, to: Privilege) -> Result<(), MachineError> {
        let layout = &self.program.layout;
        for _ in 0..n {
            self.op();
            if !layout.in_stack(from, self.s.sp) {
                return Err(self.fail(
                    ErrorKind::RegionViolation,
                    format!("argument copy: sp {} not in S_{from}", self.s.sp),
                ));
            }
            self.t[2] = self.s.read(self.s.sp);
            self.s.sp = self.s.sp.saturating_sub(1);
            self.op();
            if !layout.in_stack(to, self.t[1]) {
                return Err(self.fail(
                    ErrorKind::RegionViolation,
                    format!("argument copy: {} not in S_{to}", self.t[1]),
                ));
            }
            self.s.write(self.t[1], self.t[2]);
            self.op();
            self.t[1] = self.t[1].saturating_sub(1);
        }
        Ok(())
    }

    fn clear(&mut self) {
        for &r in &self.program.conv.clear {
            self.op();
            self.s.set_reg(r, 0);
        }
    }

    fn jump(mut self, target: u64, p: Privilege) -> GateResult {
        self.op();
        check_gate_target(self.program, self.pc, p, target)?;
        self.s.pc = target;
        Ok((self.s, self.ops))
    }

    /// Template `ret`. With `exact`, the return address must be code of
    /// privilege `p`; otherwise it must merely avoid the other privilege's code.
    fn ret(mut self, p: Privilege, exact: bool) -> GateResult {
        self.op();
        if !self.program.layout.in_any_stack(self.s.sp) {
            return Err(self.fail(
                ErrorKind::RegionViolation,
                format!("ret: sp {} not in a stack", self.s.sp),
            ));
        }
        let ra = self.s.read(self.s.sp);
        let at = self.program.privilege_at(ra);
        if (exact && at != Some(p)) || at == Some(p.opposite()) {
            return Err(self.fail(
                ErrorKind::GuardUndefined,
                format!("return address {ra} not in {p} code"),
            ));
        }
        self.s.sp = self.s.sp.saturating_sub(1);
        self.s.pc = ra;
        Ok((self.s, self.ops))
    }
}

fn nacl_springboard(program: &Program, state: &MachineState, n: u64, target: &Expr) -> GateResult {
    let target = eval_expr(state, target);
    let mut t = Tpl::new(program, state)?;
    t.push_ra(Privilege::Trusted)?;
    t.t[0] = t.load_ctx(t.ctx.ctx_star)?;
    t.t[1] = t.load_ctx(t.t[0])?;
    for &r in program.conv.csr.iter().rev() {
        let v = t.s.reg(r);
        t.store_ctx(t.t[0], v)?;
        t.op();
        t.t[0] += 1;
    }
    t.op();
    t.t[1] = t.t[1].saturating_add(n);
    t.op();
    t.s.sp = t.s.sp.saturating_sub(1);
    t.copy_args(n, Privilege::Trusted, Privilege::Untrusted)?;
    t.op();
    t.t[2] = t.s.sp.saturating_add(n + 1);
    t.store_ctx(t.t[0], t.t[2])?;
    // One slot above the arguments stands in for the return address so that
    // library code sees the same frame shape under both strategies.
    t.op();
    t.s.sp = t.t[1].saturating_add(n + 1);
    t.store_ctx(t.ctx.ctx_star, t.t[0])?;
    t.clear();
    t.jump(target, Privilege::Trusted)
}

fn nacl_trampoline(program: &Program, state: &MachineState) -> GateResult {
    let mut t = Tpl::new(program, state)?;
    let csr = program.conv.csr.clone();
    t.t[0] = t.load_ctx(t.ctx.ctx_star)?;
    for &r in &csr {
        t.op();
        t.t[0] = t.t[0].saturating_sub(1);
        let v = t.load_ctx(t.t[0])?;
        t.s.set_reg(r, v);
    }
    t.t[0] = t.load_ctx(t.ctx.ctx_star)?;
    t.t[1] = t.load_ctx(t.t[0])?;
    t.op();
    t.t[0] = t.t[0].saturating_sub(csr.len() as u64);
    let sp = t.s.sp;
    t.store_ctx(t.t[0], sp)?;
    t.store_ctx(t.ctx.ctx_star, t.t[0])?;
    t.op();
    t.s.sp = t.t[1];
    t.ret(Privilege::Trusted, false)
}

fn nacl_cb_springboard(program: &Program, state: &MachineState, n: u64, target: &Expr) -> GateResult {
    let target = eval_expr(state, target);
    let mut t = Tpl::new(program, state)?;
    t.push_ra(Privilege::Untrusted)?;
    t.t[0] = t.load_ctx(t.ctx.ctx_star)?;
    t.t[1] = t.load_ctx(t.t[0])?;
    t.op();
    t.t[0] += 1;
    let sp = t.s.sp;
    t.store_ctx(t.t[0], sp)?;
    t.store_ctx(t.ctx.ctx_star, t.t[0])?;
    t.op();
    t.s.sp = t.s.sp.saturating_sub(1);
    t.op();
    t.t[1] = t.t[1].saturating_add(n);
    t.copy_args(n, Privilege::Untrusted, Privilege::Trusted)?;
    t.op();
    t.s.sp = t.t[1].saturating_add(n + 1);
    t.jump(target, Privilege::Untrusted)
}

fn nacl_cb_trampoline(program: &Program, state: &MachineState) -> GateResult {
    let mut t = Tpl::new(program, state)?;
    t.t[0] = t.load_ctx(t.ctx.ctx_star)?;
    t.t[1] = t.load_ctx(t.t[0])?;
    t.op();
    t.t[0] = t.t[0].saturating_sub(1);
    t.store_ctx(t.ctx.ctx_star, t.t[0])?;
    t.op();
    t.s.sp = t.t[1];
    t.clear();
    t.ret(Privilege::Untrusted, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_asm;
    use crate::machine::{run, Outcome};

    #[test]
    fn zerocost_costs_are_one() {
        let conv = CallConv::default();
        for n in 0..5 {
            assert_eq!(gate_cost(Strategy::ZeroCost, Direction::AppToLib, n, &conv), 1);
            assert_eq!(gate_cost(Strategy::ZeroCost, Direction::LibToApp, n, &conv), 1);
        }
    }

    #[test]
    fn nacl_round_trip_restores_state() {
        let src = "\
.layout nacl-default
.lib
f: mov r4, 666
mov r0, r4 + 1
gateret
.app
main: mov r4, 42
push T, 3
gatecall 1, f
";
        let p = parse_asm(src).unwrap();
        let t = run(&p, Strategy::NaClHeavy, 100);
        assert_eq!(t.outcome, Outcome::Halted);
        assert_eq!(t.last.regs[4], 42);
        assert_eq!(t.last.regs[0], 667);
        assert_eq!(t.last.sp, 128);
        assert_eq!(t.last.read(8), 385);
        assert_eq!(t.last.read(0), 8);
        let gates: Vec<u32> = t
            .steps
            .iter()
            .filter(|r| r.command.is_gate())
            .map(|r| r.micro_ops)
            .collect();
        assert_eq!(gates, vec![29, 16]);
    }

    #[test]
    fn nacl_callback_round_trip() {
        let src = "\
.layout nacl-default
.imports cb
.lib
f: mov r1, 5
push U, 9
gatecall 1, cb
mov r2, r1
gateret
.app
cb: load r0, id(sp - 1)
mov r1, 77
gateret
main: gatecall 0, f
";
        let p = parse_asm(src).unwrap();
        let t = run(&p, Strategy::NaClHeavy, 100);
        assert_eq!(t.outcome, Outcome::Halted, "{:?}", t.steps);
        // The callback trampoline clears every register in the clear set.
        assert_eq!(t.last.regs[2], 0);
        assert_eq!(t.last.sp, 127);
        let gates: Vec<u32> = t
            .steps
            .iter()
            .filter(|r| r.command.is_gate())
            .map(|r| r.micro_ops)
            .collect();
        assert_eq!(gates, vec![26, 13, 14, 16]);
    }

    #[test]
    fn nacl_callback_to_non_import_errors() {
        let src = "\
.layout nacl-default
.lib
f: gatecall 0, cb
.app
cb: gateret
main: gatecall 0, f
";
        let p = parse_asm(src).unwrap();
        let t = run(&p, Strategy::NaClHeavy, 100);
        assert!(matches!(t.outcome, Outcome::Error(_)));
    }
}
