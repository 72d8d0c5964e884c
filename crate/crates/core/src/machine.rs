//! Concrete small-step semantics, traces and the run loop.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lang::{CheckKind, Command, Expr, Privilege, Program, Reg, NUM_GPRS};
use crate::transitions::Strategy;

/// Concrete machine state. Memory is sparse; absent cells read as zero and
/// zero writes remove the entry so that equal states compare equal.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MachineState {
    pub pc: u64,
    pub sp: u64,
    pub regs: [u64; NUM_GPRS],
    pub mem: BTreeMap<u64, u64>,
}

impl MachineState {
    pub fn initial(program: &Program) -> MachineState {
        MachineState {
            pc: program.entry,
            sp: program.layout.sp0,
            regs: [0; NUM_GPRS],
            mem: program.initial_memory(),
        }
    }

    pub fn reg(&self, r: Reg) -> u64 {
        match r {
            Reg::Sp => self.sp,
            Reg::Pc => self.pc,
            r => self.regs[r as usize],
        }
    }

    pub fn set_reg(&mut self, r: Reg, v: u64) {
        match r {
            Reg::Sp => self.sp = v,
            Reg::Pc => self.pc = v,
            r => self.regs[r as usize] = v,
        }
    }

    pub fn read(&self, addr: u64) -> u64 {
        self.mem.get(&addr).copied().unwrap_or(0)
    }

    pub fn write(&mut self, addr: u64, v: u64) {
        if v == 0 {
            self.mem.remove(&addr);
        } else {
            self.mem.insert(addr, v);
        }
    }
}

pub fn eval_expr(state: &MachineState, e: &Expr) -> u64 {
    match e {
        Expr::Lit(v) => *v,
        Expr::Reg(r) => state.reg(*r),
        Expr::Bin(op, a, b) => op.apply(eval_expr(state, a), eval_expr(state, b)),
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    GuardUndefined,
    RegionViolation,
    PcIncCrossing,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::GuardUndefined => "GuardUndefined",
            ErrorKind::RegionViolation => "RegionViolation",
            ErrorKind::PcIncCrossing => "PcIncCrossing",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
#[error("{kind} at pc {pc}: {detail}")]
pub struct MachineError {
    pub kind: ErrorKind,
    pub pc: u64,
    pub detail: String,
}

impl MachineError {
    pub fn new(kind: ErrorKind, pc: u64, detail: impl Into<String>) -> MachineError {
        MachineError {
            kind,
            pc,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    /// Successor state and the number of micro-operations executed.
    Next(MachineState, u32),
    Error(MachineError),
    Halted,
}

/// Applies guard `k` at `n`, producing a `GuardUndefined` error on failure.
pub fn guard(program: &Program, pc: u64, k: &CheckKind, n: u64) -> Result<u64, MachineError> {
    k.apply(program, n)
        .ok_or_else(|| MachineError::new(ErrorKind::GuardUndefined, pc, format!("{k} undefined at {n}")))
}

/// Falls through to `pc + 1`, rejecting a privilege change.
pub fn pcinc(program: &Program, s: &mut MachineState) -> Result<(), MachineError> {
    let here = program.privilege_at(s.pc);
    match program.privilege_at(s.pc + 1) {
        Some(next) if Some(next) != here => Err(MachineError::new(
            ErrorKind::PcIncCrossing,
            s.pc,
            format!(
                "fallthrough from {} into {} code",
                here.map_or("no", Privilege::letter),
                next
            ),
        )),
        _ => {
            s.pc += 1;
            Ok(())
        }
    }
}

/// Whether `n` lies in the stack of some privilege `p_s ⊑ p`.
fn in_stack_below(program: &Program, p: Privilege, n: u64) -> bool {
    program.layout.stack_owners(n).any(|ps| ps.flows_to(p))
}

fn region_error(pc: u64, detail: String) -> MachineError {
    MachineError::new(ErrorKind::RegionViolation, pc, detail)
}

pub fn step(program: &Program, state: &MachineState, strategy: Strategy) -> Step {
    let Some((p, cmd)) = program.instr(state.pc) else {
        return Step::Halted;
    };
    let result = match cmd {
        Command::GateCall(n, e) => strategy.gatecall(program, state, *p, *n, e),
        Command::GateRet => strategy.gateret(program, state, *p),
        _ => exec(program, state, cmd).map(|s| (s, 1)),
    };
    match result {
        Ok((s, ops)) => Step::Next(s, ops),
        Err(e) => Step::Error(e),
    }
}

/// Executes a non-gate command.
fn exec(program: &Program, state: &MachineState, cmd: &Command) -> Result<MachineState, MachineError> {
    let pc = state.pc;
    let layout = &program.layout;
    let mut s = state.clone();
    match cmd {
        Command::Pop(r, p) => {
            if !in_stack_below(program, *p, s.sp) {
                return Err(region_error(
                    pc,
                    format!("pop {p}: sp {} not in a permitted stack", s.sp),
                ));
            }
            let v = s.read(s.sp);
            s.set_reg(*r, v);
            s.sp = s.sp.saturating_sub(1);
            pcinc(program, &mut s)?;
        }
        Command::Push(p, e) => {
            let v = eval_expr(&s, e);
            let sp1 = s.sp.saturating_add(1);
            if !in_stack_below(program, *p, sp1) {
                return Err(region_error(pc, format!("push {p}: {sp1} not in a permitted stack")));
            }
            s.write(sp1, v);
            s.sp = sp1;
            pcinc(program, &mut s)?;
        }
        Command::Load(r, k, e) => {
            let n = guard(program, pc, k, eval_expr(&s, e))?;
            let v = s.read(n);
            s.set_reg(*r, v);
            pcinc(program, &mut s)?;
        }
        Command::Store(k, a, e) => {
            let n = guard(program, pc, k, eval_expr(&s, a))?;
            let v = eval_expr(&s, e);
            s.write(n, v);
            pcinc(program, &mut s)?;
        }
        Command::Mov(r, e) => {
            let v = eval_expr(&s, e);
            s.set_reg(*r, v);
            pcinc(program, &mut s)?;
        }
        Command::Call(k, e) => {
            let sp1 = s.sp.saturating_add(1);
            if !layout.in_any_stack(sp1) {
                return Err(region_error(pc, format!("call: {sp1} not in a stack")));
            }
            let target = guard(program, pc, k, eval_expr(&s, e))?;
            s.write(sp1, pc + 1);
            s.sp = sp1;
            s.pc = target;
        }
        Command::Ret(k) => {
            if !layout.in_any_stack(s.sp) {
                return Err(region_error(pc, format!("ret: sp {} not in a stack", s.sp)));
            }
            let target = guard(program, pc, k, s.read(s.sp))?;
            s.sp = s.sp.saturating_sub(1);
            s.pc = target;
        }
        Command::Jmp(k, e) => {
            s.pc = guard(program, pc, k, eval_expr(&s, e))?;
        }
        Command::MovLabel(..) | Command::StoreLabel(..) => {
            pcinc(program, &mut s)?;
        }
        Command::GateCall(..) | Command::GateRet => unreachable!("gates are handled by the strategy"),
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pc: u64,
    pub sp: u64,
    pub privilege: Privilege,
    pub command: Command,
    pub micro_ops: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Halted,
    Error(MachineError),
    FuelExhausted,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Halted => f.write_str("halted"),
            Outcome::Error(e) => write!(f, "error: {e}"),
            Outcome::FuelExhausted => f.write_str("fuel exhausted"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub strategy: Strategy,
    pub initial: MachineState,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    /// State after the last successful step.
    pub last: MachineState,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Calls `f(i, state)` with the state before step `i`, for every
    /// `i in 0..=len()`; the final call sees the state after the last step.
    pub fn replay(&self, program: &Program, mut f: impl FnMut(usize, &MachineState)) {
        let mut s = self.initial.clone();
        f(0, &s);
        for i in 0..self.steps.len() {
            match step(program, &s, self.strategy) {
                Step::Next(next, _) => s = next,
                other => panic!("trace replay diverged at step {i}: {other:?}"),
            }
            f(i + 1, &s);
        }
    }

    /// Reconstructs the state before step `i`.
    pub fn state_at(&self, program: &Program, i: usize) -> MachineState {
        let mut s = self.initial.clone();
        for _ in 0..i.min(self.steps.len()) {
            match step(program, &s, self.strategy) {
                Step::Next(next, _) => s = next,
                other => panic!("trace replay diverged: {other:?}"),
            }
        }
        s
    }

    pub fn micro_ops(&self) -> u64 {
        self.steps.iter().map(|r| u64::from(r.micro_ops)).sum()
    }
}

pub fn run(program: &Program, strategy: Strategy, fuel: u64) -> Trace {
    run_from(program, MachineState::initial(program), strategy, fuel)
}

pub fn run_from(program: &Program, initial: MachineState, strategy: Strategy, fuel: u64) -> Trace {
    let mut s = initial.clone();
    let mut steps = Vec::new();
    let mut outcome = Outcome::FuelExhausted;
    for _ in 0..fuel {
        let (privilege, command) = match program.instr(s.pc) {
            Some((p, c)) => (*p, c.clone()),
            None => {
                outcome = Outcome::Halted;
                break;
            }
        };
        match step(program, &s, strategy) {
            Step::Next(next, micro_ops) => {
                steps.push(StepRecord {
                    pc: s.pc,
                    sp: s.sp,
                    privilege,
                    command,
                    micro_ops,
                });
                s = next;
            }
            Step::Error(e) => {
                outcome = Outcome::Error(e);
                break;
            }
            Step::Halted => unreachable!(),
        }
    }
    if outcome == Outcome::FuelExhausted && program.instr(s.pc).is_none() {
        outcome = Outcome::Halted;
    }
    Trace {
        strategy,
        initial,
        steps,
        outcome,
        last: s,
    }
}
