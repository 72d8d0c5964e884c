//! Overlay safety monitor: privilege-labeled values, a logical frame stack and
//! the dynamic checks that make zero-cost gates safe.
//!
//! The monitor has its own labeled semantics; [`run_monitored_lockstep`]
//! compares its erasure against [`machine::step`] after every step.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::lang::{CheckKind, Command, Expr, Layout, Privilege, Program, Reg, CONTEXT_SPAN, NUM_GPRS};
use crate::machine::{self, MachineState, Outcome, Step, StepRecord, Trace};
use crate::transitions::Strategy;

use Privilege::{Trusted as T, Untrusted as U};

/// Confidentiality policy applied at every trusted gatecall.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    /// Registers other than `sp`/`pc` are confidential; sandbox memory and
    /// the argument slots are public; remaining application memory is
    /// confidential.
    NaclDefault,
    AllPublic,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::NaclDefault => "nacl-default",
            Policy::AllPublic => "all-public",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nacl-default" => Ok(Policy::NaclDefault),
            "all-public" => Ok(Policy::AllPublic),
            _ => Err(format!("unknown policy `{s}` (expected nacl-default|all-public)")),
        }
    }
}

impl Policy {
    pub fn reg_label(self, r: Reg) -> Privilege {
        match (self, r) {
            (Policy::AllPublic, _) | (_, Reg::Sp | Reg::Pc) => U,
            (Policy::NaclDefault, _) => T,
        }
    }

    /// Label of address `a` for a gatecall issued at stack pointer `sp`
    /// with `n` stack arguments.
    pub fn addr_label(self, layout: &Layout, sp: u64, n: u64, a: u64) -> Privilege {
        if self == Policy::AllPublic {
            return U;
        }
        if a <= sp && a > sp.saturating_sub(n) {
            return U;
        }
        if let Some(c) = layout.ctx {
            if a == c.ctx_star || (c.ctx..c.ctx + CONTEXT_SPAN).contains(&a) {
                return U;
            }
        }
        if layout.in_heap(U, a) {
            return U;
        }
        if layout.in_stack(U, a) {
            // On a shared stack only the free space above the caller is public.
            if !layout.shared_stack || a > sp {
                return U;
            }
        }
        T
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
enum LabelSource {
    Uniform(Privilege),
    Classified { policy: Policy, sp: u64, n: u64 },
}

/// Labels of every memory cell: explicit overrides over a default source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemLabels {
    source: LabelSource,
    overrides: HashMap<u64, Privilege>,
}

impl MemLabels {
    fn uniform(p: Privilege) -> MemLabels {
        MemLabels {
            source: LabelSource::Uniform(p),
            overrides: HashMap::new(),
        }
    }

    pub fn get(&self, layout: &Layout, a: u64) -> Privilege {
        if let Some(p) = self.overrides.get(&a) {
            return *p;
        }
        match self.source {
            LabelSource::Uniform(p) => p,
            LabelSource::Classified { policy, sp, n } => policy.addr_label(layout, sp, n, a),
        }
    }

    fn set(&mut self, a: u64, p: Privilege) {
        self.overrides.insert(a, p);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub base: u64,
    pub ret_addr_loc: u64,
    pub csr_vals: Vec<(Reg, u64)>,
}

/// Return-address slot of the application mega-frame; outside all regions.
pub const SENTINEL_RET_ADDR_LOC: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayState {
    pub machine: MachineState,
    pub reg_labels: [Privilege; NUM_GPRS],
    pub mem_labels: MemLabels,
    /// Logical frames, innermost last.
    pub frames: Vec<Frame>,
}

impl OverlayState {
    pub fn initial(program: &Program) -> OverlayState {
        let machine = MachineState::initial(program);
        let base = machine.sp + 1;
        OverlayState {
            machine,
            reg_labels: [U; NUM_GPRS],
            mem_labels: MemLabels::uniform(U),
            frames: vec![Frame {
                base,
                ret_addr_loc: SENTINEL_RET_ADDR_LOC,
                csr_vals: Vec::new(),
            }],
        }
    }

    pub fn erase(&self) -> &MachineState {
        &self.machine
    }

    pub fn top(&self) -> &Frame {
        self.frames.last().expect("frame stack is never empty")
    }

    pub fn reg(&self, r: Reg) -> (u64, Privilege) {
        match r.gpr() {
            Some(i) => (self.machine.regs[i], self.reg_labels[i]),
            None => (self.machine.reg(r), U),
        }
    }

    fn set_reg(&mut self, r: Reg, v: u64, p: Privilege) {
        self.machine.set_reg(r, v);
        if let Some(i) = r.gpr() {
            self.reg_labels[i] = p;
        }
    }

    pub fn mem_label(&self, program: &Program, a: u64) -> Privilege {
        self.mem_labels.get(&program.layout, a)
    }

    fn write(&mut self, a: u64, v: u64, p: Privilege) {
        self.machine.write(a, v);
        self.mem_labels.set(a, p);
    }

    pub fn eval(&self, e: &Expr) -> (u64, Privilege) {
        match e {
            Expr::Lit(v) => (*v, U),
            Expr::Reg(r) => self.reg(*r),
            Expr::Bin(op, a, b) => {
                let (x, p) = self.eval(a);
                let (y, q) = self.eval(b);
                (op.apply(x, y), p.join(q))
            }
        }
    }

    /// Relabels registers and memory per `policy` at a gatecall with `n`
    /// arguments.
    pub fn classify(&mut self, policy: Policy, n: u64) {
        for (i, l) in self.reg_labels.iter_mut().enumerate() {
            *l = policy.reg_label(Reg::from_gpr(i));
        }
        self.mem_labels = MemLabels {
            source: LabelSource::Classified {
                policy,
                sp: self.machine.sp,
                n,
            },
            overrides: HashMap::new(),
        };
    }

    fn csr_snapshot(&self, program: &Program) -> Vec<(Reg, u64)> {
        program.conv.csr.iter().map(|r| (*r, self.machine.reg(*r))).collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reason {
    WriteOutsideFrame,
    RetAddrMismatch,
    CsrNotRestored,
    CrossFunctionJump,
    TypecheckFailed,
    SecretFlow,
    SecretToLibHeap,
    ArgsNotPublic,
    GuardUndefined,
    RegionViolation,
    PcIncCrossing,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<machine::ErrorKind> for Reason {
    fn from(k: machine::ErrorKind) -> Reason {
        match k {
            machine::ErrorKind::GuardUndefined => Reason::GuardUndefined,
            machine::ErrorKind::RegionViolation => Reason::RegionViolation,
            machine::ErrorKind::PcIncCrossing => Reason::PcIncCrossing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
#[error("{reason} at pc {pc}: {detail}")]
pub struct OverlayError {
    pub reason: Reason,
    pub pc: u64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OStep {
    Next,
    Error(OverlayError),
    Halted,
}

struct Ctx<'a> {
    program: &'a Program,
    pc: u64,
    checked: bool,
}

impl Ctx<'_> {
    fn err(&self, reason: Reason, detail: impl Into<String>) -> OverlayError {
        OverlayError {
            reason,
            pc: self.pc,
            detail: detail.into(),
        }
    }

    fn guard(&self, k: &CheckKind, n: u64) -> Result<u64, OverlayError> {
        k.apply(self.program, n)
            .ok_or_else(|| self.err(Reason::GuardUndefined, format!("{k} undefined at {n}")))
    }

    /// In library code, values steering control or addressing must be public.
    fn public(&self, p: Privilege, what: &str) -> Result<(), OverlayError> {
        if self.checked && p == T {
            Err(self.err(Reason::SecretFlow, format!("{what} depends on a confidential value")))
        } else {
            Ok(())
        }
    }

    fn in_same_func(&self, n: u64, m: u64) -> bool {
        match self.program.func_containing(n) {
            Some(f) => f.contains(m),
            None => true,
        }
    }

    fn writeable(&self, s: &OverlayState, n: u64) -> Result<(), OverlayError> {
        if !self.checked || !self.program.layout.in_any_stack(n) {
            return Ok(());
        }
        let top = s.top();
        if n < top.base {
            Err(self.err(
                Reason::WriteOutsideFrame,
                format!("write to {n} below frame base {}", top.base),
            ))
        } else if n == top.ret_addr_loc {
            Err(self.err(Reason::WriteOutsideFrame, format!("write to return address slot {n}")))
        } else {
            Ok(())
        }
    }

    fn fallthrough(&self, s: &mut OverlayState) -> Result<(), OverlayError> {
        let pc = s.machine.pc;
        if self.checked && !self.in_same_func(pc, pc + 1) {
            return Err(self.err(
                Reason::CrossFunctionJump,
                format!("fallthrough from {pc} leaves the function"),
            ));
        }
        machine::pcinc(self.program, &mut s.machine).map_err(|e| self.err(e.kind.into(), e.detail))
    }

    fn stack_slot(&self, n: u64, what: &str) -> Result<(), OverlayError> {
        if self.program.layout.in_any_stack(n) {
            Ok(())
        } else {
            Err(self.err(Reason::RegionViolation, format!("{what}: {n} not in a stack")))
        }
    }

    /// `typechecks`: the new return-address slot `sp1` sits above `arity`
    /// arguments pushed over the current frame's return-address slot.
    fn typechecks(&self, s: &OverlayState, sp1: u64, arity: u64) -> Result<(), OverlayError> {
        let ral = s.top().ret_addr_loc;
        if ral != SENTINEL_RET_ADDR_LOC && sp1 < ral.saturating_add(arity + 1) {
            return Err(self.err(
                Reason::TypecheckFailed,
                format!("call with return slot {sp1} leaves fewer than {arity} arguments above {ral}"),
            ));
        }
        Ok(())
    }

    fn ret_checks(&self, s: &OverlayState) -> Result<(), OverlayError> {
        let sp = s.machine.sp;
        self.stack_slot(sp, "return")?;
        if !self.checked {
            return Ok(());
        }
        let top = s.top();
        if sp != top.ret_addr_loc {
            return Err(self.err(
                Reason::RetAddrMismatch,
                format!("sp {sp} is not the frame's return address slot"),
            ));
        }
        for (r, v) in &top.csr_vals {
            let now = s.machine.reg(*r);
            if now != *v {
                return Err(self.err(Reason::CsrNotRestored, format!("{r} = {now}, expected {v}")));
            }
        }
        Ok(())
    }
}

/// One monitored step, in place. On error the state is left unspecified.
pub fn ostep(program: &Program, s: &mut OverlayState, policy: Policy) -> OStep {
    let Some((p, cmd)) = program.instr(s.machine.pc) else {
        return OStep::Halted;
    };
    let cx = Ctx {
        program,
        pc: s.machine.pc,
        checked: *p == U,
    };
    match exec(&cx, s, *p, cmd, policy) {
        Ok(()) => OStep::Next,
        Err(e) => OStep::Error(e),
    }
}

fn exec(cx: &Ctx, s: &mut OverlayState, p: Privilege, cmd: &Command, policy: Policy) -> Result<(), OverlayError> {
    let program = cx.program;
    let layout = &program.layout;
    let pc = cx.pc;
    match cmd {
        Command::Pop(r, q) => {
            let sp = s.machine.sp;
            if !layout.stack_owners(sp).any(|o| o.flows_to(*q)) {
                return Err(cx.err(
                    Reason::RegionViolation,
                    format!("pop {q}: sp {sp} not in a permitted stack"),
                ));
            }
            let v = s.machine.read(sp);
            let l = s.mem_label(program, sp);
            s.set_reg(*r, v, l);
            s.machine.sp = sp.saturating_sub(1);
            cx.fallthrough(s)
        }
        Command::Push(q, e) => {
            let (v, l) = s.eval(e);
            let sp1 = s.machine.sp.saturating_add(1);
            if !layout.stack_owners(sp1).any(|o| o.flows_to(*q)) {
                return Err(cx.err(
                    Reason::RegionViolation,
                    format!("push {q}: {sp1} not in a permitted stack"),
                ));
            }
            cx.writeable(s, sp1)?;
            s.write(sp1, v, l);
            s.machine.sp = sp1;
            cx.fallthrough(s)
        }
        Command::Load(r, k, e) => {
            let (a, la) = s.eval(e);
            let n = cx.guard(k, a)?;
            cx.public(la, "load address")?;
            let v = s.machine.read(n);
            let l = s.mem_label(program, n);
            s.set_reg(*r, v, l);
            cx.fallthrough(s)
        }
        Command::Store(k, a, e) => {
            let (a, la) = s.eval(a);
            let (v, lv) = s.eval(e);
            let n = cx.guard(k, a)?;
            cx.public(la, "store address")?;
            cx.writeable(s, n)?;
            if cx.checked && lv == T && layout.in_heap(U, n) {
                return Err(cx.err(
                    Reason::SecretToLibHeap,
                    format!("confidential value stored to library heap at {n}"),
                ));
            }
            s.write(n, v, lv);
            cx.fallthrough(s)
        }
        Command::Mov(r, e) => {
            let (v, l) = s.eval(e);
            if *r == Reg::Sp {
                cx.public(l, "stack pointer")?;
            }
            s.set_reg(*r, v, l);
            cx.fallthrough(s)
        }
        Command::Jmp(k, e) => {
            let (a, l) = s.eval(e);
            let n = cx.guard(k, a)?;
            cx.public(l, "jump target")?;
            if cx.checked && !cx.in_same_func(pc, n) {
                return Err(cx.err(
                    Reason::CrossFunctionJump,
                    format!("jump from {pc} to {n} leaves the function"),
                ));
            }
            s.machine.pc = n;
            Ok(())
        }
        Command::Call(k, e) => {
            let (a, l) = s.eval(e);
            let sp1 = s.machine.sp.saturating_add(1);
            if !cx.checked {
                cx.stack_slot(sp1, "call")?;
                let n = cx.guard(k, a)?;
                s.write(sp1, pc + 1, U);
                s.machine.sp = sp1;
                s.machine.pc = n;
                return Ok(());
            }
            cx.public(l, "call target")?;
            let n = cx.guard(k, a)?;
            let f = program.func_at_entry(n).ok_or_else(|| {
                cx.err(
                    Reason::TypecheckFailed,
                    format!("call target {n} is not a function entry"),
                )
            })?;
            cx.stack_slot(sp1, "call")?;
            cx.typechecks(s, sp1, f.arity)?;
            let frame = Frame {
                base: sp1.saturating_sub(f.arity),
                ret_addr_loc: sp1,
                csr_vals: s.csr_snapshot(program),
            };
            s.write(sp1, pc + 1, U);
            s.machine.sp = sp1;
            s.machine.pc = n;
            s.frames.push(frame);
            Ok(())
        }
        Command::Ret(k) => {
            cx.ret_checks(s)?;
            let sp = s.machine.sp;
            let n = cx.guard(k, s.machine.read(sp))?;
            if cx.checked {
                s.frames.pop();
            }
            s.machine.sp = sp.saturating_sub(1);
            s.machine.pc = n;
            Ok(())
        }
        Command::GateCall(n, e) => {
            if p == T {
                s.classify(policy, *n);
            }
            let (t, _) = s.eval(e);
            let sp1 = s.machine.sp.saturating_add(1);
            if p == U {
                if !(program.imports.contains(&t) && program.privilege_at(t) == Some(T)) {
                    return Err(cx.err(Reason::TypecheckFailed, format!("gatecall target {t} is not an import")));
                }
                cx.stack_slot(sp1, "gatecall")?;
                cx.typechecks(s, sp1, *n)?;
                for i in 1..=*n {
                    let a = sp1 - i;
                    if s.mem_label(program, a) == T {
                        return Err(cx.err(Reason::ArgsNotPublic, format!("argument slot {a} is confidential")));
                    }
                }
            } else {
                cx.stack_slot(sp1, "gatecall")?;
                if program.privilege_at(t) != Some(U) {
                    return Err(cx.err(Reason::GuardUndefined, format!("gatecall target {t} not in U code")));
                }
            }
            let arity = program.func_at_entry(t).map_or(*n, |f| f.arity);
            let frame = Frame {
                base: sp1.saturating_sub(arity),
                ret_addr_loc: sp1,
                csr_vals: s.csr_snapshot(program),
            };
            s.write(sp1, pc + 1, U);
            s.machine.sp = sp1;
            s.machine.pc = t;
            s.frames.push(frame);
            Ok(())
        }
        Command::GateRet => {
            cx.ret_checks(s)?;
            if cx.checked && s.reg(program.conv.ret).1 == T {
                return Err(cx.err(
                    Reason::SecretFlow,
                    format!("return register {} is confidential", program.conv.ret),
                ));
            }
            let sp = s.machine.sp;
            let ra = s.machine.read(sp);
            if program.privilege_at(ra) == Some(p) {
                return Err(cx.err(
                    Reason::GuardUndefined,
                    format!("gateret: return address {ra} is in {p} code"),
                ));
            }
            if s.frames.len() > 1 {
                s.frames.pop();
            }
            s.machine.sp = sp.saturating_sub(1);
            s.machine.pc = ra;
            Ok(())
        }
        Command::MovLabel(r, to) => {
            let (v, from) = s.reg(*r);
            if cx.checked && !from.flows_to(*to) {
                return Err(cx.err(Reason::SecretFlow, format!("library declassifies {r}")));
            }
            s.set_reg(*r, v, *to);
            cx.fallthrough(s)
        }
        Command::StoreLabel(to, e) => {
            let (n, la) = s.eval(e);
            cx.public(la, "storelabel address")?;
            let from = s.mem_label(program, n);
            if cx.checked && !from.flows_to(*to) {
                return Err(cx.err(Reason::SecretFlow, format!("library declassifies cell {n}")));
            }
            s.mem_labels.set(n, *to);
            cx.fallthrough(s)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MonitorOutcome {
    Halted,
    Error(OverlayError),
    FuelExhausted,
}

impl fmt::Display for MonitorOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MonitorOutcome::Halted => f.write_str("halted"),
            MonitorOutcome::Error(e) => write!(f, "overlay error: {e}"),
            MonitorOutcome::FuelExhausted => f.write_str("fuel exhausted"),
        }
    }
}

/// Top frame before a step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub depth: usize,
    pub base: u64,
    pub ret_addr_loc: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoredTrace {
    pub initial: MachineState,
    pub steps: Vec<StepRecord>,
    pub frames: Vec<FrameSummary>,
    pub outcome: MonitorOutcome,
    pub last: OverlayState,
}

impl MonitoredTrace {
    pub fn is_error(&self) -> bool {
        matches!(self.outcome, MonitorOutcome::Error(_))
    }

    pub fn error(&self) -> Option<&OverlayError> {
        match &self.outcome {
            MonitorOutcome::Error(e) => Some(e),
            _ => None,
        }
    }

    /// The concrete zero-cost trace of the executed steps. When the monitor
    /// stopped with an error, the outcome is what the concrete machine would
    /// do next.
    pub fn erased(&self, program: &Program) -> Trace {
        let outcome = match &self.outcome {
            MonitorOutcome::Halted => Outcome::Halted,
            MonitorOutcome::FuelExhausted => Outcome::FuelExhausted,
            MonitorOutcome::Error(_) => match machine::step(program, &self.last.machine, Strategy::ZeroCost) {
                Step::Error(e) => Outcome::Error(e),
                Step::Halted => Outcome::Halted,
                Step::Next(..) => Outcome::FuelExhausted,
            },
        };
        Trace {
            strategy: Strategy::ZeroCost,
            initial: self.initial.clone(),
            steps: self.steps.clone(),
            outcome,
            last: self.last.machine.clone(),
        }
    }
}

/// A disagreement between the monitor's erasure and the concrete machine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("refinement mismatch at step {step} (pc {pc}): {detail}")]
pub struct RefinementMismatch {
    pub step: usize,
    pub pc: u64,
    pub detail: String,
}

pub fn run_monitored(program: &Program, policy: Policy, fuel: u64) -> MonitoredTrace {
    run_inner(program, policy, fuel, false).0
}

/// Runs the monitor and the concrete machine side by side, reporting the
/// first step where the erasure of a successful monitored step differs from
/// the machine step, or where application code behaves differently.
pub fn run_monitored_lockstep(
    program: &Program,
    policy: Policy,
    fuel: u64,
) -> (MonitoredTrace, Option<RefinementMismatch>) {
    run_inner(program, policy, fuel, true)
}

fn run_inner(
    program: &Program,
    policy: Policy,
    fuel: u64,
    lockstep: bool,
) -> (MonitoredTrace, Option<RefinementMismatch>) {
    let mut s = OverlayState::initial(program);
    let initial = s.machine.clone();
    let mut steps = Vec::new();
    let mut frames = Vec::new();
    let mut outcome = MonitorOutcome::FuelExhausted;
    let mut mismatch = None;
    for i in 0..fuel {
        let Some((p, cmd)) = program.instr(s.machine.pc) else {
            outcome = MonitorOutcome::Halted;
            break;
        };
        let (p, cmd) = (*p, cmd.clone());
        let pre = s.machine.clone();
        let top = s.top();
        let summary = FrameSummary {
            depth: s.frames.len() - 1,
            base: top.base,
            ret_addr_loc: (top.ret_addr_loc != SENTINEL_RET_ADDR_LOC).then_some(top.ret_addr_loc),
        };
        let result = ostep(program, &mut s, policy);
        if lockstep && mismatch.is_none() {
            let concrete = machine::step(program, &pre, Strategy::ZeroCost);
            let detail = match (&result, &concrete) {
                (OStep::Next, Step::Next(m, _)) if *m != s.machine => Some(format!("erasure differs after `{cmd}`")),
                (OStep::Next, Step::Error(e)) => Some(format!("monitor stepped but machine failed: {e}")),
                (OStep::Error(e), Step::Next(..)) if p == T => Some(format!("monitor failed in application code: {e}")),
                (OStep::Error(e), Step::Next(..)) if Reason::is_concrete(e.reason) => {
                    Some(format!("monitor reported a concrete error the machine does not: {e}"))
                }
                _ => None,
            };
            mismatch = detail.map(|detail| RefinementMismatch {
                step: i as usize,
                pc: pre.pc,
                detail,
            });
        }
        match result {
            OStep::Next => {
                steps.push(StepRecord {
                    pc: pre.pc,
                    sp: pre.sp,
                    privilege: p,
                    command: cmd,
                    micro_ops: 1,
                });
                frames.push(summary);
            }
            OStep::Error(e) => {
                s.machine = pre;
                outcome = MonitorOutcome::Error(e);
                break;
            }
            OStep::Halted => unreachable!(),
        }
    }
    if outcome == MonitorOutcome::FuelExhausted && program.instr(s.machine.pc).is_none() {
        outcome = MonitorOutcome::Halted;
    }
    (
        MonitoredTrace {
            initial,
            steps,
            frames,
            outcome,
            last: s,
        },
        mismatch,
    )
}

impl Reason {
    /// Whether the reason mirrors a concrete machine error.
    pub fn is_concrete(self) -> bool {
        matches!(
            self,
            Reason::GuardUndefined | Reason::RegionViolation | Reason::PcIncCrossing
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_asm;

    fn monitor(src: &str) -> MonitoredTrace {
        let p = parse_asm(src).unwrap();
        let (t, mm) = run_monitored_lockstep(&p, Policy::NaclDefault, 1000);
        assert_eq!(mm, None);
        t
    }

    fn reason(t: &MonitoredTrace) -> Option<Reason> {
        t.error().map(|e| e.reason)
    }

    #[test]
    fn nacl_default_labels() {
        let l = Layout::nacl_default();
        let pol = Policy::NaclDefault;
        assert_eq!(pol.reg_label(Reg::Sp), U);
        assert_eq!(pol.reg_label(Reg::R0), T);
        assert_eq!(pol.addr_label(&l, 130, 2, 129), U);
        assert_eq!(pol.addr_label(&l, 130, 2, 130), U);
        assert_eq!(pol.addr_label(&l, 130, 2, 128), T);
        assert_eq!(pol.addr_label(&l, 130, 2, 300), U);
        assert_eq!(pol.addr_label(&l, 130, 2, 400), U);
        assert_eq!(pol.addr_label(&l, 130, 2, 100), T);
        assert_eq!(Policy::AllPublic.addr_label(&l, 130, 2, 100), U);
    }

    #[test]
    fn benign_add_library_halts() {
        let t = monitor(
            ".lib\n.func add arity=2 exported\nload r0, id(sp - 1)\nload r1, id(sp - 2)\nmov r0, r0 + r1\ngateret\n.endfunc\n\
             .app\nmain: push T, 1\npush T, 2\ngatecall 2, add\nmov sp, sp - 2\npush T, 5\npush T, 6\ngatecall 2, add\nmov sp, sp - 2\nstore heap.T(0), r0\n",
        );
        assert_eq!(t.outcome, MonitorOutcome::Halted);
        assert_eq!(t.last.machine.read(0), 11);
    }

    #[test]
    fn store_below_frame() {
        let t = monitor(
            ".lib\n.func h arity=0\nstore id(sp - 1), 666\nret code.U\n.endfunc\n\
             .func f arity=0 exported\npush U, r4\ncall code.U(h)\npop r4, U\nmov r0, 0\ngateret\n.endfunc\n\
             .app\nmain: gatecall 0, f\n",
        );
        assert_eq!(reason(&t), Some(Reason::WriteOutsideFrame));
    }

    #[test]
    fn csr_clobber() {
        let t = monitor(".lib\n.func f arity=0 exported\nmov r4, 666\nmov r0, 0\ngateret\n.endfunc\n.app\nmain: mov r4, 42\ngatecall 0, f\n");
        assert_eq!(reason(&t), Some(Reason::CsrNotRestored));
    }

    #[test]
    fn missing_epilogue() {
        let t = monitor(
            ".lib\n.func f arity=0 exported\npush U, 1\nmov r0, 0\ngateret\n.endfunc\n.app\nmain: gatecall 0, f\n",
        );
        assert_eq!(reason(&t), Some(Reason::RetAddrMismatch));
    }

    #[test]
    fn cross_function_jump() {
        let t = monitor(
            ".lib\n.func g arity=0\nmov r0, 0\nret code.U\n.endfunc\n.func f arity=0 exported\njmp code.U(g + 1)\n.endfunc\n.app\nmain: gatecall 0, f\n",
        );
        assert_eq!(reason(&t), Some(Reason::CrossFunctionJump));
    }

    #[test]
    fn scratch_to_library_heap() {
        let t = monitor(".lib\n.func f arity=0 exported\nstore heap.U(300), r1\nmov r0, 0\ngateret\n.endfunc\n.app\nmain: gatecall 0, f\n");
        assert_eq!(reason(&t), Some(Reason::SecretToLibHeap));
    }

    #[test]
    fn secret_return_value() {
        let t = monitor(".lib\n.func f arity=0 exported\ngateret\n.endfunc\n.app\nmain: gatecall 0, f\n");
        assert_eq!(reason(&t), Some(Reason::SecretFlow));
    }

    #[test]
    fn callback_args_must_be_public() {
        let src = ".imports cb\n.lib\n.func f arity=0 exported\npush U, r1\ngatecall 1, cb\nmov sp, sp - 1\nmov r0, 0\ngateret\n.endfunc\n\
                   .app\ncb: mov r0, 1\ngateret\nmain: gatecall 0, f\n";
        assert_eq!(reason(&monitor(src)), Some(Reason::ArgsNotPublic));
        let ok = src.replace("push U, r1", "push U, 3");
        assert_eq!(monitor(&ok).outcome, MonitorOutcome::Halted);
    }

    #[test]
    fn library_call_needs_arguments() {
        let t = monitor(
            ".lib\n.func g arity=1\nload r0, id(sp - 1)\nret code.U\n.endfunc\n.func f arity=0 exported\ncall code.U(g)\nmov r0, 0\ngateret\n.endfunc\n.app\nmain: gatecall 0, f\n",
        );
        assert_eq!(reason(&t), Some(Reason::TypecheckFailed));
    }
}
