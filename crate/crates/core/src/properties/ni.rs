use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lang::{Command, Privilege, Program, Reg};
use crate::machine::{self, MachineState, Step};
use crate::monitor::Policy;
use crate::transitions::Strategy;

/// Confidential values are redrawn below this bound.
const SECRET_RANGE: u64 = 1 << 32;

/// Labels a state at a trusted gatecall with `n` arguments.
fn is_public_addr(program: &Program, policy: Policy, s: &MachineState, n: u64, a: u64) -> bool {
    policy.addr_label(&program.layout, s.sp, n, a) == Privilege::Untrusted
}

fn gatecall_arity(program: &Program, s: &MachineState) -> Option<u64> {
    match program.instr(s.pc) {
        Some((Privilege::Trusted, Command::GateCall(n, _))) => Some(*n),
        _ => None,
    }
}

/// A state that agrees with `s` on everything `policy` labels public and
/// holds fresh pseudorandom values elsewhere.
pub fn low_equiv_mutate(program: &Program, s: &MachineState, policy: Policy, seed: u64) -> MachineState {
    let n = gatecall_arity(program, s).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    for i in 0..out.regs.len() {
        if policy.reg_label(Reg::from_gpr(i)) == Privilege::Trusted {
            out.regs[i] = rng.random_range(0..SECRET_RANGE);
        }
    }
    for a in 0..program.layout.max_addr() {
        if !is_public_addr(program, policy, s, n, a) {
            out.write(a, rng.random_range(0..SECRET_RANGE));
        }
    }
    out
}

/// `a =C b`: same pc, sp and command, equal on every public register and cell.
pub fn low_equivalent(program: &Program, policy: Policy, a: &MachineState, b: &MachineState) -> bool {
    if a.pc != b.pc || a.sp != b.sp {
        return false;
    }
    let n = gatecall_arity(program, a).unwrap_or(0);
    let regs_agree =
        (0..a.regs.len()).all(|i| policy.reg_label(Reg::from_gpr(i)) == Privilege::Trusted || a.regs[i] == b.regs[i]);
    regs_agree
        && (0..program.layout.max_addr()).all(|x| !is_public_addr(program, policy, a, n, x) || a.read(x) == b.read(x))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Divergence {
    StepCount { left: u64, right: u64 },
    Pc { left: Option<u64>, right: Option<u64> },
    LibHeap { addr: u64, left: u64, right: u64 },
    ArgSlot { addr: u64, left: u64, right: u64 },
    ReturnRegister { left: u64, right: u64 },
}

impl Divergence {
    pub fn kind(&self) -> &'static str {
        match self {
            Divergence::StepCount { .. } => "step-count",
            Divergence::Pc { .. } => "pc",
            Divergence::LibHeap { .. } => "lib-heap",
            Divergence::ArgSlot { .. } => "argument-slot",
            Divergence::ReturnRegister { .. } => "return-register",
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<u64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        match self {
            Divergence::StepCount { left, right } => write!(f, "step-count {left} vs {right}"),
            Divergence::Pc { left, right } => write!(f, "pc {} vs {}", show(left), show(right)),
            Divergence::LibHeap { addr, left, right } => write!(f, "lib-heap cell {addr}: {left} vs {right}"),
            Divergence::ArgSlot { addr, left, right } => write!(f, "argument slot {addr}: {left} vs {right}"),
            Divergence::ReturnRegister { left, right } => write!(f, "return register {left} vs {right}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NiVerdict {
    Pass { gatecalls: usize },
    Fail { step: usize, divergence: Divergence },
}

impl NiVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, NiVerdict::Pass { .. })
    }
}

impl fmt::Display for NiVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NiVerdict::Pass { gatecalls } => write!(f, "pass ({gatecalls} gatecalls)"),
            NiVerdict::Fail { step, divergence } => write!(f, "fail at gatecall step {step}: {divergence}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum NiError {
    #[error("no trusted gatecall reached within fuel")]
    NoGatecall,
}

/// How a library excursion ended.
enum Exit {
    /// Out of library code after the given command.
    Trusted(MachineState, Command),
    Stuck,
}

/// Steps from a trusted gatecall until control leaves library code.
/// Every gate counts as one step.
fn excursion(program: &Program, start: &MachineState, strategy: Strategy, fuel: u64) -> (u64, Exit) {
    let mut s = start.clone();
    let mut steps = 0;
    while steps < fuel {
        let Some((_, cmd)) = program.instr(s.pc) else {
            return (steps, Exit::Stuck);
        };
        let cmd = cmd.clone();
        match machine::step(program, &s, strategy) {
            Step::Next(next, _) => {
                s = next;
                steps += 1;
            }
            _ => return (steps, Exit::Stuck),
        }
        if program.privilege_at(s.pc) != Some(Privilege::Untrusted) {
            return (steps, Exit::Trusted(s, cmd));
        }
    }
    (steps, Exit::Stuck)
}

fn compare_exits(program: &Program, left: &Exit, right: &Exit) -> Option<Divergence> {
    let (Exit::Trusted(a, ca), Exit::Trusted(b, _)) = (left, right) else {
        return match (left, right) {
            (Exit::Stuck, Exit::Stuck) => None,
            _ => Some(Divergence::Pc {
                left: pc_of(left),
                right: pc_of(right),
            }),
        };
    };
    if a.pc != b.pc {
        return Some(Divergence::Pc {
            left: Some(a.pc),
            right: Some(b.pc),
        });
    }
    let heap = program.layout.h_u;
    if let Some(addr) = heap.addrs().find(|x| a.read(*x) != b.read(*x)) {
        return Some(Divergence::LibHeap {
            addr,
            left: a.read(addr),
            right: b.read(addr),
        });
    }
    match ca {
        Command::GateCall(m, _) => {
            if a.sp != b.sp {
                return Some(Divergence::Pc {
                    left: Some(a.pc),
                    right: Some(b.pc),
                });
            }
            // Arguments sit below the return-address slot at sp.
            (1..=*m).map(|i| a.sp.saturating_sub(i)).find_map(|addr| {
                (a.read(addr) != b.read(addr)).then(|| Divergence::ArgSlot {
                    addr,
                    left: a.read(addr),
                    right: b.read(addr),
                })
            })
        }
        _ => {
            let r = program.conv.ret;
            (a.reg(r) != b.reg(r)).then(|| Divergence::ReturnRegister {
                left: a.reg(r),
                right: b.reg(r),
            })
        }
    }
}

fn pc_of(e: &Exit) -> Option<u64> {
    match e {
        Exit::Trusted(s, _) => Some(s.pc),
        Exit::Stuck => None,
    }
}

/// Runs to each trusted gatecall, forks a low-equivalent twin and compares
/// the two library excursions.
pub fn check_strong_ni(
    program: &Program,
    policy: Policy,
    strategy: Strategy,
    seed: u64,
    fuel: u64,
) -> Result<NiVerdict, NiError> {
    let trace = machine::run(program, strategy, fuel);
    let mut forks = Vec::new();
    trace.replay(program, |i, s| {
        if i < trace.len() && gatecall_arity(program, s).is_some() {
            forks.push((i, s.clone()));
        }
    });
    if forks.is_empty() {
        return Err(NiError::NoGatecall);
    }
    for (k, (i, s)) in forks.iter().enumerate() {
        let twin = low_equiv_mutate(program, s, policy, seed.wrapping_add(k as u64));
        let (nl, left) = excursion(program, s, strategy, fuel);
        let (nr, right) = excursion(program, &twin, strategy, fuel);
        let divergence = if nl != nr {
            Some(Divergence::StepCount { left: nl, right: nr })
        } else {
            compare_exits(program, &left, &right)
        };
        if let Some(divergence) = divergence {
            return Ok(NiVerdict::Fail { step: *i, divergence });
        }
    }
    Ok(NiVerdict::Pass { gatecalls: forks.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_asm;

    const ADD: &str = "\
.lib
.func add arity=2 exported
  load r0, id(sp - 1)
  load r1, id(sp - 2)
  mov r0, r0 + r1
  gateret
.endfunc
.app
main:
  mov r5, 99
  push T, 3
  push T, 4
  gatecall 2, add
  mov sp, sp - 2
";

    #[test]
    fn mutation_is_low_equivalent() {
        let p = parse_asm(ADD).unwrap();
        let t = machine::run(&p, Strategy::ZeroCost, 100);
        let at = t.state_at(&p, 3);
        for seed in [1, 2] {
            let m = low_equiv_mutate(&p, &at, Policy::NaclDefault, seed);
            assert!(low_equivalent(&p, Policy::NaclDefault, &at, &m));
            assert_ne!(m.reg(Reg::R5), 99);
            // Only trusted heap cells and registers change.
            for a in 0..p.layout.max_addr() {
                if at.read(a) != m.read(a) {
                    assert!(p.layout.in_heap(Privilege::Trusted, a) || a <= at.sp - 2, "{a}");
                }
            }
        }
    }

    #[test]
    fn benign_library_passes() {
        let zero = parse_asm(ADD).unwrap();
        let nacl = parse_asm(&format!(".layout nacl-default\n{}", ADD.replace("id(", "mem.U("))).unwrap();
        for (p, strategy) in [(zero, Strategy::ZeroCost), (nacl, Strategy::NaClHeavy)] {
            let v = check_strong_ni(&p, Policy::NaclDefault, strategy, 5, 1000).unwrap();
            assert_eq!(v, NiVerdict::Pass { gatecalls: 1 });
        }
    }

    #[test]
    fn leaking_scratch_register_fails() {
        let src = ".lib\n.func f arity=0 exported\nstore heap.U(300), r2\nmov r0, 0\ngateret\n.endfunc\n.app\nmain: gatecall 0, f\n";
        let p = parse_asm(src).unwrap();
        let v = check_strong_ni(&p, Policy::NaclDefault, Strategy::ZeroCost, 5, 1000).unwrap();
        assert!(matches!(
            v,
            NiVerdict::Fail {
                divergence: Divergence::LibHeap { addr: 300, .. },
                ..
            }
        ));
        let v = check_strong_ni(&p, Policy::AllPublic, Strategy::ZeroCost, 5, 1000).unwrap();
        assert!(v.passed());
    }

    #[test]
    fn no_gatecall_is_an_error() {
        let p = parse_asm(".app\nmain: mov r1, 1\n").unwrap();
        assert_eq!(
            check_strong_ni(&p, Policy::NaclDefault, Strategy::ZeroCost, 0, 10),
            Err(NiError::NoGatecall)
        );
    }
}
