use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lang::{Command, Privilege, Program, Reg};
use crate::machine::{MachineState, StepRecord, Trace};

/// A gatecall step and the gateret step that balances it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WbSegment {
    pub call: usize,
    pub ret: usize,
    pub depth: usize,
}

fn match_gates(steps: &[StepRecord]) -> Vec<WbSegment> {
    let mut open: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for (i, r) in steps.iter().enumerate() {
        match r.command {
            Command::GateCall(..) => open.push(i),
            Command::GateRet => {
                if let Some(call) = open.pop() {
                    out.push(WbSegment {
                        call,
                        ret: i,
                        depth: open.len(),
                    });
                }
            }
            _ => {}
        }
    }
    out.sort();
    out
}

pub fn wb_segments(trace: &Trace) -> Vec<WbSegment> {
    match_gates(&trace.steps)
}

/// Live return-address slots pushed by privilege `p` before step `upto`.
pub fn return_address_locs(trace: &Trace, upto: usize, p: Privilege) -> BTreeSet<u64> {
    ral_prefix(&trace.steps[..upto.min(trace.len())], p)
}

fn ral_prefix(steps: &[StepRecord], p: Privilege) -> BTreeSet<u64> {
    let mut locs = BTreeSet::new();
    let mut gates: Vec<(Privilege, u64)> = Vec::new();
    for r in steps {
        match r.command {
            Command::Call(..) if r.privilege == p => {
                locs.insert(r.sp.saturating_add(1));
            }
            Command::Ret(_) if r.privilege == p => {
                locs.remove(&r.sp);
            }
            Command::GateCall(..) => {
                gates.push((r.privilege, r.sp.saturating_add(1)));
                if r.privilege == p {
                    locs.insert(r.sp.saturating_add(1));
                }
            }
            Command::GateRet => {
                if r.privilege == p {
                    locs.remove(&r.sp);
                }
                if let Some((q, slot)) = gates.pop() {
                    if q == p {
                        locs.remove(&slot);
                    }
                }
            }
            _ => {}
        }
    }
    locs
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsrViolation {
    pub segment: WbSegment,
    pub reg: Reg,
    pub before: u64,
    pub after: u64,
}

impl fmt::Display for CsrViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gatecall at step {}: {} was {} before the call and {} after the return",
            self.segment.call, self.reg, self.before, self.after
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaClause {
    Pc { expected: u64, actual: u64 },
    Sp { expected: u64, actual: u64 },
    Slot { addr: u64, before: u64, after: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaViolation {
    pub segment: WbSegment,
    pub clause: RaClause,
}

impl fmt::Display for RaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gatecall at step {}: ", self.segment.call)?;
        match self.clause {
            RaClause::Pc { expected, actual } => write!(f, "returned to pc {actual}, expected {expected}"),
            RaClause::Sp { expected, actual } => write!(f, "sp {actual} after return, expected {expected}"),
            RaClause::Slot { addr, before, after } => {
                write!(f, "return address slot {addr} changed from {before} to {after}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub csr: Vec<CsrViolation>,
    pub ra: Vec<RaViolation>,
}

impl IntegrityReport {
    pub fn passed(&self) -> bool {
        self.csr.is_empty() && self.ra.is_empty()
    }
}

/// Both integrity checks over the trusted-origin segments, in one replay.
pub fn check_integrity(program: &Program, trace: &Trace) -> IntegrityReport {
    let segments: Vec<WbSegment> = wb_segments(trace)
        .into_iter()
        .filter(|s| trace.steps[s.call].privilege == Privilege::Trusted)
        .collect();
    if segments.is_empty() {
        return IntegrityReport::default();
    }
    let wanted: BTreeSet<usize> = segments.iter().flat_map(|s| [s.call, s.ret + 1]).collect();
    let mut states: BTreeMap<usize, MachineState> = BTreeMap::new();
    trace.replay(program, |i, s| {
        if wanted.contains(&i) {
            states.insert(i, s.clone());
        }
    });

    let mut report = IntegrityReport::default();
    for seg in segments {
        let (pre, post) = (&states[&seg.call], &states[&(seg.ret + 1)]);
        for &r in &program.conv.csr {
            let (before, after) = (pre.reg(r), post.reg(r));
            if before != after {
                report.csr.push(CsrViolation {
                    segment: seg,
                    reg: r,
                    before,
                    after,
                });
            }
        }
        if post.pc != pre.pc + 1 {
            report.ra.push(RaViolation {
                segment: seg,
                clause: RaClause::Pc {
                    expected: pre.pc + 1,
                    actual: post.pc,
                },
            });
        }
        if post.sp != pre.sp {
            report.ra.push(RaViolation {
                segment: seg,
                clause: RaClause::Sp {
                    expected: pre.sp,
                    actual: post.sp,
                },
            });
        }
        for addr in return_address_locs(trace, seg.call, Privilege::Trusted) {
            let (before, after) = (pre.read(addr), post.read(addr));
            if before != after {
                report.ra.push(RaViolation {
                    segment: seg,
                    clause: RaClause::Slot { addr, before, after },
                });
            }
        }
    }
    report
}

pub fn check_csr_integrity(program: &Program, trace: &Trace) -> Vec<CsrViolation> {
    check_integrity(program, trace).csr
}

pub fn check_ra_integrity(program: &Program, trace: &Trace) -> Vec<RaViolation> {
    check_integrity(program, trace).ra
}
