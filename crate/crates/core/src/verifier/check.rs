use std::collections::{BTreeMap, BTreeSet};

use super::cfg::Cfg;
use super::domain::{after_call, transfer, AbsFrame, AbsVal, SpOffset, ValueSet};
use super::{Check, VerifierConfig, VerifierViolation};
use crate::lang::{CheckKind, Command, Expr, FuncMeta, Privilege, Program, Reg};

/// Entry addresses a library `call` may reach, or why they cannot be
/// determined.
fn call_targets(program: &Program, k: &CheckKind, e: &Expr) -> Result<Vec<u64>, String> {
    if !matches!(k, CheckKind::Code(Privilege::Untrusted) | CheckKind::Table(_)) {
        return Err(format!("call guard {k} does not resolve to library functions"));
    }
    let ValueSet::Finite(vs) = ValueSet::of(e) else {
        return Err(format!("call target `{e}` is not statically known"));
    };
    vs.into_iter()
        .map(|v| {
            k.apply(program, v)
                .ok_or_else(|| format!("call target {v} is undefined under {k}"))
        })
        .collect()
}

/// Largest callee arity over the resolvable targets of a call.
fn call_arity(program: &Program, k: &CheckKind, e: &Expr) -> u64 {
    call_targets(program, k, e)
        .unwrap_or_default()
        .iter()
        .filter_map(|t| program.func_at_entry(*t))
        .map(|f| f.arity)
        .max()
        .unwrap_or(0)
}

fn post(program: &Program, frame: &AbsFrame, cmd: &Command, cfg: &VerifierConfig) -> AbsFrame {
    match cmd {
        Command::Call(k, e) => after_call(frame, call_arity(program, k, e), &program.conv),
        Command::GateCall(n, _) => after_call(frame, *n, &program.conv),
        _ => transfer(frame, cmd, cfg.frame_limit),
    }
}

/// Fixpoint of the transfer functions over the CFG. Returns the fact holding
/// before each reachable instruction.
pub fn analyze_function(
    program: &Program,
    func: &FuncMeta,
    graph: &Cfg,
    cfg: &VerifierConfig,
) -> BTreeMap<u64, AbsFrame> {
    let mut facts: BTreeMap<u64, AbsFrame> = BTreeMap::new();
    facts.insert(func.entry, AbsFrame::entry(func.arity, &program.conv));
    let mut work = BTreeSet::from([func.entry]);
    while let Some(pc) = work.pop_first() {
        let Some((_, cmd)) = program.instr(pc) else {
            continue;
        };
        let out = post(program, &facts[&pc], cmd, cfg);
        for &s in graph.succs.get(&pc).into_iter().flatten() {
            let merged = match facts.get(&s) {
                Some(old) => old.meet(&out),
                None => out.clone(),
            };
            if facts.get(&s) != Some(&merged) {
                facts.insert(s, merged);
                work.insert(s);
            }
        }
    }
    facts
}

struct Emitter<'a> {
    out: Vec<VerifierViolation>,
    frame: &'a AbsFrame,
    pc: u64,
}

impl Emitter<'_> {
    fn emit(&mut self, check: Check, message: impl Into<String>) {
        self.out.push(VerifierViolation {
            pc: self.pc,
            check,
            message: message.into(),
        });
    }

    /// Every register read by `e` must hold an initialized value.
    fn require_init(&mut self, e: &Expr, what: &str) {
        for r in e.regs() {
            let v = self.frame.reg(r);
            if v != AbsVal::Init {
                self.emit(Check::InitBeforeUse, format!("{what} reads {r}, which is {v}"));
                return;
            }
        }
    }

    /// Like [`require_init`](Self::require_init), except that a bare register
    /// may be copied whatever it holds.
    fn require_init_unless_bare(&mut self, e: &Expr, what: &str) {
        if !matches!(e, Expr::Reg(_)) {
            self.require_init(e, what);
        }
    }

    fn protect_slot(&mut self, o: i64, arity: u64) {
        if o == 0 {
            self.emit(Check::FrameProtection, "write to the return address slot");
        } else if o < -(arity as i64) {
            self.emit(Check::FrameProtection, format!("write at offset {o} below the frame"));
        }
    }

    fn memory_discipline(&mut self, program: &Program, k: &CheckKind, a: &Expr) {
        let heap_u = CheckKind::Heap(Privilege::Untrusted);
        if *k == heap_u {
            if a.sp_offset().is_some() {
                self.emit(Check::MemoryDiscipline, "heap guard applied to a stack address");
            } else if let ValueSet::Finite(vs) = ValueSet::of(a) {
                if let Some(v) = vs.iter().find(|v| !program.layout.in_heap(Privilege::Untrusted, **v)) {
                    self.emit(
                        Check::MemoryDiscipline,
                        format!("heap access at {v} outside the library heap"),
                    );
                }
            }
        } else if a.sp_offset().is_none() {
            self.emit(
                Check::MemoryDiscipline,
                format!("{k} access at `{a}` is neither heap.U nor sp ± c"),
            );
        }
    }

    /// Top `m` slots hold initialized arguments above the return slot.
    fn arguments(&mut self, m: u64, callee: &str) {
        let SpOffset::Known(o) = self.frame.sp else {
            return;
        };
        if o < m as i64 {
            self.emit(
                Check::ForwardCfi,
                format!("{callee} takes {m} arguments but only {o} slots are above the return address"),
            );
            return;
        }
        for s in (o - m as i64 + 1)..=o {
            let v = self.frame.slot(s);
            if v != AbsVal::Init {
                self.emit(Check::ForwardCfi, format!("argument slot {s} for {callee} is {v}"));
                return;
            }
        }
    }
}

pub fn check_function(
    program: &Program,
    func: &FuncMeta,
    graph: &Cfg,
    facts: &BTreeMap<u64, AbsFrame>,
    cfg: &VerifierConfig,
) -> Vec<VerifierViolation> {
    let mut out: Vec<VerifierViolation> = graph
        .errors
        .iter()
        .map(|(pc, m)| VerifierViolation {
            pc: *pc,
            check: Check::Cfg,
            message: m.clone(),
        })
        .collect();
    let mut reported_invalid = false;

    for pc in func.instrs() {
        let (Some((_, cmd)), Some(frame)) = (program.instr(pc), facts.get(&pc)) else {
            continue;
        };
        let mut em = Emitter {
            out: Vec::new(),
            frame,
            pc,
        };
        if frame.sp == SpOffset::Invalid && !reported_invalid {
            reported_invalid = true;
            em.emit(
                Check::WellBracketed,
                format!("stack pointer offset unknown or beyond {} slots", cfg.frame_limit),
            );
        }
        match cmd {
            Command::Ret(_) | Command::GateRet => {
                let gate = matches!(cmd, Command::GateRet);
                if gate != func.exported {
                    let want = if func.exported { "gateret" } else { "ret" };
                    em.emit(Check::WellBracketed, format!("function must exit with {want}"));
                }
                if let SpOffset::Known(o) = frame.sp {
                    if o != 0 {
                        em.emit(Check::WellBracketed, format!("stack pointer offset {o} at exit"));
                    }
                }
                for &r in &program.conv.csr {
                    let v = frame.reg(r);
                    if v != AbsVal::CalleeSaved(r) {
                        em.emit(Check::CsrRestore, format!("{r} is {v} at exit"));
                    }
                }
                let ret = frame.reg(program.conv.ret);
                if ret != AbsVal::Init {
                    em.emit(
                        Check::PublicReturn,
                        format!("return register {} is {ret} at exit", program.conv.ret),
                    );
                }
            }
            Command::Store(k, a, v) => {
                em.memory_discipline(program, k, a);
                em.require_init(a, "store address");
                match frame.slot_of(a) {
                    Some(o) if !matches!(k, CheckKind::Heap(_)) => {
                        em.protect_slot(o, func.arity);
                        em.require_init_unless_bare(v, "stored value");
                    }
                    _ => em.require_init(v, "stored value"),
                }
            }
            Command::Push(_, e) => {
                if let SpOffset::Known(o) = frame.sp {
                    em.protect_slot(o + 1, func.arity);
                }
                em.require_init_unless_bare(e, "pushed value");
            }
            Command::Load(_, k, a) => {
                em.memory_discipline(program, k, a);
                em.require_init(a, "load address");
            }
            Command::Mov(Reg::Sp, e) => em.require_init(e, "stack pointer update"),
            Command::Mov(_, e) => em.require_init_unless_bare(e, "move"),
            Command::Jmp(_, e) => em.require_init(e, "jump target"),
            Command::Call(k, e) => {
                em.require_init(e, "call target");
                match call_targets(program, k, e) {
                    Err(m) => em.emit(Check::ForwardCfi, m),
                    Ok(targets) => {
                        let mut m = 0;
                        for t in targets {
                            match program.func_at_entry(t) {
                                None => em.emit(Check::ForwardCfi, format!("call target {t} is not a function entry")),
                                Some(f) if f.exported => em.emit(
                                    Check::ForwardCfi,
                                    format!("internal call to exported function {}", f.name),
                                ),
                                Some(f) => m = m.max(f.arity),
                            }
                        }
                        em.arguments(m, &format!("call `{e}`"));
                    }
                }
            }
            Command::GateCall(n, e) => {
                if !e.as_lit().is_some_and(|t| program.imports.contains(&t)) {
                    em.emit(Check::ForwardCfi, format!("gatecall target `{e}` is not an import"));
                }
                em.arguments(*n, "gatecall");
            }
            Command::MovLabel(r, p) => {
                if *p == Privilege::Trusted {
                    em.emit(Check::InitBeforeUse, format!("library raises the label of {r}"));
                } else {
                    em.require_init(&Expr::Reg(*r), "label move");
                }
            }
            Command::StoreLabel(..) => em.emit(Check::InitBeforeUse, "library relabels memory"),
            Command::Pop(..) => {}
        }
        out.extend(em.out);
    }
    out.sort_by_key(|v| (v.pc, v.check));
    out
}
