use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layout::Span;
use super::{CheckKind, Command, Privilege, Program};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Discipline {
    NaCl,
    ZeroCost,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending instruction, when the violation is tied to one.
    pub pc: Option<u64>,
    pub message: String,
}

impl Violation {
    fn at(pc: u64, message: impl Into<String>) -> Violation {
        Violation {
            pc: Some(pc),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Violation {
        Violation {
            pc: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pc {
            Some(pc) => write!(f, "pc {pc}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Codomain of a guard, as a set of addresses.
enum Codomain {
    All,
    Spans(Vec<Span>),
    Set(BTreeSet<u64>),
}

fn codomain(program: &Program, k: &CheckKind) -> Codomain {
    let l = &program.layout;
    match k {
        CheckKind::Id => Codomain::All,
        CheckKind::Mem(p) => Codomain::Spans(vec![l.heap(*p), l.stack(*p)]),
        CheckKind::Heap(p) => Codomain::Spans(vec![l.heap(*p)]),
        CheckKind::Stack(p) => Codomain::Spans(vec![l.stack(*p)]),
        CheckKind::Code(p) => Codomain::Set(program.code_of(*p).collect()),
        CheckKind::Imports => Codomain::Set(program.imports.clone()),
        CheckKind::Table(t) => Codomain::Set(
            (0..program.tables.get(t).map_or(0, Vec::len))
                .filter_map(|i| program.table_entry(t, i))
                .collect(),
        ),
    }
}

/// Whether `span` is covered by the union of `covers`.
fn covered(span: Span, covers: &[Span]) -> bool {
    let mut pos = span.lo;
    while pos < span.hi {
        match covers.iter().find(|c| c.contains(pos)) {
            Some(c) => pos = c.hi,
            None => return false,
        }
    }
    true
}

fn within_untrusted_memory(program: &Program, k: &CheckKind) -> bool {
    let l = &program.layout;
    let mem_u = [l.h_u, l.s_u];
    match codomain(program, k) {
        Codomain::All => false,
        Codomain::Spans(spans) => spans.iter().all(|s| covered(*s, &mem_u)),
        Codomain::Set(set) => set.iter().all(|n| l.in_mem(Privilege::Untrusted, *n)),
    }
}

fn within_code(program: &Program, k: &CheckKind, p: Privilege) -> bool {
    match codomain(program, k) {
        Codomain::All => false,
        Codomain::Spans(spans) => spans
            .iter()
            .all(|s| s.addrs().all(|n| program.privilege_at(n) == Some(p))),
        Codomain::Set(set) => set.iter().all(|n| program.privilege_at(*n) == Some(p)),
    }
}

/// Static discipline checks. Returns violations in address order, global
/// violations last.
pub fn well_formed(program: &Program, discipline: Discipline) -> Vec<Violation> {
    let mut out = match discipline {
        Discipline::NaCl => nacl(program),
        Discipline::ZeroCost => zerocost(program),
    };
    if program.privilege_at(program.entry) != Some(Privilege::Trusted) {
        out.push(Violation::global(format!(
            "entry {} is not in trusted code",
            program.entry
        )));
    }
    out
}

fn nacl(program: &Program) -> Vec<Violation> {
    let mut out = Vec::new();
    for (&pc, (p, cmd)) in &program.code {
        let lib = *p == Privilege::Untrusted;
        match cmd {
            Command::Pop(_, q) | Command::Push(q, _) if lib && *q != Privilege::Untrusted => {
                out.push(Violation::at(
                    pc,
                    format!("library {} must be annotated U", cmd.mnemonic()),
                ));
            }
            Command::Load(_, k, _) | Command::Store(k, _, _) if lib && !within_untrusted_memory(program, k) => {
                out.push(Violation::at(
                    pc,
                    format!("library {} guard {k} is not confined to sandbox memory", cmd.mnemonic()),
                ));
            }
            Command::Call(k, _) | Command::Jmp(k, _) | Command::Ret(k) if !within_code(program, k, *p) => {
                let msg = if lib {
                    format!("unguarded control flow in library ({} {k})", cmd.mnemonic())
                } else {
                    format!("application {} guard {k} may leave application code", cmd.mnemonic())
                };
                out.push(Violation::at(pc, msg));
            }
            _ => {}
        }
    }
    let l = &program.layout;
    match l.ctx {
        None => out.push(Violation::global("layout has no transition context")),
        Some(c) => {
            let mem = program.initial_memory();
            let read = |a: u64| mem.get(&a).copied().unwrap_or(0);
            if !l.in_heap(Privilege::Trusted, c.ctx_star) {
                out.push(Violation::global("ctx* is not in the trusted heap"));
            }
            if read(c.ctx_star) != c.ctx || !l.in_heap(Privilege::Trusted, c.ctx) {
                out.push(Violation::global(
                    "ctx* must initially hold a context address in the trusted heap",
                ));
            }
            if read(c.ctx) != l.s_u.lo.saturating_sub(1) {
                out.push(Violation::global(
                    "initial context must hold the library stack base minus one",
                ));
            }
        }
    }
    out
}

fn zerocost(program: &Program) -> Vec<Violation> {
    let mut out = Vec::new();
    for (&pc, (p, cmd)) in &program.code {
        if *p != Privilege::Untrusted {
            continue;
        }
        if program.func_containing(pc).is_none() {
            out.push(Violation::at(pc, "library code not partitioned into functions"));
        }
        match cmd {
            Command::Pop(_, q) | Command::Push(q, _) if *q != Privilege::Untrusted => {
                out.push(Violation::at(
                    pc,
                    format!("library {} must be annotated U", cmd.mnemonic()),
                ));
            }
            Command::Load(_, k, a) | Command::Store(k, a, _) => {
                let ok = match k {
                    CheckKind::Heap(Privilege::Untrusted)
                    | CheckKind::Stack(Privilege::Untrusted)
                    | CheckKind::Mem(Privilege::Untrusted) => true,
                    CheckKind::Id => a.sp_offset().is_some(),
                    _ => false,
                };
                if !ok {
                    out.push(Violation::at(
                        pc,
                        format!(
                            "library {} must be guarded heap.U or address the stack as sp ± c",
                            cmd.mnemonic()
                        ),
                    ));
                }
            }
            Command::Jmp(k, _) if *k != CheckKind::Code(Privilege::Untrusted) => {
                out.push(Violation::at(pc, "library jmp must be guarded code.U"));
            }
            Command::Call(k, _) if !matches!(k, CheckKind::Code(Privilege::Untrusted) | CheckKind::Table(_)) => {
                out.push(Violation::at(pc, "library call must be guarded code.U or by a table"));
            }
            Command::Ret(k) if *k != CheckKind::Code(Privilege::Untrusted) => {
                out.push(Violation::at(pc, "library ret must be guarded code.U"));
            }
            Command::GateCall(_, e) if !e.as_lit().is_some_and(|t| program.imports.contains(&t)) => {
                out.push(Violation::at(pc, "library gatecall target must be an import"));
            }
            _ => {}
        }
    }
    for &i in &program.imports {
        if program.privilege_at(i) != Some(Privilege::Trusted) {
            out.push(Violation::global(format!("import {i} is not trusted code")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::parse_asm;
    use super::*;

    fn violations(src: &str, d: Discipline) -> Vec<String> {
        let p = parse_asm(src).unwrap();
        well_formed(&p, d).into_iter().map(|v| v.to_string()).collect()
    }

    #[test]
    fn nacl_guarded_store_accepted() {
        let src = ".layout nacl-default\n.lib\nf: store mem.U(300), 1\ngateret\n.app\nmain: gatecall 0, f\n";
        assert!(violations(src, Discipline::NaCl).is_empty());
    }

    #[test]
    fn nacl_unguarded_library_jump() {
        let src = ".layout nacl-default\n.lib\nf: jmp id(main)\n.app\nmain: gatecall 0, f\n";
        let v = violations(src, Discipline::NaCl);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("unguarded control flow in library"), "{v:?}");
    }

    #[test]
    fn nacl_context_conditions() {
        let src = ".layout nacl-default\n.mem 8 = 5\n.app\nmain: mov r1, 1\n";
        let v = violations(src, Discipline::NaCl);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("library stack base"));
    }

    #[test]
    fn zerocost_unpartitioned_library() {
        let src = ".lib\nmov r0, 1\n.func f arity=0 exported\ngateret\n.endfunc\n.app\nmain: gatecall 0, f\n";
        let v = violations(src, Discipline::ZeroCost);
        assert_eq!(v, vec!["pc 0: library code not partitioned into functions".to_string()]);
    }

    #[test]
    fn zerocost_cross_section_jump_flagged() {
        let src = ".lib\n.func f arity=0 exported\njmp id(main)\n.endfunc\n.app\nmain: gatecall 0, f\n";
        let v = violations(src, Discipline::ZeroCost);
        assert_eq!(v, vec!["pc 0: library jmp must be guarded code.U".to_string()]);
    }

    #[test]
    fn entry_must_be_trusted() {
        let src = ".lib\n.func main arity=0\nret code.U\n.endfunc\n";
        let v = violations(src, Discipline::ZeroCost);
        assert!(v.iter().any(|m| m.contains("entry 0 is not in trusted code")));
    }
}
