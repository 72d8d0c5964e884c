use std::collections::BTreeMap;
use std::fmt::Write;

use super::{Privilege, Program};

/// Renders a program in the assembly format accepted by
/// [`parse_asm`](super::parse_asm). Labels used as operands are printed as
/// their resolved addresses.
pub fn pretty_print(program: &Program) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".layout {}", program.layout);

    let mut by_addr: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for (name, addr) in &program.labels {
        by_addr.entry(*addr).or_default().push(name);
    }

    if !program.imports.is_empty() {
        let names: Vec<String> = program
            .imports
            .iter()
            .map(|a| match by_addr.get(a).and_then(|ls| ls.first()) {
                Some(l) => (*l).to_string(),
                None => a.to_string(),
            })
            .collect();
        let _ = writeln!(out, ".imports {}", names.join(", "));
    }
    for (name, entries) in &program.tables {
        let _ = writeln!(out, ".table {name} = [{}]", entries.join(", "));
    }
    for (a, v) in &program.memory {
        let _ = writeln!(out, ".mem {a} = {v}");
    }

    let mut section: Option<Privilege> = None;
    for (addr, (p, cmd)) in &program.code {
        if section != Some(*p) {
            out.push_str(match p {
                Privilege::Trusted => ".app\n",
                Privilege::Untrusted => ".lib\n",
            });
            section = Some(*p);
        }
        let func = program.funcs.iter().find(|f| f.start == *addr);
        if let Some(f) = func {
            let _ = write!(out, ".func {} arity={}", f.name, f.arity);
            if f.exported {
                out.push_str(" exported");
            }
            out.push('\n');
        }
        if let Some(ls) = by_addr.get(addr) {
            for l in ls {
                if func.is_some_and(|f| f.name == *l) {
                    continue;
                }
                let _ = writeln!(out, "{l}:");
            }
        }
        let _ = writeln!(out, "  {cmd}");
        if program.funcs.iter().any(|f| f.end == addr + 1) {
            out.push_str(".endfunc\n");
        }
    }
    let end = program.code_end();
    for (addr, ls) in by_addr.range(end..) {
        debug_assert_eq!(*addr, end, "labels past the code end are not representable");
        for l in ls {
            let _ = writeln!(out, "{l}:");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::parse_asm;
    use super::*;

    #[test]
    fn round_trip_small_program() {
        let src = "\
.layout nacl-default
.imports cb
.table t = [f, g]
.mem 300 = 5
.lib
.func f arity=1 exported
  load r0, mem.U(sp - 1)
  call table.t(1)
  gateret
.endfunc
.func g arity=1
inner:
  mov r0, 1 - (1 - r0) * 3
  ret code.U
.endfunc
.app
cb:
  gateret
main:
  push T, 4
  gatecall 1, f
  mov sp, sp - 1
done:
";
        let p = parse_asm(src).unwrap();
        let text = pretty_print(&p);
        let q = parse_asm(&text).unwrap();
        assert_eq!(p, q);
        assert!(text.contains("inner:"));
        assert!(text.contains(".imports cb"));
    }
}
