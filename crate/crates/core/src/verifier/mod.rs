//! Static zero-cost verifier: per-function CFG, forward dataflow over
//! `{Uninit, Init, CalleeSaved(r)}` and the zero-cost condition checks.

mod cfg;
mod check;
mod domain;

pub use cfg::{build_cfg, Block, Cfg};
pub use check::{analyze_function, check_function};
pub use domain::{after_call, transfer, AbsFrame, AbsVal, SpOffset, ValueSet, VALUE_SET_CAP};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lang::Program;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Check {
    Cfg,
    CsrRestore,
    WellBracketed,
    FrameProtection,
    ForwardCfi,
    InitBeforeUse,
    MemoryDiscipline,
    PublicReturn,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::Cfg => "cfg",
            Check::CsrRestore => "csr-restore",
            Check::WellBracketed => "well-bracketed",
            Check::FrameProtection => "frame-protection",
            Check::ForwardCfi => "forward-cfi",
            Check::InitBeforeUse => "init-before-use",
            Check::MemoryDiscipline => "memory-discipline",
            Check::PublicReturn => "public-return",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierViolation {
    pub pc: u64,
    pub check: Check,
    pub message: String,
}

impl fmt::Display for VerifierViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pc {}: [{}] {}", self.pc, self.check, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionVerdict {
    pub name: String,
    pub violations: Vec<VerifierViolation>,
}

impl FunctionVerdict {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub functions: Vec<FunctionVerdict>,
}

impl VerdictReport {
    pub fn passed(&self) -> bool {
        self.functions.iter().all(FunctionVerdict::passed)
    }

    pub fn violations(&self) -> impl Iterator<Item = (&str, &VerifierViolation)> {
        self.functions
            .iter()
            .flat_map(|f| f.violations.iter().map(move |v| (f.name.as_str(), v)))
    }

    pub fn has_check(&self, check: Check) -> bool {
        self.violations().any(|(_, v)| v.check == check)
    }
}

impl fmt::Display for VerdictReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for func in &self.functions {
            if func.passed() {
                writeln!(f, "{}: pass", func.name)?;
            } else {
                writeln!(f, "{}: fail", func.name)?;
                for v in &func.violations {
                    writeln!(f, "  {v}")?;
                }
            }
        }
        write!(f, "library: {}", if self.passed() { "pass" } else { "fail" })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierConfig {
    /// Largest stack-pointer offset above the entry `sp` a function may reach.
    pub frame_limit: i64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig { frame_limit: 64 }
    }
}

pub fn verify_library(program: &Program) -> VerdictReport {
    verify_library_with(program, &VerifierConfig::default())
}

pub fn verify_library_with(program: &Program, cfg: &VerifierConfig) -> VerdictReport {
    let functions = program
        .funcs
        .iter()
        .map(|func| {
            let graph = build_cfg(program, func);
            let facts = analyze_function(program, func, &graph, cfg);
            FunctionVerdict {
                name: func.name.clone(),
                violations: check_function(program, func, &graph, &facts, cfg),
            }
        })
        .collect();
    VerdictReport { functions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_asm;

    fn verify(src: &str) -> VerdictReport {
        verify_library(&parse_asm(src).unwrap())
    }

    const GOOD_BAD: &str = "\
.lib
.func good_func arity=1
  load r0, id(sp - 1)
  ret code.U
.endfunc
.func bad_func arity=0 exported
  push U, r4
  mov r4, 1
  mov r3, r5 + r4
  push U, 2
  call code.U(good_func)
  mov sp, sp - 1
  pop r4, U
  gateret
.endfunc
.app
main: gatecall 0, bad_func
";

    #[test]
    fn bad_func_flagged_at_uninit_operand_only() {
        let r = verify(GOOD_BAD);
        let good = &r.functions[0];
        assert!(good.passed(), "{r}");
        let bad = &r.functions[1];
        assert_eq!(bad.violations.len(), 1, "{r}");
        assert_eq!(bad.violations[0].pc, 4);
        assert_eq!(bad.violations[0].check, Check::InitBeforeUse);
    }

    #[test]
    fn helper_store_below_frame() {
        let r = verify(
            ".lib\n.func library_helper arity=0\nstore id(sp - 1), 666\nmov r0, 0\nret code.U\n.endfunc\n\
             .func library_func arity=0 exported\npush U, r4\nmov r4, 1\ncall code.U(library_helper)\npop r4, U\ngateret\n.endfunc\n",
        );
        let helper = &r.functions[0];
        assert_eq!(helper.violations.len(), 1);
        assert_eq!(helper.violations[0].check, Check::FrameProtection);
    }

    #[test]
    fn exported_function_must_exit_with_gateret() {
        let r = verify(".lib\n.func f arity=0 exported\nmov r0, 1\nret code.U\n.endfunc\n");
        assert!(r.has_check(Check::WellBracketed));
    }

    #[test]
    fn call_with_uninit_argument() {
        let r = verify(
            ".lib\n.func g arity=1\nload r0, id(sp - 1)\nret code.U\n.endfunc\n\
             .func f arity=0 exported\npush U, r1\ncall code.U(g)\nmov sp, sp - 1\ngateret\n.endfunc\n",
        );
        let f = &r.functions[1];
        assert_eq!(f.violations.len(), 1, "{r}");
        assert_eq!(f.violations[0].check, Check::ForwardCfi);
    }

    #[test]
    fn loop_join_meets() {
        let src = "\
.lib
.func f arity=1 exported
  load r3, id(sp - 1)
top:
  jmp code.U(top + (done - top) * (1 - r3))
  mov r1, 1
  mov r3, r3 - 1
  jmp code.U(top)
done:
  mov r0, r1
  gateret
.endfunc
";
        let p = parse_asm(src).unwrap();
        let f = p.func_named("f").unwrap();
        let cfg = VerifierConfig::default();
        let g = build_cfg(&p, f);
        let facts = analyze_function(&p, f, &g, &cfg);
        assert_eq!(facts[&p.label("done").unwrap()].regs[1], AbsVal::Uninit);
        let r = verify(src);
        assert!(r.has_check(Check::PublicReturn));
    }

    #[test]
    fn factorial_passes() {
        let src = "\
.lib
.func fact arity=1
  load r1, id(sp - 1)
  jmp code.U(rec + (base - rec) * (1 - r1))
rec:
  push U, r1 - 1
  call code.U(fact)
  mov sp, sp - 1
  load r1, id(sp - 1)
  mov r0, r0 * r1
  ret code.U
base:
  mov r0, 1
  ret code.U
.endfunc
.func entry arity=1 exported
  load r1, id(sp - 1)
  push U, r1 - (r1 - 5)
  call code.U(fact)
  mov sp, sp - 1
  gateret
.endfunc
";
        let r = verify(src);
        assert!(r.passed(), "{r}");
    }
}
