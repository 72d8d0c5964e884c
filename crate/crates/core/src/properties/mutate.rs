use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gen::{gen_library, GenLibrary, GenParams, Line, Tag, HEAP_SPARE_BASE};
use crate::lang::Reg;
use crate::monitor::Reason;
use crate::verifier::Check;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MutationKind {
    SkipCsrRestore,
    ClobberCsrThenRet,
    ReadUninitScratch,
    StoreBelowFrame,
    OverwriteRetAddr,
    WrongArityCall,
    CrossFunctionJmp,
    TamperSpBeforeRet,
    LeakSecretToLibHeap,
}

impl MutationKind {
    pub const ALL: [MutationKind; 9] = [
        MutationKind::SkipCsrRestore,
        MutationKind::ClobberCsrThenRet,
        MutationKind::ReadUninitScratch,
        MutationKind::StoreBelowFrame,
        MutationKind::OverwriteRetAddr,
        MutationKind::WrongArityCall,
        MutationKind::CrossFunctionJmp,
        MutationKind::TamperSpBeforeRet,
        MutationKind::LeakSecretToLibHeap,
    ];

    /// The verifier check expected to reject this attack.
    pub fn expected_check(self) -> Check {
        match self {
            MutationKind::SkipCsrRestore | MutationKind::ClobberCsrThenRet => Check::CsrRestore,
            MutationKind::ReadUninitScratch | MutationKind::LeakSecretToLibHeap => Check::InitBeforeUse,
            MutationKind::StoreBelowFrame | MutationKind::OverwriteRetAddr => Check::FrameProtection,
            MutationKind::WrongArityCall => Check::ForwardCfi,
            MutationKind::CrossFunctionJmp => Check::Cfg,
            MutationKind::TamperSpBeforeRet => Check::WellBracketed,
        }
    }

    /// The monitor error expected when the attack runs.
    pub fn expected_reason(self) -> Reason {
        match self {
            MutationKind::SkipCsrRestore | MutationKind::ClobberCsrThenRet => Reason::CsrNotRestored,
            MutationKind::ReadUninitScratch | MutationKind::LeakSecretToLibHeap => Reason::SecretToLibHeap,
            MutationKind::StoreBelowFrame | MutationKind::OverwriteRetAddr => Reason::WriteOutsideFrame,
            MutationKind::WrongArityCall => Reason::TypecheckFailed,
            MutationKind::CrossFunctionJmp => Reason::CrossFunctionJump,
            MutationKind::TamperSpBeforeRet => Reason::RetAddrMismatch,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MutationKind::SkipCsrRestore => "skip-csr-restore",
            MutationKind::ClobberCsrThenRet => "clobber-csr-then-ret",
            MutationKind::ReadUninitScratch => "read-uninit-scratch",
            MutationKind::StoreBelowFrame => "store-below-frame",
            MutationKind::OverwriteRetAddr => "overwrite-ret-addr",
            MutationKind::WrongArityCall => "wrong-arity-call",
            MutationKind::CrossFunctionJmp => "cross-function-jmp",
            MutationKind::TamperSpBeforeRet => "tamper-sp-before-ret",
            MutationKind::LeakSecretToLibHeap => "leak-secret-to-lib-heap",
        }
    }
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MutationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MutationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown mutation kind `{s}`"))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("no site for {0} in this library")]
pub struct NotApplicable(pub MutationKind);

const JUNK: u64 = 0xBAD;

/// Applies `kind` at a seeded site. Sites are in exported functions, which
/// the driver always reaches.
pub fn mutate(lib: &GenLibrary, kind: MutationKind, seed: u64) -> Result<GenLibrary, NotApplicable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d75_7461_7465);
    let mut out = lib.clone();
    let exported: Vec<usize> = (0..lib.funcs.len()).filter(|i| lib.funcs[*i].exported).collect();
    let na = NotApplicable(kind);

    let with_tag = |pred: &dyn Fn(&Tag) -> bool| -> Vec<(usize, usize)> {
        exported
            .iter()
            .flat_map(|&f| {
                lib.funcs[f]
                    .body
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| pred(&l.tag))
                    .map(move |(i, _)| (f, i))
            })
            .collect()
    };

    match kind {
        MutationKind::SkipCsrRestore => {
            let sites = with_tag(&|t| matches!(t, Tag::Restore(_)));
            let &(f, i) = sites.choose(&mut rng).ok_or(na)?;
            out.funcs[f].body[i] = Line::plain("mov sp, sp - 1");
        }
        MutationKind::ClobberCsrThenRet => {
            let sites = with_tag(&|t| *t == Tag::Exit);
            let &(f, i) = sites.choose(&mut rng).ok_or(na)?;
            let r = *[Reg::R4, Reg::R5, Reg::R6, Reg::R7].choose(&mut rng).unwrap();
            let junk = JUNK + rng.random_range(0..16);
            out.funcs[f].body.insert(i, Line::plain(format!("mov {r}, {junk}")));
        }
        MutationKind::ReadUninitScratch | MutationKind::LeakSecretToLibHeap => {
            let &f = exported.choose(&mut rng).ok_or(na)?;
            let regs: &[Reg] = if kind == MutationKind::ReadUninitScratch {
                &[Reg::R0, Reg::R1, Reg::R2, Reg::R3]
            } else {
                &[Reg::R4, Reg::R5, Reg::R6, Reg::R7]
            };
            let r = *regs.choose(&mut rng).unwrap();
            let a = HEAP_SPARE_BASE + rng.random_range(0..10);
            out.funcs[f]
                .body
                .insert(0, Line::plain(format!("store {{h}}({a}), {r}")));
        }
        MutationKind::StoreBelowFrame => {
            let &f = exported.choose(&mut rng).ok_or(na)?;
            let k = lib.funcs[f].arity + 1 + rng.random_range(0..2);
            out.funcs[f]
                .body
                .insert(0, Line::plain(format!("store {{s}}(sp - {k}), 666")));
        }
        MutationKind::OverwriteRetAddr => {
            let &f = exported.choose(&mut rng).ok_or(na)?;
            out.funcs[f].body.insert(0, Line::plain("store {s}(sp), 666"));
        }
        MutationKind::WrongArityCall => {
            let sites = with_tag(&|t| matches!(t, Tag::Call { arity, .. } if *arity > 0));
            let &(f, i) = sites.choose(&mut rng).ok_or(na)?;
            let Tag::Call { site, .. } = lib.funcs[f].body[i].tag else {
                unreachable!()
            };
            let push = (0..i)
                .rev()
                .find(|j| lib.funcs[f].body[*j].tag == Tag::ArgPush { site })
                .ok_or(na)?;
            out.funcs[f].body.remove(push);
        }
        MutationKind::CrossFunctionJmp => {
            let &f = exported.choose(&mut rng).ok_or(na)?;
            let others: Vec<&str> = lib
                .funcs
                .iter()
                .filter(|g| g.name != lib.funcs[f].name)
                .map(|g| g.name.as_str())
                .collect();
            let target = others.choose(&mut rng).ok_or(na)?;
            out.funcs[f]
                .body
                .insert(0, Line::plain(format!("jmp code.U({target})")));
        }
        MutationKind::TamperSpBeforeRet => {
            let sites = with_tag(&|t| *t == Tag::Exit);
            let &(f, i) = sites.choose(&mut rng).ok_or(na)?;
            out.funcs[f].body.insert(i, Line::plain("mov sp, sp + 1"));
        }
    }
    Ok(out)
}

/// A library carrying one `kind` attack: the first generator seed at or
/// after `seed` that offers a site.
pub fn attack_instance(kind: MutationKind, seed: u64, params: &GenParams) -> GenLibrary {
    (0..)
        .map(|k: u64| seed.wrapping_mul(7919).wrapping_add(k))
        .find_map(|s| mutate(&gen_library(s, params), kind, seed).ok())
        .expect("some seed offers a site")
}
