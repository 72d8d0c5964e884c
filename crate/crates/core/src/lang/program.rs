use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Command, Layout, Privilege, Reg};

/// Register roles for the calling convention.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallConv {
    /// Callee-save registers, in context-save order.
    pub csr: Vec<Reg>,
    pub scratch: Vec<Reg>,
    pub ret: Reg,
    /// Registers cleared by the heavyweight springboard.
    pub clear: Vec<Reg>,
}

impl Default for CallConv {
    fn default() -> Self {
        CallConv {
            csr: vec![Reg::R4, Reg::R5, Reg::R6, Reg::R7],
            scratch: vec![Reg::R0, Reg::R1, Reg::R2, Reg::R3],
            ret: Reg::R0,
            clear: Reg::GPRS.to_vec(),
        }
    }
}

impl CallConv {
    pub fn is_csr(&self, r: Reg) -> bool {
        self.csr.contains(&r)
    }
}

/// A library function: a contiguous run of Untrusted instructions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FuncMeta {
    pub name: String,
    pub entry: u64,
    pub arity: u64,
    /// First instruction address.
    pub start: u64,
    /// One past the last instruction address.
    pub end: u64,
    pub exported: bool,
}

impl FuncMeta {
    pub fn contains(&self, n: u64) -> bool {
        self.start <= n && n < self.end
    }

    pub fn instrs(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub code: BTreeMap<u64, (Privilege, Command)>,
    pub layout: Layout,
    pub labels: BTreeMap<String, u64>,
    pub imports: BTreeSet<u64>,
    /// Library functions ordered by start address.
    pub funcs: Vec<FuncMeta>,
    pub tables: BTreeMap<String, Vec<String>>,
    /// Explicit initial memory entries; layout-implied cells are added by
    /// [`Program::initial_memory`].
    pub memory: BTreeMap<u64, u64>,
    pub entry: u64,
    pub conv: CallConv,
}

impl Program {
    pub fn empty(layout: Layout) -> Program {
        Program {
            code: BTreeMap::new(),
            layout,
            labels: BTreeMap::new(),
            imports: BTreeSet::new(),
            funcs: Vec::new(),
            tables: BTreeMap::new(),
            memory: BTreeMap::new(),
            entry: 0,
            conv: CallConv::default(),
        }
    }

    pub fn instr(&self, n: u64) -> Option<&(Privilege, Command)> {
        self.code.get(&n)
    }

    pub fn privilege_at(&self, n: u64) -> Option<Privilege> {
        self.code.get(&n).map(|(p, _)| *p)
    }

    pub fn label(&self, name: &str) -> Option<u64> {
        self.labels.get(name).copied()
    }

    /// One past the highest code address.
    pub fn code_end(&self) -> u64 {
        self.code.keys().next_back().map_or(0, |a| a + 1)
    }

    pub fn func_named(&self, name: &str) -> Option<&FuncMeta> {
        self.funcs.iter().find(|f| f.name == name)
    }

    pub fn func_containing(&self, n: u64) -> Option<&FuncMeta> {
        let i = self.funcs.partition_point(|f| f.end <= n);
        self.funcs.get(i).filter(|f| f.contains(n))
    }

    pub fn func_at_entry(&self, n: u64) -> Option<&FuncMeta> {
        self.func_containing(n).filter(|f| f.entry == n)
    }

    /// Entry address of the `i`-th function of table `t`.
    pub fn table_entry(&self, t: &str, i: usize) -> Option<u64> {
        let name = self.tables.get(t)?.get(i)?;
        self.func_named(name).map(|f| f.entry)
    }

    /// Initial memory image: layout-implied cells overridden by explicit
    /// `.mem` entries. Zero cells are omitted.
    pub fn initial_memory(&self) -> BTreeMap<u64, u64> {
        let mut mem: BTreeMap<u64, u64> = self.layout.implied_memory().into_iter().collect();
        for (a, v) in &self.memory {
            mem.insert(*a, *v);
        }
        mem.retain(|_, v| *v != 0);
        mem
    }

    /// Addresses of code carrying privilege `p`.
    pub fn code_of(&self, p: Privilege) -> impl Iterator<Item = u64> + '_ {
        self.code.iter().filter(move |(_, (q, _))| *q == p).map(|(a, _)| *a)
    }

    /// Label names bound to `n`, sorted.
    pub fn labels_at(&self, n: u64) -> Vec<&str> {
        self.labels
            .iter()
            .filter(|(_, a)| **a == n)
            .map(|(l, _)| l.as_str())
            .collect()
    }
}
