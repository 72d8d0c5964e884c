//! Seeded generator of zero-cost-discipline libraries with a trusted driver.
//!
//! Functions are built as tagged lines so the mutator can find its sites;
//! memory guards are placeholders until rendering picks a discipline.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lang::{parse_asm, Discipline, ParseError, Program, Reg};

/// Library heap cells the generated code reads.
pub const HEAP_READ_BASE: u64 = 256;
/// Library heap cells the generated code writes.
pub const HEAP_WRITE_BASE: u64 = 288;
/// Library heap cells left untouched for injected stores.
pub const HEAP_SPARE_BASE: u64 = 320;
/// Initial value of `r0..r7` in the driver is `DRIVER_REG_BASE + i`.
pub const DRIVER_REG_BASE: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_funcs: usize,
    pub max_arity: u64,
    pub max_calls: usize,
    /// Percent chance that a caller invokes an application callback.
    pub callback_pct: u32,
    pub force_callback: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_funcs: 6,
            max_arity: 3,
            max_calls: 4,
            callback_pct: 25,
            force_callback: false,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FuncKind {
    Leaf,
    Caller,
    Fact,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    Plain,
    Save(Reg),
    Restore(Reg),
    /// One argument push for call site `site`.
    ArgPush {
        site: usize,
    },
    Call {
        site: usize,
        arity: u64,
    },
    Exit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Line {
    /// Assembly text; `{s}` and `{h}` stand for the stack and heap guards.
    pub text: String,
    pub tag: Tag,
}

impl Line {
    pub fn plain(text: impl Into<String>) -> Line {
        Line {
            text: text.into(),
            tag: Tag::Plain,
        }
    }

    fn tagged(text: impl Into<String>, tag: Tag) -> Line {
        Line { text: text.into(), tag }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenFunc {
    pub name: String,
    pub arity: u64,
    pub exported: bool,
    pub kind: FuncKind,
    pub body: Vec<Line>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenCallback {
    pub name: String,
    pub arity: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverCall {
    pub func: String,
    pub args: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenLibrary {
    pub seed: u64,
    pub funcs: Vec<GenFunc>,
    pub tables: Vec<(String, Vec<String>)>,
    pub callbacks: Vec<GenCallback>,
    pub heap: Vec<(u64, u64)>,
    pub driver: Vec<DriverCall>,
}

#[derive(Clone, Debug)]
pub struct GenProgram {
    pub library: GenLibrary,
    pub discipline: Discipline,
    pub source: String,
    pub program: Program,
}

impl GenLibrary {
    pub fn func(&self, name: &str) -> Option<&GenFunc> {
        self.funcs.iter().find(|f| f.name == name)
    }

    pub fn render(&self, discipline: Discipline) -> String {
        let (s, h) = match discipline {
            Discipline::ZeroCost => ("id", "heap.U"),
            Discipline::NaCl => ("mem.U", "mem.U"),
        };
        let mut out = String::new();
        let _ = writeln!(out, "; generated library, seed {}", self.seed);
        match discipline {
            Discipline::ZeroCost => out.push_str(".layout zerocost-default\n"),
            Discipline::NaCl => out.push_str(".layout nacl-default\n"),
        }
        for (name, entries) in &self.tables {
            let _ = writeln!(out, ".table {name} = [{}]", entries.join(", "));
        }
        if !self.callbacks.is_empty() {
            let names: Vec<&str> = self.callbacks.iter().map(|c| c.name.as_str()).collect();
            let _ = writeln!(out, ".imports {}", names.join(", "));
        }
        for (a, v) in &self.heap {
            let _ = writeln!(out, ".mem {a} = {v}");
        }
        out.push_str(".lib\n");
        for f in &self.funcs {
            let _ = writeln!(
                out,
                ".func {} arity={}{}",
                f.name,
                f.arity,
                if f.exported { " exported" } else { "" }
            );
            for l in &f.body {
                let text = l.text.replace("{s}", s).replace("{h}", h);
                if text.ends_with(':') {
                    let _ = writeln!(out, "{text}");
                } else {
                    let _ = writeln!(out, "  {text}");
                }
            }
            out.push_str(".endfunc\n");
        }
        out.push_str(".app\n");
        for cb in &self.callbacks {
            let _ = writeln!(out, "{}:", cb.name);
            if cb.arity > 0 {
                out.push_str("  load r0, stack.T(sp - 1)\n  mov r0, r0 + 1\n");
            } else {
                out.push_str("  mov r0, 7\n");
            }
            out.push_str("  gateret\n");
        }
        out.push_str("main:\n  push T, 0\n  push T, 0\n");
        for i in 0..8 {
            let _ = writeln!(out, "  mov r{i}, {}", DRIVER_REG_BASE + i);
        }
        for (i, c) in self.driver.iter().enumerate() {
            for a in &c.args {
                let _ = writeln!(out, "  push T, {a}");
            }
            let _ = writeln!(out, "  gatecall {}, {}", c.args.len(), c.func);
            if !c.args.is_empty() {
                let _ = writeln!(out, "  mov sp, sp - {}", c.args.len());
            }
            let _ = writeln!(out, "  store heap.T({}), r0", 100 + i);
        }
        out
    }

    pub fn build(&self, discipline: Discipline) -> Result<GenProgram, ParseError> {
        let source = self.render(discipline);
        let program = parse_asm(&source)?;
        Ok(GenProgram {
            library: self.clone(),
            discipline,
            source,
            program,
        })
    }
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    name: String,
    arity: u64,
    /// Stack slots pushed since entry, outside call sequences.
    depth: u64,
    labels: usize,
    body: Vec<Line>,
}

impl Builder<'_> {
    fn push(&mut self, text: impl Into<String>) {
        self.body.push(Line::plain(text));
    }

    fn label(&mut self) -> String {
        self.labels += 1;
        format!("{}_l{}", self.name, self.labels)
    }

    fn place(&mut self, label: &str) {
        self.push(format!("{label}:"));
    }

    /// Sets `r1` and `r2` from the arguments or literals.
    fn load_inputs(&mut self) {
        for (i, r) in [(1, "r1"), (2, "r2"), (3, "r3")] {
            if i <= self.arity {
                self.push(format!("load {r}, {{s}}(sp - {})", self.depth + i));
            } else if i < 3 {
                let v = self.rng.random_range(0..4);
                self.push(format!("mov {r}, {v}"));
            }
        }
        if self.arity >= 3 {
            self.push("mov r2, r2 + r3");
        }
    }

    fn straight(&mut self, csrs: &[Reg]) {
        match self.rng.random_range(0..4) {
            0 => {
                let k = self.rng.random_range(1..9);
                self.push(format!("mov r2, r2 + {k}"));
            }
            1 => {
                let a = HEAP_READ_BASE + self.rng.random_range(0..32);
                self.push(format!("load r3, {{h}}({a})"));
                self.push("mov r2, r2 + r3");
            }
            2 => {
                let a = HEAP_WRITE_BASE + self.rng.random_range(0..32);
                self.push(format!("store {{h}}({a}), r2"));
            }
            _ => match csrs.choose(self.rng) {
                Some(c) => self.push(format!("mov r2, r2 + {c}")),
                None => self.push("mov r2, r2 * 2"),
            },
        }
    }

    fn diamond(&mut self) {
        let (a, b, join) = (self.label(), self.label(), self.label());
        self.push(format!("jmp code.U({a} + ({b} - {a}) * (1 - r1))"));
        self.place(&a);
        let k = self.rng.random_range(1..5);
        self.push(format!("mov r2, r2 + {k}"));
        self.push(format!("jmp code.U({join})"));
        self.place(&b);
        self.push("mov r2, r2 * 3");
        self.place(&join);
    }

    fn looped(&mut self) {
        let (test, body, exit) = (self.label(), self.label(), self.label());
        let count = self.rng.random_range(1..4);
        self.push(format!("mov r3, {count}"));
        self.place(&test);
        self.push(format!("jmp code.U({body} + ({exit} - {body}) * (1 - r3))"));
        self.place(&body);
        self.push("mov r2, r2 + 1");
        if self.rng.random_bool(0.5) {
            let a = HEAP_WRITE_BASE + self.rng.random_range(0..32);
            self.push(format!("store {{h}}({a}), r2"));
        }
        self.push("mov r3, r3 - 1");
        self.push(format!("jmp code.U({test})"));
        self.place(&exit);
    }

    fn pieces(&mut self, csrs: &[Reg]) {
        for _ in 0..self.rng.random_range(1..4) {
            match self.rng.random_range(0..4) {
                0 => self.diamond(),
                1 => self.looped(),
                _ => self.straight(csrs),
            }
        }
    }

    fn exit(&mut self, exported: bool) {
        let text = if exported { "gateret" } else { "ret code.U" };
        self.body.push(Line::tagged(text, Tag::Exit));
    }
}

/// What a caller may invoke.
enum Target {
    Direct(usize),
    Table(usize, u64, u64),
    Callback(usize),
}

pub fn gen_library(seed: u64, params: &GenParams) -> GenLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=params.max_funcs.max(1));
    let max_arity = params.max_arity.min(3);

    // Shapes first: kinds, arities and exports.
    let mut kinds = Vec::with_capacity(n);
    for i in 0..n {
        let kind = match rng.random_range(0..6) {
            0..=2 => FuncKind::Leaf,
            3 | 4 => FuncKind::Caller,
            _ if i > 0 => FuncKind::Fact,
            _ => FuncKind::Caller,
        };
        kinds.push(kind);
    }
    if params.force_callback && !kinds.contains(&FuncKind::Caller) {
        kinds[0] = FuncKind::Caller;
    }
    let forced_idx = params
        .force_callback
        .then(|| kinds.iter().position(|k| *k == FuncKind::Caller))
        .flatten();
    let arities: Vec<u64> = kinds
        .iter()
        .map(|k| match k {
            FuncKind::Fact => 1,
            _ => rng.random_range(0..=max_arity),
        })
        .collect();
    let mut exported = vec![false; n];
    let max_exports = params.max_calls.clamp(1, 4);
    if let Some(c) = forced_idx {
        exported[c] = true;
    }
    for i in 0..n {
        if kinds[i] != FuncKind::Fact
            && exported.iter().filter(|e| **e).count() < max_exports
            && (i == 0 || rng.random_bool(0.5))
        {
            exported[i] = true;
        }
    }

    let mut callbacks: Vec<GenCallback> = Vec::new();
    let mut tables: Vec<(String, Vec<String>)> = Vec::new();
    let names: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();
    let mut funcs = Vec::with_capacity(n);

    for i in 0..n {
        let mut b = Builder {
            rng: &mut rng,
            name: names[i].clone(),
            arity: arities[i],
            depth: 0,
            labels: 0,
            body: Vec::new(),
        };
        match kinds[i] {
            FuncKind::Leaf => {
                let mut csrs = vec![Reg::R4, Reg::R5, Reg::R6, Reg::R7];
                let saves = b.rng.random_range(0..=2);
                let mut saved = Vec::new();
                for _ in 0..saves {
                    let r = csrs.remove(b.rng.random_range(0..csrs.len()));
                    saved.push(r);
                }
                for r in &saved {
                    b.body.push(Line::tagged(format!("push U, {r}"), Tag::Save(*r)));
                    b.depth += 1;
                }
                for r in &saved {
                    let v = 100 * (i as u64 + 1) + r.gpr().unwrap() as u64;
                    b.push(format!("mov {r}, {v}"));
                }
                b.load_inputs();
                b.pieces(&saved);
                b.push("mov r0, r2 + r1");
                for r in saved.iter().rev() {
                    b.body.push(Line::tagged(format!("pop {r}, U"), Tag::Restore(*r)));
                }
                b.exit(exported[i]);
            }
            FuncKind::Fact => {
                let (rec, base) = (b.label(), b.label());
                b.push("load r1, {s}(sp - 1)");
                b.push(format!("jmp code.U({rec} + ({base} - {rec}) * (1 - r1))"));
                b.place(&rec);
                b.push("push U, r1 - 1");
                b.push(format!("call code.U({})", names[i]));
                b.push("mov sp, sp - 1");
                b.push("load r1, {s}(sp - 1)");
                b.push("mov r0, r0 * r1");
                b.exit(false);
                b.place(&base);
                b.push("mov r0, 1");
                b.exit(false);
            }
            FuncKind::Caller => {
                b.load_inputs();
                let internal: Vec<usize> = (i + 1..n).filter(|j| !exported[*j]).collect();
                let sites = b.rng.random_range(1..=2);
                for site in 0..sites {
                    let want_cb =
                        (forced_idx == Some(i) && site == 0) || b.rng.random_range(0..100) < params.callback_pct;
                    let target = if want_cb || internal.is_empty() {
                        let cb_arity = b.rng.random_range(0..=1);
                        let idx = callbacks.len();
                        callbacks.push(GenCallback {
                            name: format!("cb{idx}"),
                            arity: cb_arity,
                        });
                        Target::Callback(idx)
                    } else {
                        let j = *internal.choose(b.rng).unwrap();
                        let same: Vec<usize> = internal
                            .iter()
                            .copied()
                            .filter(|k| arities[*k] == arities[j] && kinds[*k] != FuncKind::Fact)
                            .collect();
                        if exported[i] && same.len() > 1 && same.contains(&j) && b.rng.random_bool(0.5) {
                            let t = tables.len();
                            tables.push((format!("t{t}"), same.iter().map(|k| names[*k].clone()).collect()));
                            let pos = same.iter().position(|k| *k == j).unwrap() as u64;
                            Target::Table(t, pos, arities[j])
                        } else {
                            Target::Direct(j)
                        }
                    };
                    let (arity, call) = match target {
                        Target::Direct(j) => (arities[j], format!("call code.U({})", names[j])),
                        Target::Table(t, pos, a) => (a, format!("call table.t{t}({pos})")),
                        Target::Callback(c) => (
                            callbacks[c].arity,
                            format!("gatecall {}, {}", callbacks[c].arity, callbacks[c].name),
                        ),
                    };
                    for _ in 0..arity {
                        let to_fact = matches!(target, Target::Direct(j) if kinds[j] == FuncKind::Fact);
                        let push = match to_fact {
                            true => {
                                let c = b.rng.random_range(1..5);
                                format!("push U, r1 - (r1 - {c})")
                            }
                            false => {
                                let k = b.rng.random_range(0..4);
                                format!("push U, r1 + {k}")
                            }
                        };
                        b.body.push(Line::tagged(push, Tag::ArgPush { site }));
                    }
                    b.body.push(Line::tagged(call, Tag::Call { site, arity }));
                    if arity > 0 {
                        b.push(format!("mov sp, sp - {arity}"));
                    }
                    b.push("mov r2, r0 + 1");
                    if b.arity >= 1 {
                        b.push("load r1, {s}(sp - 1)");
                    } else {
                        b.push("mov r1, 1");
                    }
                }
                b.pieces(&[]);
                b.push("mov r0, r2 + r1");
                b.exit(exported[i]);
            }
        }
        funcs.push(GenFunc {
            name: names[i].clone(),
            arity: arities[i],
            exported: exported[i],
            kind: kinds[i],
            body: b.body,
        });
    }

    let heap = (0..rng.random_range(0..4))
        .map(|_| (HEAP_READ_BASE + rng.random_range(0..32), rng.random_range(1..10)))
        .collect::<std::collections::BTreeMap<_, _>>()
        .into_iter()
        .collect();

    let exports: Vec<usize> = (0..n).filter(|i| exported[*i]).collect();
    let calls = rng.random_range(exports.len()..=params.max_calls.max(exports.len()));
    let mut order: Vec<usize> = exports.clone();
    while order.len() < calls {
        order.push(*exports.choose(&mut rng).unwrap());
    }
    let driver = order
        .into_iter()
        .map(|i| DriverCall {
            func: names[i].clone(),
            args: (0..arities[i]).map(|_| rng.random_range(0..6)).collect(),
        })
        .collect();

    GenLibrary {
        seed,
        funcs,
        tables,
        callbacks,
        heap,
        driver,
    }
}

pub fn gen_program(seed: u64, params: &GenParams, discipline: Discipline) -> GenProgram {
    gen_library(seed, params)
        .build(discipline)
        .expect("generated source parses")
}
