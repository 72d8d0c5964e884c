use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::domain::ValueSet;
use crate::lang::{Command, FuncMeta, Program};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: u64,
    /// One past the last instruction.
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cfg {
    pub func: String,
    pub blocks: Vec<Block>,
    /// Edges between block indices.
    pub edges: Vec<(usize, usize)>,
    /// Instruction-level successors; calls continue at the next instruction.
    pub succs: BTreeMap<u64, Vec<u64>>,
    /// Rejections: `(pc, message)`.
    pub errors: Vec<(u64, String)>,
}

impl Cfg {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn build_cfg(program: &Program, func: &FuncMeta) -> Cfg {
    let mut succs = BTreeMap::new();
    let mut errors = Vec::new();
    let mut leaders = BTreeSet::from([func.start, func.entry]);

    for pc in func.instrs() {
        let Some((_, cmd)) = program.instr(pc) else {
            continue;
        };
        let mut out = Vec::new();
        let fallthrough = |errors: &mut Vec<(u64, String)>, out: &mut Vec<u64>| {
            if func.contains(pc + 1) {
                out.push(pc + 1);
            } else {
                errors.push((pc, "execution falls off the end of the function".to_string()));
            }
        };
        match cmd {
            Command::Jmp(k, e) => {
                match ValueSet::of(e) {
                    ValueSet::Top => errors.push((pc, format!("jump target `{e}` is not statically known"))),
                    ValueSet::Finite(vs) => {
                        for v in vs {
                            match k.apply(program, v) {
                                None => errors.push((pc, format!("jump target {v} is undefined under {k}"))),
                                Some(t) if !func.contains(t) => {
                                    errors.push((pc, format!("cross-function jump to {t}")));
                                }
                                Some(t) => {
                                    out.push(t);
                                    leaders.insert(t);
                                }
                            }
                        }
                    }
                }
                leaders.insert(pc + 1);
            }
            Command::Ret(_) | Command::GateRet => {
                leaders.insert(pc + 1);
            }
            Command::Call(..) | Command::GateCall(..) => {
                fallthrough(&mut errors, &mut out);
                leaders.insert(pc + 1);
            }
            _ => fallthrough(&mut errors, &mut out),
        }
        out.sort_unstable();
        out.dedup();
        succs.insert(pc, out);
    }

    let leaders: Vec<u64> = leaders.into_iter().filter(|l| func.contains(*l)).collect();
    let blocks: Vec<Block> = leaders
        .iter()
        .enumerate()
        .map(|(i, &start)| Block {
            start,
            end: leaders.get(i + 1).copied().unwrap_or(func.end),
        })
        .collect();
    let block_of = |pc: u64| blocks.partition_point(|b| b.end <= pc);
    let mut edges = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        for &t in succs.get(&(b.end - 1)).into_iter().flatten() {
            edges.push((i, block_of(t)));
        }
    }
    Cfg {
        func: func.name.clone(),
        blocks,
        edges,
        succs,
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_asm;

    fn cfg_of(src: &str, name: &str) -> Cfg {
        let p = parse_asm(src).unwrap();
        let f = p.func_named(name).unwrap().clone();
        build_cfg(&p, &f)
    }

    #[test]
    fn straight_line_is_one_block() {
        let c = cfg_of(
            ".lib\n.func f arity=0 exported\nmov r1, 1\nmov r2, 2\nmov r0, r1 + r2\ngateret\n.endfunc\n",
            "f",
        );
        assert!(c.is_ok());
        assert_eq!(c.blocks, vec![Block { start: 0, end: 4 }]);
        assert!(c.edges.is_empty());
    }

    #[test]
    fn diamond_has_four_blocks_and_edges() {
        let src = "\
.lib
.func f arity=0 exported
  mov r1, 1
  jmp code.U(la + (lb - la) * (1 - r1))
la:
  mov r0, 1
  jmp code.U(join)
lb:
  mov r0, 2
join:
  gateret
.endfunc
";
        let c = cfg_of(src, "f");
        assert!(c.is_ok(), "{:?}", c.errors);
        assert_eq!(c.blocks.len(), 4);
        assert_eq!(c.edges.len(), 4);
    }

    #[test]
    fn cross_function_jump_rejected() {
        let src = ".lib\n.func g arity=0\nmov r0, 0\nret code.U\n.endfunc\n.func f arity=0 exported\njmp code.U(g)\n.endfunc\n";
        let c = cfg_of(src, "f");
        assert_eq!(c.errors, vec![(2, "cross-function jump to 0".to_string())]);
    }

    #[test]
    fn falling_off_the_end_rejected() {
        let c = cfg_of(".lib\n.func f arity=0 exported\nmov r0, 0\n.endfunc\n", "f");
        assert_eq!(c.errors.len(), 1);
    }
}
