use proptest::prelude::*;

use gatelab::lang::{parse_asm, pretty_print, BinOp, CheckKind, Discipline, Expr, Privilege, Program, Reg};
use gatelab::machine::{eval_expr, run, MachineState};
use gatelab::properties::{gen_program, GenParams};
use gatelab::transitions::Strategy as Gates;

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0u64..1000).prop_map(Expr::Lit),
        (0usize..8).prop_map(|i| Expr::Reg(Reg::from_gpr(i))),
        Just(Expr::Reg(Reg::Sp)),
    ];
    leaf.prop_recursive(4, 16, 2, |inner| {
        (
            prop_oneof![Just(BinOp::Add), Just(BinOp::Monus), Just(BinOp::Mul)],
            inner.clone(),
            inner,
        )
            .prop_map(|(op, a, b)| Expr::bin(op, a, b))
    })
}

fn layouts() -> Vec<Program> {
    [".layout nacl-default\n", ".layout zerocost-default\n"]
        .iter()
        .map(|l| {
            parse_asm(&format!(
                "{l}.lib\n.func f arity=0 exported\nmov r0, 0\ngateret\n.endfunc\n"
            ))
            .unwrap()
        })
        .collect()
}

proptest! {
    #[test]
    fn generated_programs_round_trip(seed in 0u64..100_000, nacl in any::<bool>()) {
        let discipline = if nacl { Discipline::NaCl } else { Discipline::ZeroCost };
        let g = gen_program(seed, &GenParams::default(), discipline);
        let text = pretty_print(&g.program);
        let q = parse_asm(&text).unwrap();
        prop_assert_eq!(&q, &g.program);
        prop_assert_eq!(pretty_print(&q), text);
    }

    #[test]
    fn expressions_round_trip(e in expr()) {
        let src = format!(".app\nmain: mov r1, {e}\n");
        let p = parse_asm(&src).unwrap();
        let (_, cmd) = p.instr(p.entry).unwrap();
        prop_assert_eq!(cmd.to_string(), format!("mov r1, {e}"));
        prop_assert_eq!(parse_asm(&pretty_print(&p)).unwrap(), p);
    }

    #[test]
    fn monus_clamps(a in any::<u64>(), b in any::<u64>()) {
        let s = MachineState::default();
        let v = eval_expr(&s, &Expr::bin(BinOp::Monus, Expr::Lit(a), Expr::Lit(b)));
        prop_assert_eq!(v, a.saturating_sub(b));
    }

    #[test]
    fn runs_are_deterministic(seed in 0u64..10_000) {
        let g = gen_program(seed, &GenParams::default(), Discipline::ZeroCost);
        let a = run(&g.program, Gates::ZeroCost, 10_000);
        let b = run(&g.program, Gates::ZeroCost, 10_000);
        prop_assert_eq!(a.steps, b.steps);
        prop_assert_eq!(a.last, b.last);
    }
}

#[test]
fn guards_are_partial_identities() {
    for p in layouts() {
        for a in 0..1024 {
            for priv_ in [Privilege::Trusted, Privilege::Untrusted] {
                let heap = CheckKind::Heap(priv_).apply(&p, a);
                let stack = CheckKind::Stack(priv_).apply(&p, a);
                let mem = CheckKind::Mem(priv_).apply(&p, a);
                for r in [heap, stack, mem].into_iter().flatten() {
                    assert_eq!(r, a);
                }
                assert_eq!(mem.is_some(), heap.is_some() || stack.is_some(), "addr {a}");
            }
            assert_eq!(CheckKind::Id.apply(&p, a), Some(a));
            let heaps = [Privilege::Trusted, Privilege::Untrusted]
                .iter()
                .filter(|q| CheckKind::Heap(**q).apply(&p, a).is_some())
                .count();
            assert!(heaps <= 1, "addr {a} in both heaps");
        }
    }
}

#[test]
fn nacl_regions_are_disjoint() {
    let p = &layouts()[0];
    for a in 0..1024 {
        let owners = [Privilege::Trusted, Privilege::Untrusted]
            .iter()
            .filter(|q| CheckKind::Mem(**q).apply(p, a).is_some())
            .count();
        assert!(owners <= 1, "addr {a}");
    }
}
