//! End-to-end acceptance suite. Prints one line per criterion and exits
//! non-zero if any fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;

use gatelab::lang::{Command, Discipline, Program};
use gatelab::machine::{run, Trace};
use gatelab::monitor::{run_monitored_lockstep, MonitoredTrace, Policy, Reason};
use gatelab::properties::{
    attack_instance, check_integrity, check_strong_ni, gen_library, gen_program, mutate, GenLibrary, GenParams,
    MutationKind,
};
use gatelab::transitions::{gate_cost, gateret_cost, Direction, Strategy};
use gatelab::verifier::{verify_library, Check};
use gatelab_cli::{cmd_check, cmd_monitor, cmd_run, cmd_verify, load, CheckOptions, Property};

const FUEL: u64 = 10_000;

type Outcome = Result<String, String>;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn programs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../programs")
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn program(name: &str) -> Program {
    load(&programs_dir().join(name)).unwrap_or_else(|r| panic!("{}", r.text))
}

/// Monitored ZeroCost run, checked against the concrete machine step for step.
fn monitored(p: &Program) -> Result<MonitoredTrace, String> {
    let (mt, mismatch) = run_monitored_lockstep(p, Policy::NaclDefault, FUEL);
    if let Some(m) = mismatch {
        return Err(format!("lockstep mismatch: {m}"));
    }
    let concrete = run(p, Strategy::ZeroCost, FUEL);
    let erased = mt.erased(p);
    let agree = if mt.is_error() {
        concrete.steps.starts_with(&erased.steps)
    } else {
        concrete.steps == erased.steps && concrete.outcome == erased.outcome && concrete.last == erased.last
    };
    if agree {
        Ok(mt)
    } else {
        Err("erased trace differs from the concrete run".into())
    }
}

fn attack_suite() -> Vec<(MutationKind, u64, GenLibrary)> {
    let params = GenParams::default();
    MutationKind::ALL
        .iter()
        .flat_map(|&k| (0..100).map(move |s| (k, s)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(k, s)| (k, s, attack_instance(k, s, &params)))
        .collect()
}

fn criterion_1() -> Outcome {
    let params = GenParams::default();
    let failures: Vec<String> = (0..1000u64)
        .into_par_iter()
        .filter_map(|seed| {
            let g = gen_program(seed, &params, Discipline::ZeroCost);
            if !verify_library(&g.program).passed() {
                return None;
            }
            let mt = match monitored(&g.program) {
                Ok(mt) => mt,
                Err(e) => return Some(format!("seed {seed}: {e}")),
            };
            if let Some(e) = mt.error() {
                return Some(format!("seed {seed}: {e}"));
            }
            let integrity = check_integrity(&g.program, &mt.erased(&g.program));
            (!integrity.passed()).then(|| format!("seed {seed}: integrity {integrity:?}"))
        })
        .collect();
    match failures.first() {
        None => Ok("1000 seeds, 0 overlay errors, 0 integrity violations".into()),
        Some(f) => Err(format!("{} failures, first {f}", failures.len())),
    }
}

fn criterion_2(suite: &[(MutationKind, u64, GenLibrary)]) -> Outcome {
    let failures: Vec<String> = suite
        .par_iter()
        .filter_map(|(k, s, lib)| {
            let p = lib.build(Discipline::ZeroCost).expect("mutant parses").program;
            if !verify_library(&p).has_check(k.expected_check()) {
                return Some(format!("{k} #{s}: verifier missed {}", k.expected_check()));
            }
            match monitored(&p) {
                Ok(mt) if mt.error().is_some_and(|e| e.reason == k.expected_reason()) => None,
                Ok(mt) => Some(format!("{k} #{s}: monitor outcome {}", mt.outcome)),
                Err(e) => Some(format!("{k} #{s}: {e}")),
            }
        })
        .collect();
    let caught = suite.len() - failures.len();
    if failures.is_empty() && suite.len() == 900 {
        Ok(format!("{caught}/900 rejected and caught"))
    } else {
        Err(format!("{caught}/{}, first {:?}", suite.len(), failures.first()))
    }
}

fn criterion_3(suite: &[(MutationKind, u64, GenLibrary)]) -> Outcome {
    let failures: Vec<String> = suite
        .par_iter()
        .filter_map(|(k, s, lib)| {
            let p = lib.build(Discipline::NaCl).expect("mutant parses").program;
            let t = run(&p, Strategy::NaClHeavy, FUEL);
            let integrity = check_integrity(&p, &t);
            if !integrity.passed() {
                return Some(format!("{k} #{s}: integrity {integrity:?}"));
            }
            match check_strong_ni(&p, Policy::NaclDefault, Strategy::NaClHeavy, *s, FUEL) {
                Ok(v) if v.passed() => None,
                Ok(v) => Some(format!("{k} #{s}: ni {v}")),
                Err(e) => Some(format!("{k} #{s}: ni {e}")),
            }
        })
        .collect();
    if failures.is_empty() && suite.len() == 900 {
        Ok("900/900 shielded".into())
    } else {
        Err(format!("{} failures, first {:?}", failures.len(), failures.first()))
    }
}

fn criterion_4() -> Outcome {
    let params = GenParams::default();
    let verified: Vec<u64> = (0..)
        .filter(|&s| verify_library(&gen_program(s, &params, Discipline::ZeroCost).program).passed())
        .take(200)
        .collect();
    let runs: Vec<(u64, u64)> = verified.iter().flat_map(|&s| (0..3).map(move |j| (s, j))).collect();
    let failures: Vec<String> = runs
        .par_iter()
        .filter_map(|&(s, j)| {
            let p = gen_program(s, &params, Discipline::ZeroCost).program;
            if let Err(e) = monitored(&p) {
                return Some(format!("seed {s}: {e}"));
            }
            match check_strong_ni(&p, Policy::NaclDefault, Strategy::ZeroCost, s * 3 + j, FUEL) {
                Ok(v) if v.passed() => None,
                Ok(v) => Some(format!("seed {s}/{j}: {v}")),
                Err(e) => Some(format!("seed {s}/{j}: {e}")),
            }
        })
        .collect();
    if !failures.is_empty() {
        return Err(format!("{} NI failures, first {}", failures.len(), failures[0]));
    }

    let leaks: Vec<bool> = (0..200u64)
        .into_par_iter()
        .map(|s| {
            let kind = if s % 2 == 0 {
                MutationKind::ReadUninitScratch
            } else {
                MutationKind::LeakSecretToLibHeap
            };
            let lib = mutate(&gen_library(s, &params), kind, s).expect("entry insertion always applies");
            let p = lib.build(Discipline::ZeroCost).expect("mutant parses").program;
            check_strong_ni(&p, Policy::NaclDefault, Strategy::ZeroCost, s, FUEL).is_ok_and(|v| !v.passed())
        })
        .collect();
    let teeth = leaks.iter().filter(|x| **x).count();
    if teeth >= 50 {
        Ok(format!("{}/600 pass, {teeth}/200 leaking mutants fail", runs.len()))
    } else {
        Err(format!("only {teeth} leaking mutants fail"))
    }
}

/// Refinement is asserted inside every monitored run of criteria 1, 2 and 4;
/// this adds the hand-written programs.
fn criterion_5() -> Outcome {
    let mut n = 0;
    for name in [
        "library_helper.gal",
        "bad_good.gal",
        "csr_clobber.gal",
        "lib_add5.gal",
        "callback.gal",
    ] {
        monitored(&program(name)).map_err(|e| format!("{name}: {e}"))?;
        n += 1;
    }
    Ok(format!(
        "erased traces equal concrete runs ({n} examples plus criteria 1, 2, 4)"
    ))
}

/// Line tally of the heavyweight app-to-library springboard template:
/// each template line is one micro-op, plus the gatecall's return-address push.
fn springboard_tally(n: u64) -> u64 {
    let csrs = 4;
    let cleared = 8;
    let fixed = [
        1, // load ctx pointer
        1, // load saved trusted sp
        1, // bump ctx by argument count
        1, // reserve the saved-sp cell
        2, // compute and store the trusted sp
        1, // switch to the untrusted stack
        1, // publish the new ctx
        1, // jump to the entry
        1, // return-address push
    ];
    fixed.iter().sum::<u64>() + 2 * csrs + 3 * n + cleared
}

/// Line tally of the matching trampoline.
fn trampoline_tally() -> u64 {
    let csrs = 4;
    let fixed = [
        1, // load ctx pointer
        1, // load saved trusted sp
        1, // load return address
        2, // pop ctx
        1, // store ctx
        1, // restore sp
        1, // return
    ];
    fixed.iter().sum::<u64>() + 2 * csrs
}

fn criterion_6() -> Outcome {
    let frozen = [(0, 26), (1, 29), (2, 32), (4, 38)];
    let p = program("gate_costs.gal");
    let conv = &p.conv;
    let mut prev = 0;
    for (n, expect) in frozen {
        let zero = gate_cost(Strategy::ZeroCost, Direction::AppToLib, n, conv);
        let nacl = gate_cost(Strategy::NaClHeavy, Direction::AppToLib, n, conv);
        if zero != 1 || nacl != springboard_tally(n) || nacl != expect {
            return Err(format!(
                "n={n}: zero {zero}, nacl {nacl}, tally {}",
                springboard_tally(n)
            ));
        }
        if nacl <= prev || nacl <= zero {
            return Err(format!("n={n}: cost {nacl} not increasing"));
        }
        prev = nacl;
    }
    if gateret_cost(Strategy::NaClHeavy, Direction::AppToLib, conv) != trampoline_tally() {
        return Err("trampoline cost differs from tally".into());
    }

    let report = cmd_run(&p, Strategy::NaClHeavy, FUEL);
    let uses = report
        .records
        .last()
        .and_then(|r| r["gate_uses"].as_array().cloned())
        .ok_or("missing gate records")?;
    let measured: Vec<u64> = uses.iter().map(|u| u["micro_ops"].as_u64().unwrap()).collect();
    let expected: Vec<u64> = frozen.iter().flat_map(|(_, c)| [*c, 16]).collect();
    if measured != expected || report.exit != 0 {
        return Err(format!("measured {measured:?}, expected {expected:?}"));
    }
    let zero = cmd_run(&p, Strategy::ZeroCost, FUEL);
    let zero_ops: Vec<u64> = zero.records.last().unwrap()["gate_uses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|u| u["micro_ops"].as_u64().unwrap())
        .collect();
    if zero_ops != vec![1; 8] {
        return Err(format!("zero-cost gates measured {zero_ops:?}"));
    }
    Ok(format!("nacl gate micro-ops {measured:?}, zero-cost 1 each"))
}

fn golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!("{name} differs:\n{actual}"))
    }
}

fn criterion_7() -> Outcome {
    // Library helper scribbling over its caller's frame.
    let p = program("library_helper.gal");
    let v = verify_library(&p);
    let helper = v.functions.iter().find(|f| f.name == "library_helper").unwrap();
    if v.passed() || helper.violations.iter().all(|x| x.check != Check::FrameProtection) {
        return Err(format!("helper not rejected:\n{v}"));
    }
    let mt = monitored(&p)?;
    if mt.error().map(|e| e.reason) != Some(Reason::WriteOutsideFrame) {
        return Err(format!("helper monitor outcome {}", mt.outcome));
    }
    golden("library_helper.verify.txt", &cmd_verify(&p).text)?;
    golden(
        "library_helper.monitor.txt",
        &cmd_monitor(&p, Policy::NaclDefault, FUEL).text,
    )?;

    // Uninitialized operand in bad_func.
    let p = program("bad_good.gal");
    let v = verify_library(&p);
    let good = v.functions.iter().find(|f| f.name == "good_func").unwrap();
    let bad = v.functions.iter().find(|f| f.name == "bad_func").unwrap();
    let flagged: Vec<(u64, Check)> = bad.violations.iter().map(|x| (x.pc, x.check)).collect();
    let operand_pc = p.func_named("bad_func").unwrap().entry + 2;
    if !good.passed() || flagged != vec![(operand_pc, Check::InitBeforeUse)] {
        return Err(format!("bad_func verdict:\n{v}"));
    }
    if !matches!(p.instr(operand_pc), Some((_, Command::Mov(..)))) {
        return Err("flagged pc is not the move".into());
    }
    golden("bad_good.verify.txt", &cmd_verify(&p).text)?;

    // Callee-save register clobbered across the gate.
    let p = program("csr_clobber.gal");
    let mt = monitored(&p)?;
    if mt.error().map(|e| e.reason) != Some(Reason::CsrNotRestored) {
        return Err(format!("clobber monitor outcome {}", mt.outcome));
    }
    let t: Trace = run(&p, Strategy::ZeroCost, FUEL);
    if check_integrity(&p, &t).csr.is_empty() {
        return Err("clobber passes csr integrity".into());
    }
    golden(
        "csr_clobber.monitor.txt",
        &cmd_monitor(&p, Policy::NaclDefault, FUEL).text,
    )?;
    let opts = CheckOptions {
        gates: Strategy::ZeroCost,
        policy: Policy::NaclDefault,
        seed: 0,
        fuel: FUEL,
    };
    golden(
        "csr_clobber.check.txt",
        &cmd_check(&p, &[Property::Csr, Property::Ra], &opts).text,
    )?;

    // Reports are stable across repeated runs.
    let again = cmd_verify(&program("library_helper.gal")).text;
    if again != cmd_verify(&program("library_helper.gal")).text {
        return Err("verify report not stable".into());
    }
    Ok("helper, bad_func and csr clobber reproduced".into())
}

fn criterion_8() -> Outcome {
    let params = GenParams::default();
    let (rejected, errors): (Vec<u64>, Vec<u64>) = (0..5000u64)
        .into_par_iter()
        .map(|s| {
            let p = gen_program(s, &params, Discipline::ZeroCost).program;
            let ok = verify_library(&p).passed();
            let (mt, _) = run_monitored_lockstep(&p, Policy::NaclDefault, FUEL);
            (
                if ok { None } else { Some(s) },
                if mt.is_error() { Some(s) } else { None },
            )
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((Vec::new(), Vec::new()), |(mut r, mut e), (a, b)| {
            r.extend(a);
            e.extend(b);
            (r, e)
        });
    if rejected.is_empty() && errors.is_empty() {
        Ok("5000 seeds, 0 rejections, 0 monitor errors".into())
    } else {
        Err(format!("rejected {rejected:?}, monitor errors {errors:?}"))
    }
}

fn main() -> ExitCode {
    let suite = attack_suite();
    let criteria: Vec<Criterion> = vec![
        ("differential soundness", Box::new(criterion_1)),
        ("attack suite", Box::new(|| criterion_2(&suite))),
        ("nacl shield", Box::new(|| criterion_3(&suite))),
        ("noninterference", Box::new(criterion_4)),
        ("refinement", Box::new(criterion_5)),
        ("transition costs", Box::new(criterion_6)),
        ("worked examples", Box::new(criterion_7)),
        ("false-positive guard", Box::new(criterion_8)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {} ({name}): pass: {msg} [{secs:.2}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL: {msg} [{secs:.2}s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
