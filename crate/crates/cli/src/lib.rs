//! Subcommands of the `gatelab` binary, as functions returning their report
//! and exit status.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use gatelab::lang::{parse_asm, well_formed, Command, Discipline, Privilege, Program};
use gatelab::machine::{run, Outcome, Trace};
use gatelab::monitor::{run_monitored_lockstep, MonitorOutcome, Policy};
use gatelab::properties::{
    attack_instance, check_integrity, check_strong_ni, gen_program, wb_segments, GenParams, MutationKind, NiError,
};
use gatelab::transitions::{gate_cost, gateret_cost, Direction, Strategy};
use gatelab::verifier::verify_library;

/// Version of the line-delimited record schema.
pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Records,
}

/// A command's result in both output formats.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub exit: i32,
    pub text: String,
    pub records: Vec<Value>,
}

impl Report {
    fn usage(msg: impl Into<String>) -> Report {
        let msg = msg.into();
        Report {
            exit: EXIT_USAGE,
            records: vec![record("error", json!({ "message": msg }))],
            text: format!("error: {msg}\n"),
        }
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.text.clone(),
            Format::Records => self.records.iter().map(|r| format!("{r}\n")).collect(),
        }
    }
}

fn record(kind: &str, body: Value) -> Value {
    let mut v = json!({ "schema": SCHEMA_VERSION, "record": kind });
    if let (Some(obj), Value::Object(fields)) = (v.as_object_mut(), body) {
        obj.extend(fields);
    }
    v
}

fn to_value(x: &impl Serialize) -> Value {
    serde_json::to_value(x).expect("report types serialize")
}

pub fn load(path: &Path) -> Result<Program, Report> {
    let src =
        std::fs::read_to_string(path).map_err(|e| Report::usage(format!("cannot read {}: {e}", path.display())))?;
    parse_asm(&src).map_err(|e| Report::usage(format!("{}: {e}", path.display())))
}

fn discipline_of(gates: Strategy) -> Discipline {
    match gates {
        Strategy::ZeroCost => Discipline::ZeroCost,
        Strategy::NaClHeavy => Discipline::NaCl,
    }
}

pub fn cmd_asm(program: &Program, gates: Strategy) -> Report {
    let discipline = discipline_of(gates);
    let violations = well_formed(program, discipline);
    let mut text = format!(
        "{} instructions, {} functions, entry {}\n",
        program.code.len(),
        program.funcs.len(),
        program.entry
    );
    for v in &violations {
        let _ = writeln!(text, "{v}");
    }
    let ok = violations.is_empty();
    let _ = writeln!(text, "well-formed ({gates}): {}", if ok { "yes" } else { "no" });
    Report {
        exit: if ok { EXIT_OK } else { EXIT_FAIL },
        text,
        records: vec![record(
            "well-formed",
            json!({ "gates": gates.to_string(), "ok": ok, "violations": to_value(&violations) }),
        )],
    }
}

#[derive(Serialize)]
struct GateUse {
    step: usize,
    command: String,
    direction: String,
    micro_ops: u32,
    expected: u64,
}

fn gate_uses(program: &Program, trace: &Trace) -> Vec<GateUse> {
    trace
        .steps
        .iter()
        .enumerate()
        .filter(|(_, r)| r.command.is_gate())
        .map(|(i, r)| {
            let direction = match (&r.command, r.privilege) {
                (Command::GateCall(..), p) => Direction::of_call(p),
                (_, Privilege::Untrusted) => Direction::AppToLib,
                (_, Privilege::Trusted) => Direction::LibToApp,
            };
            let expected = match r.command {
                Command::GateCall(n, _) => gate_cost(trace.strategy, direction, n, &program.conv),
                _ => gateret_cost(trace.strategy, direction, &program.conv),
            };
            GateUse {
                step: i,
                command: r.command.to_string(),
                direction: format!("{direction:?}"),
                micro_ops: r.micro_ops,
                expected,
            }
        })
        .collect()
}

fn outcome_ok(o: &Outcome) -> bool {
    *o == Outcome::Halted
}

pub fn cmd_run(program: &Program, gates: Strategy, fuel: u64) -> Report {
    let trace = run(program, gates, fuel);
    let mut text = String::new();
    let mut records = Vec::new();
    for (i, r) in trace.steps.iter().enumerate() {
        let _ = write!(text, "step {i}: pc {} {} {}", r.pc, r.privilege, r.command);
        if r.command.is_gate() {
            let _ = write!(text, "  [{} micro-ops]", r.micro_ops);
        }
        text.push('\n');
        records.push(record("step", json!({ "index": i, "step": to_value(r) })));
    }
    let uses = gate_uses(program, &trace);
    let _ = writeln!(text, "outcome: {}", trace.outcome);
    let _ = writeln!(text, "steps: {}, micro-ops: {}", trace.len(), trace.micro_ops());
    for g in &uses {
        let _ = writeln!(
            text,
            "gate at step {}: {} ({}) {} micro-ops, cost model {}",
            g.step, g.command, g.direction, g.micro_ops, g.expected
        );
    }
    let r = &trace.last;
    let _ = writeln!(
        text,
        "final: pc {} sp {} regs [{}]",
        r.pc,
        r.sp,
        r.regs.map(|v| v.to_string()).join(", ")
    );
    records.push(record(
        "run",
        json!({
            "gates": gates.to_string(),
            "outcome": to_value(&trace.outcome),
            "steps": trace.len(),
            "micro_ops": trace.micro_ops(),
            "gate_uses": to_value(&uses),
            "final": to_value(&trace.last),
        }),
    ));
    Report {
        exit: if outcome_ok(&trace.outcome) { EXIT_OK } else { EXIT_FAIL },
        text,
        records,
    }
}

pub fn cmd_monitor(program: &Program, policy: Policy, fuel: u64) -> Report {
    let (trace, mismatch) = run_monitored_lockstep(program, policy, fuel);
    let mut text = String::new();
    let mut records = Vec::new();
    for (i, (r, f)) in trace.steps.iter().zip(&trace.frames).enumerate() {
        let _ = writeln!(
            text,
            "step {i}: pc {} {} {}  (frame {}, base {})",
            r.pc, r.privilege, r.command, f.depth, f.base
        );
        records.push(record(
            "step",
            json!({ "index": i, "step": to_value(r), "frame": to_value(f) }),
        ));
    }
    let _ = writeln!(text, "outcome: {}", trace.outcome);
    if let Some(m) = &mismatch {
        let _ = writeln!(text, "{m}");
    }
    records.push(record(
        "monitor",
        json!({
            "policy": policy.to_string(),
            "outcome": to_value(&trace.outcome),
            "steps": trace.steps.len(),
            "refinement_mismatch": to_value(&mismatch),
        }),
    ));
    let ok = trace.outcome == MonitorOutcome::Halted && mismatch.is_none();
    Report {
        exit: if ok { EXIT_OK } else { EXIT_FAIL },
        text,
        records,
    }
}

pub fn cmd_verify(program: &Program) -> Report {
    let report = verify_library(program);
    Report {
        exit: if report.passed() { EXIT_OK } else { EXIT_FAIL },
        text: format!("{report}\n"),
        records: report
            .functions
            .iter()
            .map(|f| record("function", to_value(f)))
            .chain([record("library", json!({ "passed": report.passed() }))])
            .collect(),
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Property {
    Wb,
    Csr,
    Ra,
    Ni,
}

impl std::str::FromStr for Property {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wb" => Ok(Property::Wb),
            "csr" => Ok(Property::Csr),
            "ra" => Ok(Property::Ra),
            "ni" => Ok(Property::Ni),
            _ => Err(format!("unknown property `{s}` (expected wb|csr|ra|ni)")),
        }
    }
}

impl Property {
    pub const DEFAULT: [Property; 3] = [Property::Csr, Property::Ra, Property::Ni];

    fn name(self) -> &'static str {
        match self {
            Property::Wb => "wb",
            Property::Csr => "csr",
            Property::Ra => "ra",
            Property::Ni => "ni",
        }
    }
}

pub struct CheckOptions {
    pub gates: Strategy,
    pub policy: Policy,
    pub seed: u64,
    pub fuel: u64,
}

pub fn cmd_check(program: &Program, props: &[Property], opts: &CheckOptions) -> Report {
    let trace = run(program, opts.gates, opts.fuel);
    let integrity = check_integrity(program, &trace);
    let mut text = String::new();
    let mut records = Vec::new();
    let mut ok = true;
    for p in props {
        let (passed, lines, body) = match p {
            Property::Wb => {
                let segs = wb_segments(&trace);
                let lines = segs
                    .iter()
                    .map(|s| {
                        format!(
                            "segment: gatecall step {} .. gateret step {} (depth {})",
                            s.call, s.ret, s.depth
                        )
                    })
                    .collect();
                (true, lines, json!({ "segments": to_value(&segs) }))
            }
            Property::Csr => (
                integrity.csr.is_empty(),
                integrity.csr.iter().map(|v| v.to_string()).collect(),
                json!({ "violations": to_value(&integrity.csr) }),
            ),
            Property::Ra => (
                integrity.ra.is_empty(),
                integrity.ra.iter().map(|v| v.to_string()).collect(),
                json!({ "violations": to_value(&integrity.ra) }),
            ),
            Property::Ni => match check_strong_ni(program, opts.policy, opts.gates, opts.seed, opts.fuel) {
                Ok(v) => (v.passed(), vec![v.to_string()], json!({ "verdict": to_value(&v) })),
                Err(NiError::NoGatecall) => (
                    true,
                    vec!["skipped: no trusted gatecall".to_string()],
                    json!({ "verdict": "skipped" }),
                ),
            },
        };
        ok &= passed;
        let _ = writeln!(text, "{}: {}", p.name(), if passed { "pass" } else { "fail" });
        for l in &lines {
            let _ = writeln!(text, "  {l}");
        }
        let mut rec = record("property", json!({ "property": p.name(), "passed": passed }));
        if let (Some(o), Value::Object(b)) = (rec.as_object_mut(), body) {
            o.extend(b);
        }
        records.push(rec);
    }
    Report {
        exit: if ok { EXIT_OK } else { EXIT_FAIL },
        text,
        records,
    }
}

/// Parses `key=value` pairs (`funcs`, `arity`, `calls`, `callbacks`) into
/// generator parameters.
pub fn parse_size(text: &str) -> Result<GenParams, String> {
    let mut p = GenParams::default();
    for item in text.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, found `{item}`"))?;
        let n: u64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
        match k {
            "funcs" if n >= 1 => p.max_funcs = n as usize,
            "arity" if n <= 3 => p.max_arity = n,
            "calls" if n >= 1 => p.max_calls = n as usize,
            "callbacks" if n <= 100 => p.callback_pct = n as u32,
            _ => return Err(format!("invalid size parameter `{item}`")),
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, Serialize)]
struct SeedResult {
    seed: u64,
    verified: bool,
    monitor_error: Option<String>,
    refinement: bool,
    csr: bool,
    ra: bool,
    ni: bool,
    attack: MutationKind,
    attack_rejected: bool,
    attack_caught: bool,
    attack_shielded: bool,
}

impl SeedResult {
    fn failures(&self) -> Vec<&'static str> {
        let checks = [
            (self.verified, "false-positive"),
            (self.monitor_error.is_none(), "monitor"),
            (self.refinement, "refinement"),
            (self.csr, "csr-integrity"),
            (self.ra, "ra-integrity"),
            (self.ni, "strong-ni"),
            (self.attack_rejected, "attack-verifier"),
            (self.attack_caught, "attack-monitor"),
            (self.attack_shielded, "nacl-shield"),
        ];
        checks.iter().filter(|(ok, _)| !ok).map(|(_, n)| *n).collect()
    }
}

const FUZZ_FUEL: u64 = 10_000;

fn fuzz_seed(seed: u64, params: &GenParams) -> SeedResult {
    let g = gen_program(seed, params, Discipline::ZeroCost);
    let verified = verify_library(&g.program).passed();
    let (mt, mismatch) = run_monitored_lockstep(&g.program, Policy::NaclDefault, FUZZ_FUEL);
    let concrete = run(&g.program, Strategy::ZeroCost, FUZZ_FUEL);
    let refinement = mismatch.is_none() && (mt.is_error() || concrete.steps == mt.steps);
    let integrity = check_integrity(&g.program, &mt.erased(&g.program));
    let ni = check_strong_ni(&g.program, Policy::NaclDefault, Strategy::ZeroCost, seed, FUZZ_FUEL)
        .map_or(true, |v| v.passed());

    let attack = MutationKind::ALL[(seed % MutationKind::ALL.len() as u64) as usize];
    let lib = attack_instance(attack, seed, params);
    let zero = lib.build(Discipline::ZeroCost).expect("mutant parses");
    let attack_rejected = verify_library(&zero.program).has_check(attack.expected_check());
    let attack_caught = run_monitored_lockstep(&zero.program, Policy::NaclDefault, FUZZ_FUEL)
        .0
        .error()
        .is_some_and(|e| e.reason == attack.expected_reason());
    let nacl = lib.build(Discipline::NaCl).expect("mutant parses");
    let nt = run(&nacl.program, Strategy::NaClHeavy, FUZZ_FUEL);
    let attack_shielded = check_integrity(&nacl.program, &nt).passed()
        && check_strong_ni(&nacl.program, Policy::NaclDefault, Strategy::NaClHeavy, seed, FUZZ_FUEL)
            .map_or(true, |v| v.passed());

    SeedResult {
        seed,
        verified,
        monitor_error: mt.error().map(|e| e.to_string()),
        refinement,
        csr: integrity.csr.is_empty(),
        ra: integrity.ra.is_empty(),
        ni,
        attack,
        attack_rejected,
        attack_caught,
        attack_shielded,
    }
}

pub fn cmd_fuzz(n: u64, seed: u64, params: &GenParams) -> Report {
    let results: Vec<SeedResult> = (seed..seed.saturating_add(n))
        .into_par_iter()
        .map(|s| fuzz_seed(s, params))
        .collect();

    let count = |f: &dyn Fn(&SeedResult) -> bool| results.iter().filter(|r| f(r)).count();
    let mut per_kind: BTreeMap<MutationKind, [usize; 4]> = BTreeMap::new();
    for r in &results {
        let e = per_kind.entry(r.attack).or_default();
        e[0] += 1;
        e[1] += r.attack_rejected as usize;
        e[2] += r.attack_caught as usize;
        e[3] += r.attack_shielded as usize;
    }
    let failures: Vec<(u64, Vec<&str>)> = results
        .iter()
        .map(|r| (r.seed, r.failures()))
        .filter(|(_, f)| !f.is_empty())
        .collect();

    let mut text = format!("fuzz campaign: {n} seeds from {seed}\n");
    let _ = writeln!(
        text,
        "benign: {} verified, {} monitor errors, {} refinement mismatches, {} csr violations, {} ra violations, {} ni failures",
        count(&|r| r.verified),
        count(&|r| r.monitor_error.is_some()),
        count(&|r| !r.refinement),
        count(&|r| !r.csr),
        count(&|r| !r.ra),
        count(&|r| !r.ni),
    );
    text.push_str("attacks (instances, rejected, caught by monitor, shielded under nacl):\n");
    for (k, [total, rej, caught, shield]) in &per_kind {
        let _ = writeln!(text, "  {k}: {total} {rej} {caught} {shield}");
    }
    if failures.is_empty() {
        text.push_str("failures: none\n");
    } else {
        text.push_str("failures:\n");
        for (s, f) in &failures {
            let _ = writeln!(text, "  seed {s}: {}", f.join(", "));
        }
    }

    let mut records: Vec<Value> = results.iter().map(|r| record("seed", to_value(r))).collect();
    records.push(record(
        "summary",
        json!({
            "seeds": n,
            "first_seed": seed,
            "verified": count(&|r| r.verified),
            "monitor_errors": count(&|r| r.monitor_error.is_some()),
            "refinement_mismatches": count(&|r| !r.refinement),
            "csr_violations": count(&|r| !r.csr),
            "ra_violations": count(&|r| !r.ra),
            "ni_failures": count(&|r| !r.ni),
            "attacks": per_kind
                .iter()
                .map(|(k, [t, r, c, s])| (k.to_string(), json!({ "instances": t, "rejected": r, "caught": c, "shielded": s })))
                .collect::<serde_json::Map<_, _>>(),
            "failed_seeds": failures.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        }),
    ));
    Report {
        exit: if failures.is_empty() { EXIT_OK } else { EXIT_FAIL },
        text,
        records,
    }
}
