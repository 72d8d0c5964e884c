use std::path::PathBuf;
use std::process::{Command, Output};

fn gatelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn example(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../programs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_exit_codes() {
    let ok = gatelab(&["verify", &example("lib_add5.gal")]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).ends_with("library: pass\n"));

    let bad = gatelab(&["verify", &example("library_helper.gal")]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("[frame-protection]"));
}

#[test]
fn missing_file_is_a_usage_error() {
    let o = gatelab(&["run", "/nonexistent/x.gal"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: cannot read"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let o = gatelab(&["run", "--gates", "fast", &example("lib_add5.gal")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_reports_result() {
    let o = gatelab(&["run", &example("lib_add5.gal")]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("outcome: halted"));
    assert!(out.contains("regs [42,"));
}

#[test]
fn nacl_gate_costs_are_reported() {
    let o = gatelab(&["run", "--gates", "nacl", &example("gate_costs.gal")]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    for n in [26, 29, 32, 38] {
        assert!(out.contains(&format!("{n} micro-ops, cost model {n}")), "{out}");
    }
}

#[test]
fn monitor_catches_clobber() {
    let o = gatelab(&["monitor", &example("csr_clobber.gal")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("CsrNotRestored"));
}

#[test]
fn check_defaults_and_selection() {
    let o = gatelab(&["check", &example("callback.gal")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o).lines().filter(|l| !l.starts_with(' ')).collect::<Vec<_>>(),
        ["csr: pass", "ra: pass", "ni: pass"]
    );
    let o = gatelab(&["check", &example("csr_clobber.gal"), "csr"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn records_are_json_lines() {
    let o = gatelab(&["--format", "records", "verify", &example("bad_good.gal")]);
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema"], 1);
    }
}

#[test]
fn out_flag_writes_file() {
    let dir = std::env::temp_dir().join(format!("gatelab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("report.txt");
    let o = gatelab(&["verify", "--out", path.to_str().unwrap(), &example("bad_good.gal")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(std::fs::read_to_string(&path).unwrap().contains("bad_func: fail"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn fuzz_is_deterministic() {
    let args = ["--seed", "7", "--format", "records", "fuzz", "100"];
    let a = gatelab(&args);
    let b = gatelab(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    let summary: serde_json::Value = serde_json::from_str(stdout(&a).lines().last().unwrap()).unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["verified"], 100);
}

#[test]
fn fuzz_rejects_bad_size() {
    let o = gatelab(&["fuzz", "3", "funcs=0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gatelab(&["fuzz", "3", "funcs=3,arity=1,calls=2,callbacks=0"]);
    assert_eq!(o.status.code(), Some(0));
}
