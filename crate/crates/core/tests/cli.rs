use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn leakfix(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_leakfix")).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn corpus_file(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join(name).display().to_string()
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let stdout = leakfix(&["run", "--entry", "store-latch", "--verify-traces", "10000", "--out", out]).stdout;
    let summary = String::from_utf8(stdout).unwrap();
    assert!(summary.contains("instructions_before = 10"));
    assert!(summary.contains("remaining = 0"));
    for f in ["fixed.s", "report_iter0.csv", "report_final.csv", "rewrite.log", "summary.txt", "plot.gp"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let fixed = fs::read_to_string(dir.path().join("fixed.s")).unwrap();
    assert!(fixed.contains("@inserted latch-wipe"));
    let check = leakfix(&["check", "--entry", "store-latch", "--rewritten", &dir.path().join("fixed.s").display().to_string()]);
    assert!(String::from_utf8(check.stdout).unwrap().contains("equivalent = ok"));
}

#[test]
fn campaign_then_rewrite() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.csv").display().to_string();
    let fixed = dir.path().join("fixed.s").display().to_string();
    let asm = corpus_file("bus-bytes.s");
    leakfix(&["campaign", "--asm", &asm, "--out", &report]);
    let out = leakfix(&["rewrite", "--asm", &asm, "--report", &report, "--out", &fixed]);
    assert!(String::from_utf8(out.stderr).unwrap().contains("load-shadow"));
    let text = fs::read_to_string(&fixed).unwrap();
    assert!(text.contains("pop {r6}") && text.contains("@inserted load-shadow"));
}

#[test]
fn trace_and_trend_emit_csv() {
    let trace = String::from_utf8(leakfix(&["trace", "--entry", "reg-reuse"]).stdout).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
    assert!(trace.starts_with("slot,mnemonic,total"));
    let trend = String::from_utf8(leakfix(&["trend", "--entry", "reg-reuse", "--counts", "0,1", "--traces", "1000"]).stdout).unwrap();
    assert_eq!(trend.lines().next(), Some("n_inputs,mean,ci95_low,ci95_high,samples"));
    assert!(trend.lines().nth(1).unwrap().starts_with("0,0.000"));
}

#[test]
fn unknown_entry_fails() {
    let out = Command::new(env!("CARGO_BIN_EXE_leakfix"))
        .args(["campaign", "--entry", "aes-full"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("aes-full"));
}
