use std::path::PathBuf;
use std::process::{Command, Output};

fn mr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mr"))
        .args(args)
        .output()
        .unwrap()
}

fn core_asm(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/asm")
        .join(name);
    p.to_str().unwrap().to_string()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mr-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn bench_reports_the_add_loop_rate() {
    let out = mr(&["bench", "add-loop", "--instructions", "200000"]);
    assert!(out.status.success());
    assert_eq!(text(&out.stdout), "62500 instructions/sec (simulated)\n");
    assert!(!mr(&["bench", "nope"]).status.success());
}

#[test]
fn run_prints_teletype_output_and_exits_cleanly() {
    let out = mr(&["run", "--tape", &core_asm("hello.mra")]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), "HELLO MR\r\n");
    assert!(text(&out.stderr).starts_with("MR-STATE 1\n"));
}

#[test]
fn run_limit_is_reported_as_failure() {
    let out = mr(&[
        "run",
        "--tape",
        &core_asm("multiply.mra"),
        "--max-instr",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("instruction limit 3"));
    let out = mr(&["run", "--tape", &core_asm("hello.mra"), "--max-us", "100"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("time limit"));
}

#[test]
fn asm_names_undefined_label_and_line() {
    let src = scratch("bad.mra");
    std::fs::write(
        &src,
        "        ORG 0\n        LDA NOWHERE\n        HLT\n        END\n",
    )
    .unwrap();
    let out = mr(&["asm", src.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("bad.mra:2:"), "{err}");
    assert!(err.contains("NOWHERE"), "{err}");
}

#[test]
fn asm_dump_and_trace_round_trip() {
    let tape = scratch("multiply.mrt");
    let out = mr(&[
        "asm",
        &core_asm("multiply.mra"),
        "-o",
        tape.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("0000  060004  "));

    let dump = text(&mr(&["dump", tape.to_str().unwrap()]).stdout);
    let mut lines = dump.lines();
    assert_eq!(lines.next(), Some("tape: 164 frames, 41 words"));
    assert_eq!(lines.next(), Some("0000  060004  LDA 0004"));

    let trace = mr(&["trace", "--tape", tape.to_str().unwrap()]);
    assert!(trace.status.success());
    let t = text(&trace.stdout);
    assert!(t.starts_with("0000  060004  LDA 0004"));
    assert!(t
        .lines()
        .all(|l| l.ends_with(" 12 us") || l.ends_with(" 16 us")));

    let state = scratch("multiply.state");
    let run = mr(&[
        "run",
        "--tape",
        tape.to_str().unwrap(),
        "--state",
        state.to_str().unwrap(),
    ]);
    assert!(run.status.success());
    let dumped = text(&mr(&["dump", state.to_str().unwrap()]).stdout);
    assert!(dumped.starts_with("pc 0004"), "{dumped}");
    assert!(!mr(&["dump", core_asm("multiply.mra").as_str()])
        .status
        .success());
}
