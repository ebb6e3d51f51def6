use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use linkcap_core::modformat::decode;

fn linkcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linkcap")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&linkcap(&[])), 1);
    assert_eq!(code(&linkcap(&["frobnicate"])), 1);
    assert_eq!(code(&linkcap(&["bench", "nosuch"])), 1);
    assert_eq!(code(&linkcap(&["run", "/nonexistent/policy.txt"])), 1);
    assert_eq!(code(&linkcap(&["--help"])), 0);
}

#[test]
fn asm_writes_a_decodable_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tiny.cpo");
    let src = scenarios().join("micro/tiny.s");
    let o = linkcap(&["asm", path(&src), "-o", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = decode(&fs::read(&out).unwrap()).unwrap();
    assert!(img.symbol("tiny_nop").is_some());
}

#[test]
fn asm_syntax_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("bad.s");
    fs::write(&src, ".text\nmain:\n    bogus x1, x2\n").unwrap();
    let o = linkcap(&["asm", path(&src), "-o", path(&dir.path().join("bad.cpo"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.s"));
}

#[test]
fn link_and_graph() {
    let policy = scenarios().join("micro/policy.txt");
    let o = linkcap(&["link", path(&policy)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("compartment sender"));
    assert!(text.contains("resources=41"));

    let dot = stdout(&linkcap(&["graph", path(&policy)]));
    assert!(dot.starts_with("digraph compartments {"));
    assert!(dot.contains("\"sender\" -> \"receiver\""));
    let text = stdout(&linkcap(&["graph", path(&policy), "-o", "text"]));
    assert!(text.contains("trampoline"));
}

#[test]
fn link_rejects_unknown_module() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.txt");
    fs::write(&policy, "compartment a missing.s strategy=kill\n").unwrap();
    assert_eq!(code(&linkcap(&["link", path(&policy)])), 2);
}

#[test]
fn run_reports_and_exit_codes() {
    let ecu = scenarios().join("ecu/policy.txt");
    let o = linkcap(&["run", path(&ecu)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("task control.main Finished"));

    let o = linkcap(&["run", path(&ecu), "--format", "json"]);
    let report: serde_json::Value = serde_json::from_str(stdout(&o).split("\n{\"variant\"").next().unwrap()).unwrap();
    assert_eq!(report["outcome"], "all_done");

    // A fault in the task's own compartment has no caller to return to.
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("crash.s"),
        ".text\n.global main\nmain:\n    clc c1, cap(d)\n    clw x0, 8(c1)\n    cret\n.data\nd: .word 0\n",
    )
    .unwrap();
    let policy = dir.path().join("policy.txt");
    fs::write(&policy, "compartment a crash.s strategy=return_error\ntask a main\n").unwrap();
    let o = linkcap(&["run", path(&policy)]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("BoundsViolation"));
    // Without enforcement the same program runs to completion.
    assert_eq!(code(&linkcap(&["run", path(&policy), "--insecure"])), 0);
}

#[test]
fn run_deadlock_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("rx.s"),
        ".text\n.global main\nmain:\n    li x1, 0\n    clc c1, cap(buf)\n    qrecv x1, c1\n    cret\n.data\nbuf: .word 0\n",
    )
    .unwrap();
    let policy = dir.path().join("policy.txt");
    fs::write(
        &policy,
        "compartment rx rx.s strategy=return_error\nqueue q capacity=1 item_size=4 users=rx\ntask rx main\n",
    )
    .unwrap();
    let o = linkcap(&["run", path(&policy)]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("Deadlock"));
}

#[test]
fn bench_json() {
    let o = linkcap(&["bench", "fncall", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["rows"][0]["operation"], "fncall");
}

#[test]
fn inject_mismatch_exits_4() {
    let src = scenarios().join("overflow-stack");
    let dir = tempfile::tempdir().unwrap();
    for e in fs::read_dir(&src).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), dir.path().join(e.file_name())).unwrap();
    }
    let o = linkcap(&["inject", path(dir.path())]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 failed"));

    let script = dir.path().join("scenario.txt");
    let text = fs::read_to_string(&script).unwrap();
    fs::write(&script, text.replace("net:results+3 == 36", "net:results+3 == 37")).unwrap();
    let o = linkcap(&["inject", path(dir.path())]);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).contains("FAIL expect_word net:results+3 == 37"));
}

#[test]
fn inject_bad_script_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scenario.txt"), "run\n").unwrap();
    assert_eq!(code(&linkcap(&["inject", path(dir.path())])), 2);
    assert_eq!(code(&linkcap(&["inject", "/nonexistent"])), 1);
}
