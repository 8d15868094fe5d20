use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kernloop_core::verifier::{compare_tensors, Tensor, Tolerance};

fn toy() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/toy")
}

fn kernloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kernloop")).args(args).output().unwrap()
}

fn runner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kernloop-toy-runner")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn run_toy(tasks: &Path, state: &Path) -> Output {
    kernloop(&[
        "run",
        "--tasks",
        &s(tasks),
        "--provider",
        "replay",
        "--transcript",
        &s(&toy().join("transcript.ndjson")),
        "--state",
        &s(state),
        "--hw-file",
        &s(&toy().join("hw.json")),
        "--profile-fixtures",
        &s(&toy().join("profiles")),
    ])
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(kernloop(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(kernloop(&["run", "--tasks", "x"]).status.code(), Some(1));
    let state = tempfile::tempdir().unwrap();
    let missing = state.path().join("nope");
    assert_eq!(run_toy(&missing, state.path()).status.code(), Some(1));
    assert_eq!(kernloop(&["evaluate", "--state", &s(state.path())]).status.code(), Some(1));
    assert_eq!(kernloop(&["hw", "probe", "--backend", "gpu"]).status.code(), Some(1));
    assert_eq!(kernloop(&["--help"]).status.code(), Some(0));
}

fn broken_task(dir: &Path) {
    let text = std::fs::read_to_string(toy().join("tasks/toy_affine.json")).unwrap();
    let broken = text
        .replace("\"toy_affine\"", "\"broken\"")
        .replace("kernloop-toy-runner", "kernloop-runner-that-does-not-exist");
    std::fs::write(dir.join("broken.json"), broken).unwrap();
}

#[test]
fn infrastructure_failure_exits_2() {
    let tasks = tempfile::tempdir().unwrap();
    broken_task(tasks.path());
    let state = tempfile::tempdir().unwrap();
    let out = run_toy(tasks.path(), state.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn partial_suite_exits_3_and_evaluate_lists_the_failure() {
    let tasks = tempfile::tempdir().unwrap();
    broken_task(tasks.path());
    std::fs::copy(toy().join("tasks/toy_affine.json"), tasks.path().join("toy_affine.json")).unwrap();
    let state = tempfile::tempdir().unwrap();
    let out = run_toy(tasks.path(), state.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stdout));

    let report = kernloop(&["evaluate", "--state", &s(state.path()), "--format", "json"]);
    assert!(report.status.success());
    let v: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(v["tasks"], 1);
    assert_eq!(v["success_rate"], 100.0);
    assert_eq!(v["infrastructure_failed"][0]["task_id"], "broken");

    let csv = kernloop(&["evaluate", "--state", &s(state.path()), "--format", "csv"]);
    assert_eq!(String::from_utf8_lossy(&csv.stdout).lines().count(), 2);
}

#[test]
fn replay_subcommand_matches_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_toy(&toy().join("tasks"), a.path()).status.success());
    let out = kernloop(&[
        "replay",
        "--transcript",
        &s(&toy().join("transcript.ndjson")),
        "--tasks",
        &s(&toy().join("tasks")),
        "--state",
        &s(b.path()),
        "--hw-file",
        &s(&toy().join("hw.json")),
        "--profile-fixtures",
        &s(&toy().join("profiles")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result = |d: &Path| std::fs::read(d.join("toy_affine/task_result.json")).unwrap();
    assert_eq!(result(a.path()), result(b.path()));
}

#[test]
fn resume_of_finished_suite_makes_no_llm_calls() {
    let state = tempfile::tempdir().unwrap();
    assert!(run_toy(&toy().join("tasks"), state.path()).status.success());
    let before = std::fs::read(state.path().join("toy_affine/task_result.json")).unwrap();
    // An empty transcript fails any request.
    let empty = state.path().join("empty.ndjson");
    std::fs::write(&empty, "").unwrap();
    let out = kernloop(&[
        "replay",
        "--transcript",
        &s(&empty),
        "--tasks",
        &s(&toy().join("tasks")),
        "--state",
        &s(state.path()),
        "--resume",
        "--hw-file",
        &s(&toy().join("hw.json")),
        "--profile-fixtures",
        &s(&toy().join("profiles")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(std::fs::read(state.path().join("toy_affine/task_result.json")).unwrap(), before);
}

#[test]
fn toy_runner_follows_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let kernel = d.join("k.src");
    std::fs::write(&kernel, "cost_ns = 4000\n").unwrap();
    let common = ["--seed", "7", "--reps", "100", "--warmup", "5"];

    let produce = |source: &str, out: &Path| {
        let mut a = vec!["--mode", "produce", "--source", source];
        let o = s(out);
        a.extend(["--output", &o]);
        a.extend(common);
        runner(&a)
    };
    assert!(produce("@reference", &d.join("ref.kstn")).status.success());
    assert!(produce(&s(&kernel), &d.join("out.kstn")).status.success());
    let cmp = compare_tensors(&d.join("out.kstn"), &d.join("ref.kstn"), Tolerance::default()).unwrap();
    assert!(cmp.pass);
    let bytes = std::fs::read(d.join("ref.kstn")).unwrap();
    assert_eq!(&bytes[..4], b"KSTN");
    assert_eq!(Tensor::from_bytes(&bytes).unwrap().to_bytes(), bytes);

    let times = d.join("times.txt");
    let o = s(&times);
    let mut a = vec!["--mode", "time", "--source", "@reference", "--timing", &o];
    a.extend(common);
    assert!(runner(&a).status.success());
    let text = std::fs::read_to_string(&times).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert!(text.lines().all(|l| l == "7998"));

    std::fs::write(&kernel, "fail = wrong\ncost_ns = 10\n").unwrap();
    assert!(produce(&s(&kernel), &d.join("bad.kstn")).status.success());
    let cmp = compare_tensors(&d.join("bad.kstn"), &d.join("ref.kstn"), Tolerance::default()).unwrap();
    assert!(!cmp.pass);

    std::fs::write(&kernel, "fail = build\n").unwrap();
    let out = runner(&["--mode", "build", "--source", &s(&kernel)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
