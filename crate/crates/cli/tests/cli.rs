//! The `demonstrate` binary, end to end on a small demonstration set.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demonstrate"))
}

fn json_of(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// `(tempdir, model path)` trained once through the CLI: 30 sub-tasks,
/// 10 demonstrations each, z = 10.
fn trained() -> &'static (tempfile::TempDir, PathBuf) {
    static SHARED: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let demos = dir.path().join("demos.jsonl");
        let model = dir.path().join("model.bin");
        let g = json_of(
            &bin()
                .args(["--json", "demos", "generate", "--layout", "cubes", "--tasks", "30", "--per-task", "10"])
                .arg("--out")
                .arg(&demos)
                .output()
                .unwrap(),
        );
        assert_eq!(g["tasks"], 30);
        assert_eq!(g["demos_free"], 300);
        let t = json_of(
            &bin()
                .args(["--json", "train", "--z", "10", "--demos"])
                .arg(&demos)
                .arg("--out")
                .arg(&model)
                .output()
                .unwrap(),
        );
        assert_eq!(t["z"], 10);
        assert_eq!(t["p"], 26);
        assert!(t["constraint"].is_null());
        (dir, model)
    })
}

fn model() -> &'static Path {
    &trained().1
}

#[test]
fn validate_subtask_passes_a_demonstrated_description() {
    let out = bin()
        .args(["--json", "validate-subtask", "--threshold", "3.0", "--model"])
        .arg(model())
        .args(["--text", "0.08 meters above of object two"])
        .output()
        .unwrap();
    let v = json_of(&out);
    assert_eq!(v["verdict"], "pass");
    assert!(v["coverage"].as_f64().unwrap() <= 3.0);

    let v = json_of(
        &bin()
            .args(["--json", "validate-subtask", "--model"])
            .arg(model())
            .args(["--text", "paint the whole table purple please"])
            .output()
            .unwrap(),
    );
    assert_eq!(v["verdict"], "fail");
}

#[test]
fn benchmark_single_stack_run_succeeds() {
    let v = json_of(
        &bin()
            .args(["--json", "benchmark", "--task", "stack", "--runs", "1", "--planner", "scripted", "--model"])
            .arg(model())
            .output()
            .unwrap(),
    );
    assert_eq!(v["runs"], 1);
    assert_eq!(v["sr"], 100.0);
    assert_eq!(v["tp"], 0.0);
    assert_eq!(v["od"], 0.0);
    assert_eq!(v["co"], 0.0);
}

#[test]
fn benchmark_output_is_deterministic() {
    let run = || {
        json_of(
            &bin()
                .args(["--json", "benchmark", "--task", "pyramid", "--runs", "2", "--seed", "11", "--model"])
                .arg(model())
                .output()
                .unwrap(),
        )
    };
    let a = run();
    let sum = ["sr", "tp", "od", "co"].iter().map(|k| a[k].as_f64().unwrap()).sum::<f64>();
    assert!((sum - 100.0).abs() < 1e-9);
    assert_eq!(a, run());
}

#[test]
fn run_writes_the_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("episode.jsonl");
    let v = json_of(
        &bin()
            .args(["--json", "run", "--command", "stack all cubes", "--planner", "scripted", "--seed", "7", "--model"])
            .arg(model())
            .arg("--out")
            .arg(&out_path)
            .output()
            .unwrap(),
    );
    assert_eq!(v["status"], "completed");
    assert_eq!(v["attempts"], 1);
    let line = std::fs::read_to_string(&out_path).unwrap();
    let ep: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(ep["frames"].as_array().unwrap().len() as u64, v["frames"].as_u64().unwrap());
}

#[test]
fn human_readable_output_without_json_flag() {
    let out = bin()
        .args(["validate-subtask", "--model"])
        .arg(model())
        .args(["--text", "0.08 meters above of object two"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.contains("verdict pass"), "{s}");
}

#[test]
fn train_on_empty_demos_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = bin()
        .args(["--json", "train", "--demos"])
        .arg(&empty)
        .arg("--out")
        .arg(dir.path().join("m.bin"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["error"].is_string());
    assert!(!dir.path().join("m.bin").exists());
}

#[test]
fn missing_files_and_bad_configs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["validate-subtask", "--text", "x", "--model"])
        .arg(dir.path().join("nope.bin"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[validation]\nthreshhold = 2\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&bad_cfg)
        .args(["validate-subtask", "--text", "x", "--model"])
        .arg(model())
        .output()
        .unwrap();
    assert!(!out.status.success());

    // a model trained with another embedder is a version mismatch
    let http_cfg = dir.path().join("http.toml");
    std::fs::write(&http_cfg, "[embedding]\nprovider = \"http\"\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&http_cfg)
        .args(["validate-subtask", "--text", "x", "--model"])
        .arg(model())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version mismatch"));

    // a truncated model file is rejected
    let bytes = std::fs::read(model()).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = bin()
        .args(["validate-subtask", "--text", "x", "--model"])
        .arg(&cut)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn unknown_task_is_a_usage_error() {
    let out = bin()
        .args(["benchmark", "--task", "tower", "--model"])
        .arg(model())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
