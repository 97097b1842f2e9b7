use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn assemkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_assemkit"))
        .args(args)
        .env("ASMK_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Vec<u8> {
    let out = assemkit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn code(args: &[&str]) -> i32 {
    assemkit(args).status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const SMALL: [&str; 4] = ["--points-coarse", "1024", "--points", "128"];

fn small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL.iter()).map(|a| a.to_string()).collect()
}

fn gen(out: &Path, seed: &str) {
    let out = s(out);
    let args = small(&["gen-synth", "--families", "stack,table", "--count", "2", "--seed", seed, "--out", &out]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
}

fn read_dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn bad_input_exits_2() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["tokenize", "--vector", "1,2,3"]), 2);
    assert_eq!(code(&["--bins", "100", "tokenize", "--vector", "0,0,0,0,0,0,0,0,0"]), 2);
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["validate", &s(&dir.path().join("absent"))]), 4);
    assert_eq!(code(&["plan", &s(&dir.path().join("absent"))]), 4);
}

#[test]
fn generation_is_deterministic_and_valid() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "3");
    gen(b.path(), "3");
    assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    ok(&["validate", &s(a.path())]);
}

#[test]
fn corrupted_steps_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "4");
    let steps = dir.path().join("steps.jsonl");
    let text = std::fs::read_to_string(&steps).unwrap();
    let bad = text.replacen("<assemble_pose_", "<assemble_pose_9", 1);
    assert_ne!(bad, text);
    std::fs::write(&steps, bad).unwrap();
    assert_eq!(code(&["validate", &s(dir.path())]), 3);
}

#[test]
fn target_baseline_scores_full_success() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "6");
    let (pred, res, rep) = (dir.path().join("p.jsonl"), dir.path().join("r.jsonl"), dir.path().join("rep.json"));
    let data = s(dir.path());
    ok(&["predict", &data, "--baseline", "target", "--split", "all", "--out", &s(&pred)]);
    ok(&["eval", &data, "--predictions", &s(&pred), "--out", &s(&res)]);
    ok(&["report", &s(&res), "--out", &s(&rep)]);
    let report: Value = serde_json::from_slice(&std::fs::read(rep).unwrap()).unwrap();
    assert_eq!(report["all"]["success_rate"], 1.0);
    assert!(report["all"]["count"].as_u64().unwrap() > 0);
}

#[test]
fn tokenize_round_trips_through_text() {
    let enc: Value = serde_json::from_slice(&ok(&["tokenize", "--vector", "0.1,0,0,0,1,0,0.5,0.2,-0.3"])).unwrap();
    assert_eq!(enc["tokens"][0], 110);
    let text = enc["text"].as_str().unwrap();
    let dec: Value = serde_json::from_slice(&ok(&["tokenize", "--decode", text])).unwrap();
    assert!(dec.to_string().contains("rotation"), "{dec}");
}

#[test]
fn normalize_is_idempotent_and_plan_reads_assets() {
    let dir = tempfile::tempdir().unwrap();
    gen(&dir.path().join("d"), "8");
    let asset = dir.path().join("d/assets/table_0000");
    let (n1, n2) = (dir.path().join("n1"), dir.path().join("n2"));
    ok(&["normalize", &s(&asset), &s(&n1)]);
    ok(&["normalize", &s(&n1), &s(&n2)]);
    let parts = |d: &Path| read_dir_bytes(d).into_iter().filter(|(n, _)| n.ends_with(".obj")).collect::<Vec<_>>();
    assert_eq!(parts(&n1), parts(&n2));

    let plan: Value = serde_json::from_slice(&ok(&["plan", &s(&asset), "--points-coarse", "2048"])).unwrap();
    let order: Vec<u64> = plan["order"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(order.len(), 5);
    let mut sorted = order.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
}
