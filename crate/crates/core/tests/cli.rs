mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fixtures, scenario_dir};
use serde_json::Value;

fn repeton(args: &[&str], work: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repeton"))
        .args(args)
        .env("REPETON_WORK_DIR", work)
        .env_remove("REPETON_BASE_URL")
        .env_remove("REPETON_API_KEY")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_replay_resolves_and_writes_patch() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let calc = fixtures().join("calc");
    let problem = fixtures().join("calc_problem.txt");
    let transcript = scenario_dir("resolved").join("transcript.jsonl");
    let out = repeton(
        &[
            "run",
            "--repo",
            s(&calc),
            "--problem-file",
            s(&problem),
            "--instance-id",
            "calc",
            "--backend",
            "replay",
            "--transcript",
            s(&transcript),
            "--out-dir",
            s(&out_dir),
        ],
        &tmp.path().join("work"),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["outcome"], "Resolved");
    let patch = std::fs::read_to_string(out_dir.join("calc.patch")).unwrap();
    assert_eq!(patch, std::fs::read_to_string(scenario_dir("resolved").join("golden.patch")).unwrap());
    assert!(out_dir.join("calc.json").exists());
}

#[test]
fn unresolved_run_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let calc = fixtures().join("calc");
    let problem = fixtures().join("calc_problem.txt");
    let dir = scenario_dir("unresolved");
    let out = repeton(
        &[
            "run",
            "--repo",
            s(&calc),
            "--problem-file",
            s(&problem),
            "--instance-id",
            "calc",
            "--backend",
            "script",
            "--script",
            s(&dir.join("script.json")),
            "--config",
            s(&dir.join("config.txt")),
            "--out-dir",
            s(&tmp.path().join("out")),
        ],
        &tmp.path().join("work"),
    );
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["outcome"], "Unresolved");
    assert_eq!(report["iterations"], 1);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(repeton(&["--no-such-flag"], tmp.path()).status.code(), Some(2));
    assert_eq!(repeton(&["run"], tmp.path()).status.code(), Some(2));
    assert_eq!(repeton(&["bench", "--tasks"], tmp.path()).status.code(), Some(2));
    assert_eq!(repeton(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn environment_errors_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("reports");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(repeton(&["summarize", "--reports", s(&empty)], tmp.path()).status.code(), Some(3));

    // live backend without an endpoint configured
    let calc = fixtures().join("calc");
    let problem = fixtures().join("calc_problem.txt");
    let out = repeton(
        &["run", "--repo", s(&calc), "--problem-file", s(&problem), "--out-dir", s(&tmp.path().join("o"))],
        &tmp.path().join("work"),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = tmp.path().join("nope");
    let out = repeton(
        &["run", "--repo", s(&missing), "--problem-file", s(&problem), "--backend", "script", "--script", s(&problem)],
        &tmp.path().join("work2"),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_replay_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let tasks = fixtures().join("bench/tasks.jsonl");
    let transcripts = fixtures().join("bench/transcripts");
    let out = repeton(
        &[
            "bench",
            "--tasks",
            s(&tasks),
            "--parallelism",
            "4",
            "--backend",
            "replay",
            "--transcript",
            s(&transcripts),
            "--out-dir",
            s(&out_dir),
        ],
        &tmp.path().join("work"),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["total"], 4);
    assert_eq!(summary["resolve_rate_percent"], 25.0);
    let table = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(table.starts_with("Resolved  Unresolved  Empty Patch  Total\n"));
    for id in ["calc-resolved", "calc-empty", "calc-cannot", "calc-vetoed"] {
        assert!(out_dir.join(format!("{id}.json")).exists(), "{id}");
    }

    let again = repeton(&["summarize", "--reports", s(&out_dir)], tmp.path());
    assert_eq!(again.status.code(), Some(0));
    let resummarized: Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(resummarized, summary);
}

#[test]
fn outline_and_search_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let ops = fixtures().join("calc/calc/ops.py");
    let out = repeton(&["outline", s(&ops)], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("range_sum"), "{text}");
    assert!(text.contains("Calculator.add"), "{text}");

    let out = repeton(&["outline", "--json", s(&ops)], tmp.path());
    let outline: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(outline["symbols"].as_array().unwrap().iter().any(|s| s["qualified_name"] == "range_sum"));

    let out = repeton(&["search", "--repo", s(&fixtures().join("calc")), "range_sum"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ops.py"), "{text}");
}
