mod common;

use std::collections::BTreeMap;

use common::fixtures;
use proptest::prelude::*;
use repeton::agentio::{ReplayDir, ScriptDir};
use repeton::bench::{
    load_reports, load_tasks, resolve_rate_hundredths, run_bench, summarize_outcomes, BenchError, BenchSummary,
    ThreeBucketRow,
};
use repeton::orchestrator::{IrvConfig, RunOutcome, RunReport};

fn replay_batch(parallelism: usize) -> Vec<RunReport> {
    let tasks = load_tasks(&fixtures().join("bench/tasks.jsonl")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let factory = ReplayDir(fixtures().join("bench/transcripts"));
    run_bench(&tasks, parallelism, &IrvConfig::default(), &factory, dir.path()).unwrap().0
}

fn stable(r: &RunReport) -> (String, RunOutcome, String, Vec<String>, usize, u32) {
    (
        r.instance_id.clone(),
        r.outcome,
        r.final_diff.text.clone(),
        r.event_lines(),
        r.llm_calls_used,
        r.iterations_used,
    )
}

#[test]
fn batch_is_deterministic_across_parallelism() {
    let one = replay_batch(1);
    let four = replay_batch(4);
    let ids: Vec<&str> = one.iter().map(|r| r.instance_id.as_str()).collect();
    assert_eq!(ids, ["calc-resolved", "calc-empty", "calc-cannot", "calc-vetoed"]);
    assert_eq!(one.iter().map(stable).collect::<Vec<_>>(), four.iter().map(stable).collect::<Vec<_>>());
    assert_eq!(summarize_outcomes(&one).unwrap(), summarize_outcomes(&four).unwrap());
}

#[test]
fn batch_outcomes_and_validation_veto() {
    let reports = replay_batch(2);
    let by_id: BTreeMap<&str, &RunReport> = reports.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    assert_eq!(by_id["calc-resolved"].outcome, RunOutcome::Resolved);
    assert!(by_id["calc-resolved"].has_event("validation-passed"));
    assert_eq!(by_id["calc-empty"].outcome, RunOutcome::EmptyPatch);
    assert_eq!(by_id["calc-cannot"].outcome, RunOutcome::CannotReproduce);
    let vetoed = by_id["calc-vetoed"];
    assert_eq!(vetoed.outcome, RunOutcome::Unresolved);
    assert!(vetoed.has_event("validation-downgrade"));
    assert!(vetoed.has_event("resolved"));

    let summary = summarize_outcomes(&reports).unwrap();
    assert_eq!(summary.total, 4);
    assert_eq!(summary.resolve_rate_percent, 25.0);
    assert_eq!(
        summary.three_bucket,
        ThreeBucketRow {
            resolved: 1,
            unresolved: 2,
            empty_patch: 1,
            total: 4
        }
    );
}

#[test]
fn scripted_batch_matches_replayed_batch() {
    let tasks = load_tasks(&fixtures().join("bench/tasks.jsonl")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scripted = run_bench(
        &tasks,
        3,
        &IrvConfig::default(),
        &ScriptDir(fixtures().join("bench/scripts")),
        dir.path(),
    )
    .unwrap()
    .0;
    let replayed = replay_batch(1);
    assert_eq!(scripted.iter().map(stable).collect::<Vec<_>>(), replayed.iter().map(stable).collect::<Vec<_>>());
}

#[test]
fn missing_transcript_is_contained_to_its_task() {
    let tasks = load_tasks(&fixtures().join("bench/tasks.jsonl")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let reports = run_bench(&tasks, 2, &IrvConfig::default(), &ReplayDir(empty.path().into()), dir.path()).unwrap().0;
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert_eq!(r.outcome, RunOutcome::Unresolved, "{}", r.instance_id);
        assert!(r.has_event("harness-error"));
    }
}

#[test]
fn saved_reports_resummarize() {
    let reports = replay_batch(1);
    let dir = tempfile::tempdir().unwrap();
    for r in &reports {
        r.write_to(dir.path()).unwrap();
    }
    std::fs::write(dir.path().join("notes.json"), "{\"not\": \"a report\"}").unwrap();
    let loaded = load_reports(dir.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    assert_eq!(summarize_outcomes(&loaded).unwrap(), summarize_outcomes(&reports).unwrap());
}

#[test]
fn task_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let line = r#"{"instance_id": "a", "repo_location": ".", "base_revision": "HEAD", "problem_statement": "x"}"#;
    std::fs::write(&path, format!("{line}\n\n{line}\n")).unwrap();
    assert!(matches!(load_tasks(&path), Err(BenchError::DuplicateId(id)) if id == "a"));
    std::fs::write(&path, format!("{line}\n{{broken\n")).unwrap();
    assert!(matches!(load_tasks(&path), Err(BenchError::Parse { line: 2, .. })));
    std::fs::write(&path, "").unwrap();
    assert!(load_tasks(&path).unwrap().is_empty());
    let factory = ReplayDir(dir.path().into());
    assert!(matches!(
        run_bench(&[], 1, &IrvConfig::default(), &factory, dir.path()),
        Err(BenchError::EmptyBatch)
    ));
    assert!(matches!(summarize_outcomes(&[]), Err(BenchError::EmptyBatch)));
    let tasks = load_tasks(&fixtures().join("bench/tasks.jsonl")).unwrap();
    assert!(matches!(
        run_bench(&tasks, 0, &IrvConfig::default(), &ReplayDir(dir.path().into()), dir.path()),
        Err(BenchError::InvalidParallelism)
    ));
}

#[test]
fn table_row_for_300_tasks() {
    let counts = BTreeMap::from([
        (RunOutcome::Resolved, 35),
        (RunOutcome::Unresolved, 113),
        (RunOutcome::EmptyPatch, 152),
    ]);
    let s = BenchSummary::from_counts(counts).unwrap();
    assert_eq!(s.total, 300);
    assert_eq!(s.resolve_rate_percent, 11.67);
    let table = s.render_table();
    assert!(table.starts_with("Resolved  Unresolved  Empty Patch  Total\n      35         113          152    300\n"));
    assert_eq!(resolve_rate_hundredths(74, 300), 2467);
    assert_eq!(resolve_rate_hundredths(0, 300), 0);
}

proptest! {
    #[test]
    fn rate_rounds_half_up(total in 1usize..100_000, seed in any::<usize>()) {
        let resolved = seed % (total + 1);
        let scaled = 10_000 * resolved as u128;
        let (q, rem) = (scaled / total as u128, scaled % total as u128);
        let expected = q + u128::from(2 * rem >= total as u128);
        prop_assert_eq!(resolve_rate_hundredths(resolved, total) as u128, expected);
    }

    #[test]
    fn three_bucket_row_folds_cannot_reproduce(counts in prop::collection::vec(0usize..50, 4)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let map: BTreeMap<RunOutcome, usize> = RunOutcome::ALL.iter().copied().zip(counts.iter().copied()).collect();
        let s = BenchSummary::from_counts(map).unwrap();
        let row = s.three_bucket;
        prop_assert_eq!(row.resolved + row.unresolved + row.empty_patch, row.total);
        prop_assert_eq!(row.unresolved, counts[1] + counts[3]);
    }
}
