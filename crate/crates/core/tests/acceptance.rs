//! One line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{fixtures, golden_lines, replay_scenario, scenario_dir};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use repeton::agentio::{
    assemble_prompt, build_request_body, AgentIoError, BackendParams, Message, ModelClient, ReplayDir, Role,
    ScriptedBackend, SpyBackend,
};
use repeton::bench::{load_tasks, run_bench, summarize_outcomes, BenchSummary};
use repeton::codemap::{outline_file, SymbolSpan};
use repeton::orchestrator::{IrvConfig, RunOutcome, RunReport};

const RATE_TABLE_HUNDREDTHS: u64 = 1167;
const LIMIT_ARITHMETIC: Duration = Duration::from_secs(1);
const LIMIT_GOLDEN_RUN: Duration = Duration::from_secs(10);
const LIMIT_FAILURE_RUNS: Duration = Duration::from_secs(30);
const LIMIT_ROLLBACK: Duration = Duration::from_secs(60);
const ROLLBACK_CASES: u32 = 128;
const MINIMALITY_SCENARIOS: usize = 50;
const MIN_OUTLINE_FILES: usize = 20;
const TRUNCATION_CASES: u32 = 256;
const NO_LIMIT: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn criterion(n: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let elapsed = started.elapsed();
    let (ok, detail) = match result {
        Ok(_) if elapsed > limit => (false, format!("took {:.2}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs())),
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!(
        "criterion {n} [{}] {name}: {detail} ({:.2}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn outcome_arithmetic() -> Outcome {
    let counts = BTreeMap::from([
        (RunOutcome::Resolved, 35),
        (RunOutcome::Unresolved, 113),
        (RunOutcome::EmptyPatch, 152),
        (RunOutcome::CannotReproduce, 0),
    ]);
    let s = BenchSummary::from_counts(counts).map_err(|e| e.to_string())?;
    ensure(s.total == 300, format!("total {}", s.total))?;
    let hundredths = (s.resolve_rate_percent * 100.0).round() as u64;
    ensure(
        hundredths == RATE_TABLE_HUNDREDTHS && s.resolve_rate_percent == 11.67,
        format!("rate {}", s.resolve_rate_percent),
    )?;
    Ok(format!("total {} rate {:.2}", s.total, s.resolve_rate_percent))
}

fn golden_end_to_end() -> Outcome {
    let run = replay_scenario("resolved");
    let golden = std::fs::read_to_string(scenario_dir("resolved").join("golden.patch")).map_err(|e| e.to_string())?;
    ensure(run.report.outcome == RunOutcome::Resolved, format!("outcome {}", run.report.outcome))?;
    ensure(run.report.final_diff.text == golden, "patch differs from golden")?;
    Ok(format!("Resolved, {} byte patch identical to golden", golden.len()))
}

fn failure_paths() -> Outcome {
    let mut seen = Vec::new();
    for name in ["empty_patch", "unresolved", "cannot_reproduce"] {
        let run = replay_scenario(name);
        let dir = scenario_dir(name);
        let expected = std::fs::read_to_string(dir.join("outcome.golden")).map_err(|e| e.to_string())?;
        ensure(
            run.report.outcome.to_string() == expected.trim(),
            format!("{name}: outcome {}", run.report.outcome),
        )?;
        ensure(
            run.report.event_lines() == golden_lines(&dir.join("events.golden")),
            format!("{name}: event log differs"),
        )?;
        seen.push(run.report.outcome.to_string());
    }
    Ok(seen.join(", "))
}

fn rollback_soundness() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: ROLLBACK_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let total = std::cell::Cell::new(0usize);
    runner
        .run(&prop::collection::vec(common::icsr::op(), 1..40), |ops| {
            let n = common::icsr::check_rollbacks(&ops)?;
            total.set(total.get() + n);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let accepted = total.get();
    ensure(accepted > 0, "no rollback was exercised")?;
    Ok(format!("{ROLLBACK_CASES} cases, {accepted} rollbacks checked"))
}

fn patch_minimality() -> Outcome {
    let mut edits = 0;
    for name in common::SCENARIOS {
        let run = replay_scenario(name);
        for line in run.report.event_lines() {
            if let Some(rest) = line.strip_prefix("edit-applied: ") {
                ensure(rest.ends_with(", 1 file(s), 1 hunk(s)"), format!("{name}: {rest}"))?;
                edits += 1;
            }
        }
        ensure(run.report.final_diff.files_touched <= 1, format!("{name}: final diff touches several files"))?;
    }
    let mut runner = TestRunner::deterministic();
    let strategy = (1usize..=common::icsr::FILE_LINES, 0usize..6, 0usize..5);
    for _ in 0..MINIMALITY_SCENARIOS {
        use proptest::strategy::ValueTree;
        let (start, len, n) = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let (_, doc) = common::icsr::single_edit(start, len, n);
        ensure(
            doc.files_touched == 1 && doc.hunk_count == 1,
            format!("edit {start}+{len} with {n} lines: {} file(s), {} hunk(s)", doc.files_touched, doc.hunk_count),
        )?;
    }
    Ok(format!("{edits} replayed edits and {MINIMALITY_SCENARIOS} random edits: 1 file, 1 hunk each"))
}

fn outline_oracle() -> Outcome {
    let dir = fixtures().join("outline_corpus");
    let text = std::fs::read_to_string(dir.join("oracle.json")).map_err(|e| e.to_string())?;
    let oracle: BTreeMap<String, Vec<SymbolSpan>> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(oracle.len() >= MIN_OUTLINE_FILES, format!("only {} files", oracle.len()))?;
    let mut mismatches = Vec::new();
    let mut symbols = 0;
    for (name, expected) in &oracle {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| e.to_string())?;
        let got = outline_file(name, &bytes).map_err(|e| e.to_string())?;
        symbols += expected.len();
        if &got.symbols != expected {
            mismatches.push(name.clone());
        }
    }
    ensure(mismatches.is_empty(), format!("mismatching files: {}", mismatches.join(", ")))?;
    Ok(format!("{} files, {symbols} symbols, 0 mismatches", oracle.len()))
}

fn truncation_and_pinning() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: TRUNCATION_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&common::prompt::conversation(), |(messages, k)| {
            prop_assert_eq!(assemble_prompt(&messages, k), common::prompt::oracle(&messages, k));
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let run = replay_scenario("resolved");
    let summary_prompt = run.prompts.first().ok_or("no prompts recorded")?;
    ensure(
        summary_prompt.iter().any(|m| m.content.contains("range_sum drops its upper bound")),
        "first request is not the summarization request",
    )?;
    let later = &run.prompts[1..];
    let pinned = later
        .iter()
        .filter(|p| p.iter().filter(|m| m.pinned && m.content.starts_with("Problem summary")).count() == 1)
        .count();
    ensure(pinned == later.len(), format!("summary pinned in {pinned}/{} prompts", later.len()))?;
    Ok(format!(
        "{TRUNCATION_CASES} cases match the oracle; summary pinned in {pinned}/{} prompts after it was produced",
        later.len()
    ))
}

fn wire_format() -> Outcome {
    let text =
        std::fs::read_to_string(fixtures().join("wire/request.golden.json")).map_err(|e| e.to_string())?;
    let golden: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let messages = vec![
        Message::pinned(Role::System, "You are helpful."),
        Message::new(Role::User, "hi"),
    ];
    ensure(build_request_body(&messages, &BackendParams::default()) == golden, "request body differs")?;

    let (spy, log) = SpyBackend::new(ScriptedBackend::new(["unused"]));
    let params = BackendParams {
        max_tokens: 100,
        ..BackendParams::default()
    };
    let mut client = ModelClient::new(Box::new(spy), params, 200, 10);
    let err = client.complete(&[Message::new(Role::User, "x".repeat(404))]);
    ensure(matches!(err, Err(AgentIoError::ContextOverflow { .. })), format!("{err:?}"))?;
    let calls = log.lock().map_err(|e| e.to_string())?.len();
    ensure(calls == 0 && client.calls() == 0, format!("{calls} backend calls"))?;
    Ok("request matches golden; overflow guard fired with 0 backend calls".into())
}

fn bench_determinism() -> Outcome {
    let tasks = load_tasks(&fixtures().join("bench/tasks.jsonl")).map_err(|e| e.to_string())?;
    let factory = ReplayDir(fixtures().join("bench/transcripts"));
    let batch = |parallelism: usize| -> Result<(Vec<RunReport>, BenchSummary), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        run_bench(&tasks, parallelism, &IrvConfig::default(), &factory, dir.path()).map_err(|e| e.to_string())
    };
    let (one, s1) = batch(1)?;
    let (four, s4) = batch(4)?;
    let outcomes = |r: &[RunReport]| r.iter().map(|r| (r.instance_id.clone(), r.outcome)).collect::<Vec<_>>();
    ensure(one.len() == 4, format!("{} tasks", one.len()))?;
    ensure(s1 == s4, "summaries differ")?;
    ensure(outcomes(&one) == outcomes(&four), "per-task outcomes differ")?;
    ensure(summarize_outcomes(&one).map_err(|e| e.to_string())? == s1, "summary recount differs")?;
    Ok(format!(
        "identical at parallelism 1 and 4: {}",
        outcomes(&one)
            .iter()
            .map(|(id, o)| format!("{id}={o}"))
            .collect::<Vec<_>>()
            .join(" ")
    ))
}

fn main() {
    // Assertion failures are reported on the criterion line.
    std::panic::set_hook(Box::new(|_| {}));
    let results = [
        criterion(1, "outcome arithmetic", LIMIT_ARITHMETIC, outcome_arithmetic),
        criterion(2, "golden end-to-end", LIMIT_GOLDEN_RUN, golden_end_to_end),
        criterion(3, "failure-path replays", LIMIT_FAILURE_RUNS, failure_paths),
        criterion(4, "rollback soundness", LIMIT_ROLLBACK, rollback_soundness),
        criterion(5, "patch minimality", NO_LIMIT, patch_minimality),
        criterion(6, "outline oracle", NO_LIMIT, outline_oracle),
        criterion(7, "truncation and pinning", NO_LIMIT, truncation_and_pinning),
        criterion(8, "wire format", NO_LIMIT, wire_format),
        criterion(9, "bench determinism", NO_LIMIT, bench_determinism),
    ];
    let passed = results.iter().filter(|ok| **ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
