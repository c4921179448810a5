mod common;

use std::process::Command;
use std::time::Instant;

use common::{calc_task, fixtures, golden_lines, replay_scenario, scenario_dir, SCENARIOS};
use repeton::agentio::{BackendParams, ModelClient, ScriptedBackend, SpyBackend};
use repeton::orchestrator::{
    establish_reproduction, parse_summary, run_irv, run_irv_in, IrvConfig, Reproduction, RunOutcome,
};
use repeton::workspace::{IgnoreRules, Workspace};

#[test]
fn scenarios_match_goldens() {
    for name in SCENARIOS {
        let run = replay_scenario(name);
        let dir = scenario_dir(name);
        let outcome = std::fs::read_to_string(dir.join("outcome.golden")).unwrap();
        assert_eq!(run.report.outcome.to_string(), outcome.trim(), "{name}");
        assert_eq!(run.report.event_lines(), golden_lines(&dir.join("events.golden")), "{name}");
        let golden_patch = dir.join("golden.patch");
        if golden_patch.exists() {
            assert_eq!(run.report.final_diff.text, std::fs::read_to_string(golden_patch).unwrap());
        }
        match run.report.outcome {
            RunOutcome::EmptyPatch | RunOutcome::CannotReproduce => assert!(run.report.final_diff.is_empty, "{name}"),
            _ => assert!(!run.report.final_diff.is_empty, "{name}"),
        }
    }
}

#[test]
fn summary_is_pinned_in_every_later_prompt() {
    for name in SCENARIOS {
        let run = replay_scenario(name);
        assert_eq!(run.prompts.len(), run.report.llm_calls_used, "{name}");
        let (first, later) = run.prompts.split_first().unwrap();
        assert!(first.iter().all(|m| !m.content.starts_with("Problem summary")), "{name}");
        for (i, prompt) in later.iter().enumerate() {
            let pins: Vec<_> = prompt
                .iter()
                .filter(|m| m.pinned && m.content.starts_with("Problem summary"))
                .collect();
            assert_eq!(pins.len(), 1, "{name} prompt {}", i + 2);
            assert!(pins[0].content.contains("range_sum"), "{name}");
        }
    }
}

#[test]
fn edits_in_scenarios_are_single_hunk() {
    for name in SCENARIOS {
        let run = replay_scenario(name);
        for line in run.report.event_lines() {
            if let Some(rest) = line.strip_prefix("edit-applied: ") {
                assert!(rest.ends_with(", 1 file(s), 1 hunk(s)"), "{name}: {rest}");
            }
        }
    }
}

#[test]
fn resolved_patch_makes_the_test_pass() {
    let run = replay_scenario("resolved");
    assert_eq!(run.report.outcome, RunOutcome::Resolved);
    let status = Command::new("python3")
        .arg(".repeton_tests/test_repro_v1.py")
        .current_dir(run.ws.root())
        .status()
        .unwrap();
    assert!(status.success());

    // the same test fails on an untouched checkout
    let dir = tempfile::tempdir().unwrap();
    let task = calc_task("fresh");
    let ws = Workspace::open(&task.repo_location, "HEAD", "fresh", dir.path(), IgnoreRules::default()).unwrap();
    let test = std::fs::read(run.ws.root().join(".repeton_tests/test_repro_v1.py")).unwrap();
    ws.write("t.py", &test).unwrap();
    let status = Command::new("python3")
        .arg("t.py")
        .current_dir(ws.root())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(!status.success());
}

fn script_without_summary(name: &str) -> Vec<String> {
    let text = std::fs::read_to_string(scenario_dir(name).join("script.json")).unwrap();
    let mut v: Vec<String> = serde_json::from_str(&text).unwrap();
    v.remove(0);
    v
}

fn reproduce(responses: Vec<String>, config: &IrvConfig) -> (Reproduction, Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let task = calc_task("repro");
    let mut ws = Workspace::open(&task.repo_location, "HEAD", "repro", dir.path(), IgnoreRules::default()).unwrap();
    let summary = parse_summary(
        &task.problem_statement,
        "SUMMARY: range_sum drops its upper bound.\nSIGNATURE: AssertionError: range_sum",
    );
    let mut client = ModelClient::new(Box::new(ScriptedBackend::new(responses)), BackendParams::default(), 128_000, 10);
    let (r, events) = establish_reproduction(&mut ws, &summary, config, &mut client);
    (r, events.into_iter().map(|e| e.kind).collect())
}

#[test]
fn reproduction_certifies_first_failing_test() {
    let mut script = script_without_summary("resolved");
    script.truncate(1);
    let (r, kinds) = reproduce(script, &IrvConfig::default());
    assert!(matches!(r, Reproduction::Certified(ref a) if a.version == 1), "{r:?}");
    assert_eq!(kinds.iter().filter(|k| *k == "repro-verdict").count(), 2);
    assert!(kinds.contains(&"repro-certified".to_string()));
}

#[test]
fn strict_reproduction_gives_up_after_three_bad_tests() {
    let (r, kinds) = reproduce(script_without_summary("cannot_reproduce"), &IrvConfig::default());
    assert!(matches!(r, Reproduction::CannotReproduce(_)), "{r:?}");
    assert_eq!(kinds.iter().filter(|k| *k == "repro-test-written").count(), 3);
    assert!(!kinds.contains(&"repro-certified".to_string()));
}

#[test]
fn lenient_reproduction_continues_unverified() {
    let config = IrvConfig {
        strict_reproduction: false,
        ..IrvConfig::default()
    };
    let (r, kinds) = reproduce(script_without_summary("cannot_reproduce"), &config);
    assert!(matches!(r, Reproduction::Unverified(Some(ref a)) if a.version == 3), "{r:?}");
    assert!(!kinds.contains(&"repro-certified".to_string()));

    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario_dir("cannot_reproduce").join("script.json")).unwrap();
    let responses: Vec<String> = serde_json::from_str(&text).unwrap();
    let report = run_irv(&calc_task("lenient"), &config, Box::new(ScriptedBackend::new(responses)), dir.path());
    assert!(report.has_event("unverified-reproduction"), "{:?}", report.event_lines());
    assert_ne!(report.outcome, RunOutcome::CannotReproduce);
}

#[test]
fn give_up_action_ends_reproduction() {
    let give_up = "No way to test this.\n```action\n{\"thought\": \"x\", \"action\": \"give_up\", \"args\": {\"reason\": \"needs a GUI\"}}\n```";
    let (r, kinds) = reproduce(vec![give_up.to_string()], &IrvConfig::default());
    assert!(matches!(r, Reproduction::CannotReproduce(_)), "{r:?}");
    assert!(kinds.contains(&"repro-give-up".to_string()));
}

fn scripted(name: &str) -> ScriptedBackend {
    ScriptedBackend::from_path(&scenario_dir(name).join("script.json")).unwrap()
}

#[test]
fn call_budget_is_never_exceeded() {
    for max in 1..=9 {
        let config = IrvConfig {
            max_llm_calls: max,
            ..IrvConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let task = calc_task("budget");
        let (spy, log) = SpyBackend::new(scripted("resolved"));
        let report = run_irv(&task, &config, Box::new(spy), dir.path());
        assert!(report.llm_calls_used <= max, "max {max}: {}", report.llm_calls_used);
        assert_eq!(log.lock().unwrap().len(), report.llm_calls_used);
        if max < 9 {
            assert_ne!(report.outcome, RunOutcome::Resolved, "max {max}");
            assert!(report.has_event("budget-exhausted"), "max {max}: {:?}", report.event_lines());
        } else {
            assert_eq!(report.outcome, RunOutcome::Resolved);
        }
    }
}

#[test]
fn empty_statement_stops_before_any_call() {
    let dir = tempfile::tempdir().unwrap();
    let mut task = calc_task("empty");
    task.problem_statement = "   ".into();
    let (spy, log) = SpyBackend::new(scripted("resolved"));
    let report = run_irv(&task, &IrvConfig::default(), Box::new(spy), dir.path());
    assert_eq!(report.outcome, RunOutcome::EmptyPatch);
    assert_eq!(report.llm_calls_used, 0);
    assert!(log.lock().unwrap().is_empty());
    assert!(report.has_event("harness-error"));
}

#[test]
fn scripted_and_replayed_runs_agree() {
    for name in SCENARIOS {
        let dir = tempfile::tempdir().unwrap();
        let task = calc_task("calc");
        let mut ws = Workspace::open(&task.repo_location, "HEAD", "calc", dir.path(), IgnoreRules::default()).unwrap();
        let config = common::scenario_config(name);
        let report = run_irv_in(&mut ws, &task, &config, Box::new(scripted(name)), Instant::now());
        let replayed = replay_scenario(name);
        assert_eq!(report.outcome, replayed.report.outcome, "{name}");
        assert_eq!(report.event_lines(), replayed.report.event_lines(), "{name}");
        assert_eq!(report.final_diff, replayed.report.final_diff, "{name}");
    }
}

#[test]
fn report_files_round_trip() {
    let run = replay_scenario("resolved");
    let dir = tempfile::tempdir().unwrap();
    let (json, patch) = run.report.write_to(dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(patch).unwrap(), run.report.final_diff.text);
    let back: repeton::orchestrator::RunReport =
        serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(back, run.report);
    assert!(fixtures().join("calc").is_dir());
}
