#![allow(dead_code)]

pub mod icsr;
pub mod prompt;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use repeton::agentio::{Message, ReplayBackend, SpyBackend};
use repeton::bench::TaskInstance;
use repeton::cli::parse_config_text;
use repeton::orchestrator::{run_irv_in, IrvConfig, RunReport};
use repeton::workspace::{IgnoreRules, Workspace};

pub const SCENARIOS: [&str; 4] = ["resolved", "empty_patch", "unresolved", "cannot_reproduce"];

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn scenario_dir(name: &str) -> PathBuf {
    fixtures().join("scenarios").join(name)
}

pub fn calc_task(instance_id: &str) -> TaskInstance {
    let fx = fixtures();
    TaskInstance {
        instance_id: instance_id.to_string(),
        repo_location: fx.join("calc").to_string_lossy().into_owned(),
        base_revision: "HEAD".into(),
        problem_statement: std::fs::read_to_string(fx.join("calc_problem.txt")).unwrap(),
        validation_command: None,
        time_limit: None,
    }
}

pub fn scenario_config(name: &str) -> IrvConfig {
    let path = scenario_dir(name).join("config.txt");
    match std::fs::read_to_string(path) {
        Ok(text) => parse_config_text(&text).unwrap(),
        Err(_) => IrvConfig::default(),
    }
}

pub struct ScenarioRun {
    pub report: RunReport,
    pub prompts: Vec<Vec<Message>>,
    pub ws: Workspace,
    pub _dir: tempfile::TempDir,
}

/// Replay a bundled scenario transcript, capturing every request sent.
pub fn replay_scenario(name: &str) -> ScenarioRun {
    let dir = tempfile::tempdir().unwrap();
    let task = calc_task("calc");
    let mut ws = Workspace::open(&task.repo_location, "HEAD", "calc", dir.path(), IgnoreRules::default()).unwrap();
    let replay = ReplayBackend::from_path(&scenario_dir(name).join("transcript.jsonl")).unwrap();
    let (spy, seen): (_, Arc<Mutex<Vec<Vec<Message>>>>) = SpyBackend::new(replay);
    let report = run_irv_in(&mut ws, &task, &scenario_config(name), Box::new(spy), Instant::now());
    let prompts = seen.lock().unwrap().clone();
    ScenarioRun {
        report,
        prompts,
        ws,
        _dir: dir,
    }
}

pub fn golden_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}
