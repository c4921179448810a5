//! The repair loop: summarize the problem, certify a failing reproduction
//! test, then alternate structured patching and testing until the test
//! passes or a budget runs out.

pub mod prompts;
mod run;
mod summary;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentio::backend::DEFAULT_CONTEXT_LIMIT;
use crate::agentio::{AgentIoError, BackendParams, ChatBackend};
use crate::bench::TaskInstance;
use crate::codesearch::SearchConfig;
use crate::patcher::DEFAULT_MAX_STAGE_ATTEMPTS;
use crate::testkit::{ClassifyRules, Limits, TAIL_BYTES};
use crate::workspace::{DiffDocument, IgnoreRules, Workspace};

pub use run::{establish_reproduction, run_irv_in, Reproduction};
pub use summary::{parse_summary, summarize_problem, ProblemSummary, MAX_SUMMARY_CHARS};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("problem statement is empty")]
    EmptyStatement,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] AgentIoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrvConfig {
    pub max_irv_iterations: u32,
    pub max_llm_calls: usize,
    pub wall_clock_budget_s: u64,
    pub window_k: usize,
    pub max_stage_attempts: u32,
    pub strict_reproduction: bool,
    /// Finalize the first patch that made the (unverified) test pass
    /// instead of the last one.
    pub keep_first_passing: bool,
    pub max_test_versions: u32,
    /// Re-prompts after an unparseable reply before the turn counts as failed.
    pub parse_retries: u32,
    pub use_judge: bool,
    pub test_timeout_s: u64,
    pub context_limit: usize,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub search_extensions: Vec<String>,
    pub search_limit: usize,
    pub invalid_markers: Vec<String>,
    /// Shell command run in the patched tree after a pass. Logged only.
    pub post_finalize_hook: Option<String>,
}

impl Default for IrvConfig {
    fn default() -> Self {
        let params = BackendParams::default();
        let search = SearchConfig::default();
        Self {
            max_irv_iterations: 6,
            max_llm_calls: 60,
            wall_clock_budget_s: 1800,
            window_k: crate::agentio::conversation::DEFAULT_WINDOW,
            max_stage_attempts: DEFAULT_MAX_STAGE_ATTEMPTS,
            strict_reproduction: true,
            keep_first_passing: false,
            max_test_versions: 3,
            parse_retries: 2,
            use_judge: true,
            test_timeout_s: crate::testkit::DEFAULT_TIMEOUT.as_secs(),
            context_limit: DEFAULT_CONTEXT_LIMIT,
            model_id: params.model_id,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            search_extensions: search.extensions,
            search_limit: search.limit,
            invalid_markers: ClassifyRules::default().invalid_markers,
            post_finalize_hook: None,
        }
    }
}

impl IrvConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let budgets = [
            ("max_irv_iterations", self.max_irv_iterations as u64),
            ("max_llm_calls", self.max_llm_calls as u64),
            ("wall_clock_budget_s", self.wall_clock_budget_s),
            ("window_k", self.window_k as u64),
            ("max_stage_attempts", self.max_stage_attempts as u64),
            ("max_test_versions", self.max_test_versions as u64),
            ("test_timeout_s", self.test_timeout_s),
            ("context_limit", self.context_limit as u64),
            ("search_limit", self.search_limit as u64),
        ];
        if let Some((name, _)) = budgets.iter().find(|(_, v)| *v == 0) {
            return Err(OrchestratorError::InvalidConfig(format!("{name} must be at least 1")));
        }
        self.params().validate()?;
        Ok(())
    }

    pub fn params(&self) -> BackendParams {
        BackendParams {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            extensions: self.search_extensions.clone(),
            limit: self.search_limit,
            ..SearchConfig::default()
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            timeout: std::time::Duration::from_secs(self.test_timeout_s),
            output_cap: TAIL_BYTES,
        }
    }

    pub fn rules(&self) -> ClassifyRules {
        ClassifyRules {
            invalid_markers: self.invalid_markers.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RunOutcome {
    Resolved,
    Unresolved,
    EmptyPatch,
    CannotReproduce,
}

impl RunOutcome {
    pub const ALL: [RunOutcome; 4] = [
        RunOutcome::Resolved,
        RunOutcome::Unresolved,
        RunOutcome::EmptyPatch,
        RunOutcome::CannotReproduce,
    ];
}

impl std::fmt::Display for RunOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Seconds since the run started.
    pub t: f64,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub instance_id: String,
    pub outcome: RunOutcome,
    #[serde(rename = "diff", with = "diff_as_text")]
    pub final_diff: DiffDocument,
    #[serde(rename = "iterations")]
    pub iterations_used: u32,
    #[serde(rename = "llm_calls")]
    pub llm_calls_used: usize,
    pub duration_s: f64,
    #[serde(rename = "events")]
    pub event_log: Vec<Event>,
}

mod diff_as_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::workspace::DiffDocument;

    pub fn serialize<S: Serializer>(doc: &DiffDocument, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&doc.text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DiffDocument, D::Error> {
        Ok(DiffDocument::from_text(&String::deserialize(d)?))
    }
}

impl RunReport {
    /// `kind: detail` lines, the timing-free view used by golden logs.
    pub fn event_lines(&self) -> Vec<String> {
        self.event_log.iter().map(|e| format!("{}: {}", e.kind, e.detail)).collect()
    }

    pub fn has_event(&self, kind: &str) -> bool {
        self.event_log.iter().any(|e| e.kind == kind)
    }

    /// Writes `<dir>/<id>.json` and `<dir>/<id>.patch`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let json = dir.join(format!("{}.json", self.instance_id));
        let patch = dir.join(format!("{}.patch", self.instance_id));
        let body = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(&json, body + "\n")?;
        fs::write(&patch, &self.final_diff.text)?;
        Ok((json, patch))
    }
}

#[derive(Debug)]
pub(crate) struct EventLog {
    started: Instant,
    events: Vec<Event>,
}

impl EventLog {
    pub(crate) fn new(started: Instant) -> Self {
        Self {
            started,
            events: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, kind: &str, detail: impl Into<String>) {
        self.events.push(Event {
            t: round_ms(self.started.elapsed().as_secs_f64()),
            kind: kind.to_string(),
            detail: detail.into(),
        });
    }

    pub(crate) fn into_vec(self) -> Vec<Event> {
        self.events
    }
}

fn round_ms(s: f64) -> f64 {
    (s * 1000.0).round() / 1000.0
}

/// Open the task's workspace under `work_root` and run the loop on it.
pub fn run_irv(task: &TaskInstance, config: &IrvConfig, backend: Box<dyn ChatBackend>, work_root: &Path) -> RunReport {
    let started = Instant::now();
    let mut ws = match Workspace::open(
        &task.repo_location,
        &task.base_revision,
        &task.instance_id,
        work_root,
        IgnoreRules::default(),
    ) {
        Ok(ws) => ws,
        Err(e) => return harness_failure(&task.instance_id, started, format!("workspace: {e}")),
    };
    run_irv_in(&mut ws, task, config, backend, started)
}

pub(crate) fn harness_failure(instance_id: &str, started: Instant, detail: String) -> RunReport {
    let mut log = EventLog::new(started);
    log.push("harness-error", detail);
    RunReport {
        instance_id: instance_id.to_string(),
        outcome: RunOutcome::Unresolved,
        final_diff: DiffDocument::empty(),
        iterations_used: 0,
        llm_calls_used: 0,
        duration_s: round_ms(started.elapsed().as_secs_f64()),
        event_log: log.into_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = IrvConfig::default();
        assert_eq!((c.max_irv_iterations, c.max_llm_calls, c.wall_clock_budget_s), (6, 60, 1800));
        assert!(c.strict_reproduction && !c.keep_first_passing);
        c.validate().unwrap();
        let bad = IrvConfig {
            max_llm_calls: 0,
            ..IrvConfig::default()
        };
        assert!(matches!(bad.validate(), Err(OrchestratorError::InvalidConfig(m)) if m.contains("max_llm_calls")));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<IrvConfig>(r#"{"max_irv_iteration": 2}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let c: IrvConfig = serde_json::from_str(r#"{"max_irv_iterations": 2}"#).unwrap();
        assert_eq!(c.max_irv_iterations, 2);
        assert_eq!(c.max_llm_calls, 60);
    }

    #[test]
    fn report_json_shape() {
        let report = RunReport {
            instance_id: "calc-1".into(),
            outcome: RunOutcome::EmptyPatch,
            final_diff: DiffDocument::empty(),
            iterations_used: 2,
            llm_calls_used: 7,
            duration_s: 0.5,
            event_log: vec![Event {
                t: 0.0,
                kind: "summary".into(),
                detail: "x".into(),
            }],
        };
        let v = serde_json::to_value(&report).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = ["instance_id", "outcome", "diff", "iterations", "llm_calls", "duration_s", "events"];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert_eq!(v["outcome"], "EmptyPatch");
        let back: RunReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, report);
    }
}
