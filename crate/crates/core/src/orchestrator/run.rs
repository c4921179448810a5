use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::prompts;
use super::summary::{summarize_problem, ProblemSummary};
use super::{round_ms, Event, EventLog, IrvConfig, OrchestratorError, RunOutcome, RunReport};
use crate::agentio::{parse_react, AgentIoError, ChatBackend, Conversation, Message, ModelClient, ReactTurn, Role};
use crate::bench::TaskInstance;
use crate::codemap::{outline_workspace_file, view_region, RegionTarget};
use crate::codesearch::{match_files, render_match_tree, render_path_tree, KeywordQuery};
use crate::par::Exec;
use crate::patcher::{IcsrStage, IcsrState, PatcherError, RegionEdit, StageEvidence};
use crate::testkit::{
    classify_result, log_excerpt, materialize_test, run_command, run_test, DiagnosticReport, ExecutionResult, Judge,
    JudgeUnavailable, JudgeVerdict, TestArtifact, TestVerdict, CERTIFY_RUNS,
};
use crate::workspace::{DiffDocument, Snapshot, Workspace};

/// Overview lists every candidate file up to this many, directories beyond.
const OVERVIEW_MAX_FILES: usize = 60;
const JUDGE_PATCH_BYTES: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum Reproduction {
    Certified(TestArtifact),
    /// Non-strict mode: carry on with the last written test, if any.
    Unverified(Option<TestArtifact>),
    CannotReproduce(String),
}

/// Why the run stops early.
#[derive(Debug)]
enum Halt {
    Budget(String),
    Harness(String),
}

impl From<AgentIoError> for Halt {
    fn from(e: AgentIoError) -> Self {
        match e {
            AgentIoError::CallBudgetExhausted(n) => Halt::Budget(format!("llm calls ({n})")),
            AgentIoError::ContextOverflow { .. } => Halt::Budget(e.to_string()),
            other => Halt::Harness(other.to_string()),
        }
    }
}

fn harness<E: std::fmt::Display>(e: E) -> Halt {
    Halt::Harness(e.to_string())
}

enum PassEnd {
    Edited,
    Done(String),
    Aborted(IcsrStage),
}

enum Step {
    Continue(String),
    Failed(String),
    End(PassEnd),
}

struct Pass {
    iteration: u32,
    state: IcsrState,
    /// Observation shown on entering each stage, replayed after a rollback.
    entry: BTreeMap<IcsrStage, String>,
}

struct ModelJudge<'a> {
    client: &'a mut ModelClient,
    pinned: Vec<Message>,
    patch: String,
}

impl Judge for ModelJudge<'_> {
    fn judge(&mut self, result: &ExecutionResult) -> Result<JudgeVerdict, JudgeUnavailable> {
        let mut messages = self.pinned.clone();
        messages.push(Message::new(Role::User, prompts::judge_request(&log_excerpt(result), &self.patch)));
        let reply = self.client.complete(&messages).map_err(|e| JudgeUnavailable(e.to_string()))?;
        if reply.contains("VERDICT: INVALID") {
            Ok(JudgeVerdict::InvalidTest)
        } else if reply.contains("VERDICT: BUG") {
            Ok(JudgeVerdict::BugPresent)
        } else {
            Err(JudgeUnavailable("no verdict line in reply".into()))
        }
    }
}

struct Run<'a> {
    ws: &'a mut Workspace,
    config: &'a IrvConfig,
    client: &'a mut ModelClient,
    conv: Conversation,
    log: &'a mut EventLog,
    started: Instant,
    wall_clock: Duration,
    summary: ProblemSummary,
    /// Unverified reproduction: ignore the signature and leave failing runs
    /// to the judge.
    judge_only: bool,
}

fn vocabulary(stage: IcsrStage, iteration: u32) -> Vec<&'static str> {
    match stage {
        IcsrStage::Keywords if iteration > 1 => vec!["set_keywords", "reset_patch", "done"],
        IcsrStage::Keywords => vec!["set_keywords", "done"],
        IcsrStage::FileSearch => vec!["search", "rollback", "done"],
        IcsrStage::Outline => vec!["open_outline", "rollback", "done"],
        IcsrStage::Localize => vec!["view_region", "open_outline", "switch_file", "rollback", "done"],
        IcsrStage::Edit => vec!["view_region", "edit_region", "switch_file", "rollback", "done"],
    }
}

fn stage_prompt(body: &str, stage: IcsrStage, iteration: u32) -> String {
    format!(
        "{body}\n\n{}\n{}",
        prompts::stage_instruction(stage),
        prompts::actions_help(&vocabulary(stage, iteration))
    )
}

fn text_arg<'t>(turn: &'t ReactTurn, key: &str) -> Option<&'t str> {
    turn.arg(key).map(str::trim).filter(|s| !s.is_empty())
}

fn line_arg(turn: &ReactTurn, key: &str) -> Result<usize, String> {
    let raw = text_arg(turn, key).ok_or_else(|| format!("missing argument {key:?}"))?;
    raw.parse().map_err(|_| format!("argument {key:?} must be a line number, got {raw:?}"))
}

fn artifact_from(turn: &ReactTurn, version: u32) -> Result<TestArtifact, String> {
    let source = turn
        .arg("source")
        .filter(|s| !s.trim().is_empty())
        .ok_or("write_test needs a non-empty \"source\" argument")?;
    let mut artifact = TestArtifact::python(version, source);
    if let Some(command) = text_arg(turn, "command") {
        artifact.invocation = command.split_whitespace().map(String::from).collect();
    }
    artifact.validate().map_err(|e| e.to_string())?;
    Ok(artifact)
}

fn truncate_bytes(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

impl Run<'_> {
    fn call_model(&mut self, messages: &[Message]) -> Result<String, Halt> {
        if self.started.elapsed() >= self.wall_clock {
            return Err(Halt::Budget("wall clock".into()));
        }
        Ok(self.client.complete(messages)?)
    }

    /// One ReAct turn with re-prompts for unusable replies. `None` means the
    /// retries ran out.
    fn agent_turn(&mut self, vocab: &[&str]) -> Result<Option<ReactTurn>, Halt> {
        for attempt in 0..=self.config.parse_retries {
            let prompt = self.conv.assemble_prompt(self.config.window_k);
            let raw = self.call_model(&prompt)?;
            self.conv.push_assistant(raw.clone());
            match parse_react(&raw, vocab) {
                Ok(turn) => return Ok(Some(turn)),
                Err(e) => {
                    self.log.push("action-malformed", e.to_string());
                    if attempt < self.config.parse_retries {
                        self.conv.push_user(format!(
                            "Your reply could not be used: {e}\nEnd your reply with one ```action block.\n{}",
                            prompts::actions_help(vocab)
                        ));
                    }
                }
            }
        }
        Ok(None)
    }

    fn classify(&mut self, artifact: &TestArtifact, base: &Snapshot) -> Result<(TestVerdict, Option<DiagnosticReport>), Halt> {
        let result = run_test(self.ws, artifact, self.config.limits()).map_err(harness)?;
        let signature = self.summary.expected_signature.clone().filter(|_| !self.judge_only);
        let rules = self.config.rules();
        if !self.config.use_judge || !self.client.budget_left() {
            return Ok(classify_result(&result, signature.as_deref(), None, &rules));
        }
        let patch = self.ws.compute_diff(base).map_err(harness)?.text;
        let mut judge = ModelJudge {
            pinned: self.conv.messages().iter().filter(|m| m.pinned).cloned().collect(),
            patch: truncate_bytes(&patch, JUDGE_PATCH_BYTES).to_string(),
            client: &mut *self.client,
        };
        Ok(classify_result(&result, signature.as_deref(), Some(&mut judge), &rules))
    }

    /// Materialize and run `artifact` on the current tree until it has failed
    /// with the bug `CERTIFY_RUNS` times in a row.
    fn certify(&mut self, artifact: &TestArtifact, base: &Snapshot) -> Result<(bool, Option<DiagnosticReport>), Halt> {
        materialize_test(self.ws, artifact).map_err(harness)?;
        for run in 1..=CERTIFY_RUNS {
            let (verdict, report) = self.classify(artifact, base)?;
            self.log
                .push("repro-verdict", format!("v{} run {run}: {verdict}", artifact.version));
            if verdict != TestVerdict::FailBugPresent {
                let report = report.unwrap_or_else(|| DiagnosticReport {
                    verdict,
                    log_excerpt: String::new(),
                    suggestion: "The test passes on the unmodified code, so it does not reproduce the bug.".into(),
                });
                return Ok((false, Some(report)));
            }
        }
        Ok((true, None))
    }

    fn reproduce(&mut self, base: &Snapshot) -> Result<Reproduction, Halt> {
        let max = self.config.max_test_versions;
        let mut feedback: Option<String> = None;
        let mut last = None;
        for version in 1..=max {
            let request =
                prompts::reproduction_request(&self.summary.original_statement, version, max, feedback.as_deref());
            self.conv.push_user(request);
            let Some(turn) = self.agent_turn(&["write_test", "give_up"])? else {
                feedback = Some("The previous reply could not be parsed as an action.".into());
                continue;
            };
            if turn.action == "give_up" {
                self.log.push("repro-give-up", text_arg(&turn, "reason").unwrap_or(""));
                break;
            }
            let artifact = match artifact_from(&turn, version) {
                Ok(a) => a,
                Err(why) => {
                    self.log.push("repro-test-rejected", format!("v{version}: {why}"));
                    feedback = Some(why);
                    continue;
                }
            };
            self.log
                .push("repro-test-written", format!("v{version} {}", artifact.file_name));
            let (certified, report) = self.certify(&artifact, base)?;
            last = Some(artifact.clone());
            if certified {
                self.log.push("repro-certified", format!("v{version}"));
                return Ok(Reproduction::Certified(artifact));
            }
            feedback = report.map(|r| r.render());
        }
        if self.config.strict_reproduction {
            Ok(Reproduction::CannotReproduce(format!("no certified test after {max} version(s)")))
        } else {
            Ok(Reproduction::Unverified(last))
        }
    }

    /// Ask for a better test and certify it on the unpatched tree.
    fn refine_test(
        &mut self,
        current: &TestArtifact,
        report: &DiagnosticReport,
        base: &Snapshot,
    ) -> Result<Option<TestArtifact>, Halt> {
        let version = current.version + 1;
        self.conv.push_user(prompts::refinement_request(&report.render(), version));
        let Some(turn) = self.agent_turn(&["write_test", "give_up"])? else {
            self.log.push("test-refinement-rejected", format!("v{version}: unparseable reply"));
            return Ok(None);
        };
        if turn.action == "give_up" {
            self.log.push("test-refinement-rejected", format!("v{version}: agent gave up"));
            return Ok(None);
        }
        let artifact = match artifact_from(&turn, version) {
            Ok(a) => a,
            Err(why) => {
                self.log.push("test-refinement-rejected", format!("v{version}: {why}"));
                return Ok(None);
            }
        };
        let patched = self.ws.take_snapshot_at("patched").map_err(harness)?;
        self.ws.restore_snapshot(base).map_err(harness)?;
        let certified = self.certify(&artifact, base);
        self.ws.restore_snapshot(&patched).map_err(harness)?;
        if certified?.0 {
            self.log.push("test-refined", format!("v{version} certified"));
            Ok(Some(artifact))
        } else {
            self.log.push("test-refinement-rejected", format!("v{version}: not certified"));
            Ok(None)
        }
    }

    fn overview(&self) -> Result<String, Halt> {
        let extensions = &self.config.search_extensions;
        let files: Vec<String> = self
            .ws
            .list_files()
            .map_err(harness)?
            .into_iter()
            .filter(|p| extensions.iter().any(|e| p.ends_with(e.as_str())))
            .collect();
        if files.len() <= OVERVIEW_MAX_FILES {
            return Ok(render_path_tree(&files, ".").text);
        }
        let mut dirs: Vec<String> = files
            .iter()
            .filter_map(|f| f.rsplit_once('/').map(|(d, _)| format!("{d}/")))
            .collect();
        dirs.dedup();
        Ok(render_path_tree(&dirs, ".").text)
    }

    fn outline_text(&self, path: &str) -> Result<String, String> {
        let outline = outline_workspace_file(self.ws, path).map_err(|e| e.to_string())?;
        let body = if outline.symbols.is_empty() {
            "(no classes or functions)".to_string()
        } else {
            outline.render()
        };
        Ok(format!("Outline of {path} ({} lines):\n{body}", outline.total_lines))
    }

    fn icsr_pass(&mut self, iteration: u32, feedback: Option<String>, base: &Snapshot) -> Result<PassEnd, Halt> {
        let label = format!("iteration-{iteration}");
        let state =
            IcsrState::begin(self.ws, &mut self.conv, &label, self.config.max_stage_attempts).map_err(harness)?;
        let intro = prompts::pass_intro(iteration, &self.overview()?, feedback.as_deref());
        let mut pass = Pass {
            iteration,
            state,
            entry: BTreeMap::from([(IcsrStage::Keywords, intro.clone())]),
        };
        let mut pending = stage_prompt(&intro, IcsrStage::Keywords, iteration);
        loop {
            self.conv.push_user(pending);
            let stage = pass.state.stage;
            let step = match self.agent_turn(&vocabulary(stage, iteration))? {
                Some(turn) => self.act(&mut pass, &turn, base, &label)?,
                None => Step::Failed("Your replies could not be parsed.".into()),
            };
            pending = match step {
                Step::Continue(message) => message,
                Step::End(end) => return Ok(end),
                Step::Failed(why) => {
                    if let Err(PatcherError::BudgetExhausted(stage)) = pass.state.record_failure() {
                        return Ok(PassEnd::Aborted(stage));
                    }
                    let stage = pass.state.stage;
                    stage_prompt(&format!("That did not work: {why}"), stage, iteration)
                }
            };
        }
    }

    fn advance(&mut self, pass: &mut Pass, evidence: StageEvidence, observation: String) -> Result<Step, Halt> {
        match pass.state.advance_stage(self.ws, &mut self.conv, evidence) {
            Ok(()) => {}
            Err(PatcherError::Workspace(e)) => return Err(harness(e)),
            Err(e) => return Ok(Step::Failed(e.to_string())),
        }
        let stage = pass.state.stage;
        self.log
            .push("stage-advance", format!("iteration {}: {stage}", pass.iteration));
        pass.entry.insert(stage, observation.clone());
        Ok(Step::Continue(stage_prompt(&observation, stage, pass.iteration)))
    }

    /// Switch focus to `path`, discarding pending edits; returns its outline.
    fn switch(&mut self, pass: &mut Pass, path: &str) -> Result<Result<String, String>, Halt> {
        if !self.ws.exists(path) {
            return Ok(Err(format!("no such file: {path}")));
        }
        let outline = match self.outline_text(path) {
            Ok(o) => o,
            Err(e) => return Ok(Err(e)),
        };
        match pass.state.switch_active_file(self.ws, path) {
            Ok(()) => {}
            Err(PatcherError::Workspace(e)) => return Err(harness(e)),
            Err(e) => return Ok(Err(e.to_string())),
        }
        self.log
            .push("switch-file", format!("iteration {}: {path}", pass.iteration));
        let observation = format!("Active file is now {path}; pending edits were discarded.\n{outline}");
        pass.entry.insert(IcsrStage::Localize, observation.clone());
        Ok(Ok(observation))
    }

    fn act(&mut self, pass: &mut Pass, turn: &ReactTurn, base: &Snapshot, label: &str) -> Result<Step, Halt> {
        let iteration = pass.iteration;
        let stage = pass.state.stage;
        match turn.action.as_str() {
            "done" => Ok(Step::End(PassEnd::Done(text_arg(turn, "reason").unwrap_or("").to_string()))),
            "set_keywords" => {
                let Some(list) = text_arg(turn, "keywords") else {
                    return Ok(Step::Failed("set_keywords needs a \"keywords\" argument".into()));
                };
                let attempt = pass.state.attempts_at(IcsrStage::Keywords) + 1;
                match KeywordQuery::parse(list, attempt) {
                    Err(e) => Ok(Step::Failed(e.to_string())),
                    Ok(query) => {
                        let observation = format!(
                            "Keywords set: {}. Search the project tree with them.",
                            query.originals().join(", ")
                        );
                        self.advance(pass, StageEvidence::Keywords(query), observation)
                    }
                }
            }
            "reset_patch" => {
                let reason = text_arg(turn, "reason").unwrap_or("");
                self.ws.restore_snapshot(base).map_err(harness)?;
                let attempts = pass.state.attempts.clone();
                pass.state = IcsrState::begin(self.ws, &mut self.conv, label, self.config.max_stage_attempts)
                    .map_err(harness)?;
                pass.state.attempts = attempts;
                self.log.push("reset-patch", format!("iteration {iteration}: {reason}"));
                let observation = "Every modification was discarded; the code is back at the original revision.";
                let intro = pass.entry.get(&IcsrStage::Keywords).cloned().unwrap_or_default();
                pass.entry
                    .insert(IcsrStage::Keywords, format!("{intro}\n{observation}"));
                Ok(Step::Continue(stage_prompt(observation, IcsrStage::Keywords, iteration)))
            }
            "search" => {
                let query = pass.state.query.clone().expect("keywords precede search");
                let limit = text_arg(turn, "limit")
                    .and_then(|l| l.parse().ok())
                    .unwrap_or(self.config.search_limit);
                let matches = match_files(self.ws, &query, limit, &self.config.search(), Exec::default())
                    .map_err(harness)?;
                if matches.is_empty() {
                    self.log.push(
                        "search-empty",
                        format!("iteration {iteration}: {}", query.originals().join(", ")),
                    );
                    return Ok(Step::Failed(
                        "no file matched the keywords. Roll back to the keywords stage and choose different ones."
                            .into(),
                    ));
                }
                let tree = render_match_tree(&matches, ".");
                let more = if matches.truncated { ", more were cut off" } else { "" };
                let observation = format!("Search results ({} file(s){more}):\n{}", matches.entries.len(), tree.text);
                self.advance(pass, StageEvidence::Matches(matches), observation)
            }
            "open_outline" => {
                let Some(path) = text_arg(turn, "path") else {
                    return Ok(Step::Failed("open_outline needs a \"path\" argument".into()));
                };
                if stage != IcsrStage::Outline {
                    if pass.state.active_file.as_deref() == Some(path) {
                        return Ok(match self.outline_text(path) {
                            Ok(o) => Step::Continue(stage_prompt(&o, stage, iteration)),
                            Err(e) => Step::Failed(e),
                        });
                    }
                    return Ok(match self.switch(pass, path)? {
                        Ok(o) => Step::Continue(stage_prompt(&o, IcsrStage::Localize, iteration)),
                        Err(e) => Step::Failed(e),
                    });
                }
                if !self.ws.exists(path) {
                    return Ok(Step::Failed(format!("no such file: {path}")));
                }
                match self.outline_text(path) {
                    Ok(o) => self.advance(pass, StageEvidence::File(path.to_string()), o),
                    Err(e) => Ok(Step::Failed(e)),
                }
            }
            "switch_file" => {
                let Some(path) = text_arg(turn, "path") else {
                    return Ok(Step::Failed("switch_file needs a \"path\" argument".into()));
                };
                Ok(match self.switch(pass, path)? {
                    Ok(o) => Step::Continue(stage_prompt(&o, IcsrStage::Localize, iteration)),
                    Err(e) => Step::Failed(e),
                })
            }
            "view_region" => {
                let active = pass.state.active_file.clone().unwrap_or_default();
                let path = text_arg(turn, "path").unwrap_or(&active).to_string();
                let target = match text_arg(turn, "symbol") {
                    Some(symbol) => RegionTarget::Symbol(symbol.to_string()),
                    None => match (line_arg(turn, "start"), line_arg(turn, "end")) {
                        (Ok(s), Ok(e)) => RegionTarget::Lines(s, e),
                        (Err(e), _) | (_, Err(e)) => {
                            return Ok(Step::Failed(format!("view_region needs \"symbol\" or \"start\"/\"end\": {e}")))
                        }
                    },
                };
                let mut prefix = String::new();
                if path != active {
                    match self.switch(pass, &path)? {
                        Ok(_) => prefix = format!("Active file is now {path}; pending edits were discarded.\n"),
                        Err(e) => return Ok(Step::Failed(e)),
                    }
                }
                let view = match view_region(self.ws, &path, &target) {
                    Ok(v) => v,
                    Err(e) => return Ok(Step::Failed(e.to_string())),
                };
                let symbol = view
                    .enclosing_symbol
                    .as_ref()
                    .map(|s| format!(" ({s})"))
                    .unwrap_or_default();
                let observation = format!(
                    "{prefix}{path} lines {}-{}{symbol}:\n{}",
                    view.start_line, view.end_line, view.text
                );
                if pass.state.stage == IcsrStage::Localize {
                    let evidence = StageEvidence::Region {
                        start: view.start_line,
                        end: view.end_line,
                        symbol: view.enclosing_symbol.clone(),
                    };
                    self.advance(pass, evidence, observation)
                } else {
                    Ok(Step::Continue(stage_prompt(&observation, IcsrStage::Edit, iteration)))
                }
            }
            "edit_region" => {
                let (start, end) = match (line_arg(turn, "start"), line_arg(turn, "end")) {
                    (Ok(s), Ok(e)) => (s, e),
                    (Err(e), _) | (_, Err(e)) => return Ok(Step::Failed(e)),
                };
                let Some(replacement) = turn.arg("replacement") else {
                    return Ok(Step::Failed("edit_region needs a \"replacement\" argument".into()));
                };
                let active = pass.state.active_file.clone().unwrap_or_default();
                let edit = RegionEdit {
                    path: text_arg(turn, "path").unwrap_or(&active).to_string(),
                    start_line: start,
                    end_line: end,
                    replacement_text: replacement.to_string(),
                    rationale: text_arg(turn, "rationale").unwrap_or("").to_string(),
                };
                match pass.state.apply_region_edit(self.ws, &edit) {
                    Ok(diff) => {
                        self.log.push(
                            "edit-applied",
                            format!(
                                "iteration {iteration}: {} lines {start}-{end}, {} file(s), {} hunk(s)",
                                edit.path, diff.files_touched, diff.hunk_count
                            ),
                        );
                        Ok(Step::End(PassEnd::Edited))
                    }
                    Err(PatcherError::Workspace(e)) => Err(harness(e)),
                    Err(e) => Ok(Step::Failed(e.to_string())),
                }
            }
            "rollback" => {
                let target = match text_arg(turn, "stage").map(str::parse::<IcsrStage>) {
                    Some(Ok(t)) => t,
                    Some(Err(e)) => return Ok(Step::Failed(e.to_string())),
                    None => return Ok(Step::Failed("rollback needs a \"stage\" argument".into())),
                };
                let reason = text_arg(turn, "reason").unwrap_or("");
                match pass.state.rollback_stage(self.ws, &mut self.conv, target, reason) {
                    Ok(()) => {}
                    Err(PatcherError::Workspace(e)) => return Err(harness(e)),
                    Err(e) => return Ok(Step::Failed(e.to_string())),
                }
                self.log
                    .push("rollback", format!("iteration {iteration}: {stage} -> {target}: {reason}"));
                pass.entry.retain(|s, _| *s <= target);
                let entry = pass.entry.get(&target).cloned().unwrap_or_default();
                let observation = format!("{entry}\n\nRolled back to stage {target}: {reason}");
                Ok(Step::Continue(stage_prompt(&observation, target, iteration)))
            }
            other => Ok(Step::Failed(format!("action {other} is not available here"))),
        }
    }

    fn post_finalize(&mut self) {
        let Some(command) = self.config.post_finalize_hook.clone().filter(|c| !c.trim().is_empty()) else {
            return;
        };
        let argv = vec!["sh".to_string(), "-c".to_string(), command];
        match run_command(self.ws.root(), &argv, self.config.limits()) {
            Ok(r) => self.log.push("post-finalize-hook", format!("exit {}", r.exit_code)),
            Err(e) => self.log.push("post-finalize-hook", e.to_string()),
        }
    }

    /// The IRV loop proper. Returns the outcome; the final tree is left in
    /// the workspace.
    fn iterate(&mut self, base: &Snapshot, mut test: Option<TestArtifact>, mut certified: bool) -> (RunOutcome, u32) {
        let mut feedback: Option<String> = None;
        let mut first_passing: Option<Snapshot> = None;
        let mut iterations = 0;
        let mut exhausted = true;
        self.judge_only = !certified;
        for iteration in 1..=self.config.max_irv_iterations {
            iterations = iteration;
            self.log.push("icsr-pass-start", format!("iteration {iteration}"));
            match self.icsr_pass(iteration, feedback.take(), base) {
                Ok(PassEnd::Edited) => {}
                Ok(PassEnd::Done(reason)) => {
                    self.log.push("agent-done", format!("iteration {iteration}: {reason}"));
                    exhausted = false;
                    break;
                }
                Ok(PassEnd::Aborted(stage)) => {
                    self.log
                        .push("stage-budget-exhausted", format!("iteration {iteration}: {stage}"));
                    feedback = Some(format!(
                        "The previous iteration was abandoned: the {stage} stage ran out of attempts. Try a different approach."
                    ));
                    continue;
                }
                Err(halt) => {
                    self.log_halt(halt);
                    exhausted = false;
                    break;
                }
            }

            let Some(artifact) = test.clone() else {
                self.log.push("test-skipped", format!("iteration {iteration}: no reproduction test"));
                feedback = Some("There is no reproduction test; re-check the patch against the problem summary.".into());
                continue;
            };
            let evaluated = self.evaluate(&artifact, base, iteration);
            let (verdict, report) = match evaluated {
                Ok(v) => v,
                Err(halt) => {
                    self.log_halt(halt);
                    exhausted = false;
                    break;
                }
            };
            if verdict == TestVerdict::Pass {
                if certified {
                    return (self.resolve(iteration), iterations);
                }
                self.log.push("unverified-pass", format!("iteration {iteration}"));
                if self.config.keep_first_passing && first_passing.is_none() {
                    match self.ws.take_snapshot_at("first-passing") {
                        Ok(s) => first_passing = Some(s),
                        Err(e) => self.log.push("harness-error", e.to_string()),
                    }
                }
                feedback = Some(
                    "The test now passes, but it was never shown to reproduce the bug. Double-check the patch.".into(),
                );
                continue;
            }
            let report = report.expect("failing verdicts carry a report");
            if verdict == TestVerdict::FailInvalidTest {
                match self.refine_test(&artifact, &report, base) {
                    Ok(Some(refined)) => {
                        test = Some(refined.clone());
                        certified = true;
                        self.judge_only = false;
                        match self.evaluate(&refined, base, iteration) {
                            Ok((TestVerdict::Pass, _)) => return (self.resolve(iteration), iterations),
                            Ok((_, r)) => feedback = r.map(|r| r.render()),
                            Err(halt) => {
                                self.log_halt(halt);
                                exhausted = false;
                                break;
                            }
                        }
                        continue;
                    }
                    Ok(None) => {}
                    Err(halt) => {
                        self.log_halt(halt);
                        exhausted = false;
                        break;
                    }
                }
            }
            feedback = Some(report.render());
        }
        if exhausted {
            self.log.push("budget-exhausted", format!("irv iterations ({})", self.config.max_irv_iterations));
        }
        if let Some(snapshot) = first_passing {
            if let Err(e) = self.ws.restore_snapshot(&snapshot) {
                self.log.push("harness-error", e.to_string());
            } else {
                self.log.push("keep-first-passing", "restored the first passing patch");
            }
        }
        (RunOutcome::Unresolved, iterations)
    }

    fn evaluate(
        &mut self,
        artifact: &TestArtifact,
        base: &Snapshot,
        iteration: u32,
    ) -> Result<(TestVerdict, Option<DiagnosticReport>), Halt> {
        materialize_test(self.ws, artifact).map_err(harness)?;
        let (verdict, report) = self.classify(artifact, base)?;
        self.log.push(
            "test-verdict",
            format!("iteration {iteration}: v{} {verdict}", artifact.version),
        );
        Ok((verdict, report))
    }

    fn resolve(&mut self, iteration: u32) -> RunOutcome {
        self.log.push("resolved", format!("iteration {iteration}"));
        self.post_finalize();
        RunOutcome::Resolved
    }

    fn log_halt(&mut self, halt: Halt) {
        match halt {
            Halt::Budget(what) => self.log.push("budget-exhausted", what),
            Halt::Harness(what) => self.log.push("harness-error", what),
        }
    }
}

fn pinned_conversation(summary: &ProblemSummary) -> Conversation {
    let mut conv = Conversation::new();
    conv.push(Message::pinned(Role::System, prompts::AGENT_SYSTEM));
    conv.push(Message::pinned(Role::System, prompts::summary_pin(&summary.summary_text)));
    conv
}

/// Certify a reproduction test on the current (unpatched) tree in a fresh
/// conversation.
pub fn establish_reproduction(
    ws: &mut Workspace,
    summary: &ProblemSummary,
    config: &IrvConfig,
    client: &mut ModelClient,
) -> (Reproduction, Vec<Event>) {
    let started = Instant::now();
    let mut log = EventLog::new(started);
    let base = match ws.take_snapshot_at("base") {
        Ok(s) => s,
        Err(e) => return (Reproduction::CannotReproduce(e.to_string()), log.into_vec()),
    };
    let mut run = Run {
        ws,
        config,
        client,
        conv: pinned_conversation(summary),
        log: &mut log,
        started,
        wall_clock: Duration::from_secs(config.wall_clock_budget_s),
        summary: summary.clone(),
        judge_only: false,
    };
    let outcome = match run.reproduce(&base) {
        Ok(r) => r,
        Err(halt) => {
            let why = match &halt {
                Halt::Budget(w) | Halt::Harness(w) => w.clone(),
            };
            run.log_halt(halt);
            Reproduction::CannotReproduce(why)
        }
    };
    (outcome, log.into_vec())
}

/// Run the whole loop on an already opened workspace at the base revision.
pub fn run_irv_in(
    ws: &mut Workspace,
    task: &TaskInstance,
    config: &IrvConfig,
    backend: Box<dyn ChatBackend>,
    started: Instant,
) -> RunReport {
    let mut log = EventLog::new(started);
    let mut client = ModelClient::new(backend, config.params(), config.context_limit, config.max_llm_calls);
    let mut base = None;
    let (outcome, iterations) = drive(ws, task, config, &mut client, &mut log, started, &mut base);

    let (outcome, final_diff) = match outcome {
        Some(RunOutcome::CannotReproduce) => (RunOutcome::CannotReproduce, DiffDocument::empty()),
        o => {
            let diff = base_diff(ws, base.as_ref(), &mut log);
            let outcome = match o {
                Some(RunOutcome::Resolved) => RunOutcome::Resolved,
                _ if diff.is_empty => RunOutcome::EmptyPatch,
                _ => RunOutcome::Unresolved,
            };
            if outcome != RunOutcome::Resolved {
                log.push(
                    "default-acceptance",
                    format!("{outcome}: {} file(s), {} hunk(s)", diff.files_touched, diff.hunk_count),
                );
            }
            (outcome, diff)
        }
    };
    RunReport {
        instance_id: task.instance_id.clone(),
        outcome,
        final_diff,
        iterations_used: iterations,
        llm_calls_used: client.calls(),
        duration_s: round_ms(started.elapsed().as_secs_f64()),
        event_log: log.into_vec(),
    }
}

fn base_diff(ws: &Workspace, base: Option<&Snapshot>, log: &mut EventLog) -> DiffDocument {
    match base.map(|b| ws.compute_diff(b)) {
        Some(Ok(d)) => d,
        Some(Err(e)) => {
            log.push("harness-error", e.to_string());
            DiffDocument::empty()
        }
        None => DiffDocument::empty(),
    }
}

/// Everything up to the end of the loop. `None` means the run stopped
/// before the loop could produce an outcome of its own.
fn drive(
    ws: &mut Workspace,
    task: &TaskInstance,
    config: &IrvConfig,
    client: &mut ModelClient,
    log: &mut EventLog,
    started: Instant,
    base_out: &mut Option<Snapshot>,
) -> (Option<RunOutcome>, u32) {
    if let Err(e) = config.validate() {
        log.push("harness-error", e.to_string());
        return (None, 0);
    }
    let base = match ws.take_snapshot_at("base") {
        Ok(s) => s,
        Err(e) => {
            log.push("harness-error", e.to_string());
            return (None, 0);
        }
    };
    *base_out = Some(base.clone());

    let summary = match summarize_problem(&task.problem_statement, client) {
        Ok(s) => s,
        Err(OrchestratorError::Backend(e)) => {
            match Halt::from(e) {
                Halt::Budget(w) => log.push("budget-exhausted", w),
                Halt::Harness(w) => log.push("harness-error", w),
            }
            return (None, 0);
        }
        Err(e) => {
            log.push("harness-error", e.to_string());
            return (None, 0);
        }
    };
    let signature = summary.expected_signature.as_deref().unwrap_or("none");
    if summary.degraded {
        log.push("degraded-summary", format!("signature: {signature}"));
    } else {
        log.push("summary", format!("signature: {signature}"));
    }

    let wall_clock = Duration::from_secs(task.time_limit.unwrap_or(config.wall_clock_budget_s));
    let mut run = Run {
        ws,
        config,
        client,
        conv: pinned_conversation(&summary),
        log,
        started,
        wall_clock,
        summary,
        judge_only: false,
    };
    let (test, certified) = match run.reproduce(&base) {
        Ok(Reproduction::Certified(a)) => (Some(a), true),
        Ok(Reproduction::Unverified(a)) => {
            run.log.push(
                "unverified-reproduction",
                match &a {
                    Some(a) => format!("continuing with unverified v{}", a.version),
                    None => "continuing without a test".to_string(),
                },
            );
            (a, false)
        }
        Ok(Reproduction::CannotReproduce(why)) => {
            run.log.push("cannot-reproduce", why);
            return (Some(RunOutcome::CannotReproduce), 0);
        }
        Err(halt) => {
            let why = match &halt {
                Halt::Budget(w) | Halt::Harness(w) => w.clone(),
            };
            run.log_halt(halt);
            run.log.push("cannot-reproduce", why);
            return (Some(RunOutcome::CannotReproduce), 0);
        }
    };
    let (outcome, iterations) = run.iterate(&base, test, certified);
    (Some(outcome), iterations)
}
