//! Reproduction tests: materialize, execute in a subprocess sandbox, classify.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Component, Path};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workspace::{Workspace, WorkspaceError, RESERVED_TEST_DIR};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const TAIL_BYTES: usize = 8 * 1024;
pub const EXCERPT_BYTES: usize = 4 * 1024;
/// Exit code reported for a run killed at its deadline (128 + SIGKILL).
pub const KILL_EXIT_CODE: i32 = 137;
/// Consecutive bug-present runs needed to certify a reproduction test.
pub const CERTIFY_RUNS: usize = 2;

#[derive(Debug, Error)]
pub enum TestkitError {
    #[error("malformed test artifact: {0}")]
    Malformed(String),
    #[error("could not spawn {program}: {reason}")]
    SpawnFailure { program: String, reason: String },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestArtifact {
    pub file_name: String,
    pub source_text: String,
    pub invocation: Vec<String>,
    pub version: u32,
}

impl TestArtifact {
    pub fn default_file_name(version: u32) -> String {
        format!("{RESERVED_TEST_DIR}/test_repro_v{version}.py")
    }

    /// A python script under the reserved directory, run directly.
    pub fn python(version: u32, source_text: impl Into<String>) -> Self {
        let file_name = Self::default_file_name(version);
        Self {
            invocation: vec!["python3".into(), file_name.clone()],
            file_name,
            source_text: source_text.into(),
            version,
        }
    }

    pub fn validate(&self) -> Result<(), TestkitError> {
        let path = Path::new(&self.file_name);
        let mut components = path.components();
        let in_reserved = components.next() == Some(Component::Normal(RESERVED_TEST_DIR.as_ref()));
        let rest_ok = components.clone().next().is_some() && components.all(|c| matches!(c, Component::Normal(_)));
        if !(in_reserved && rest_ok) {
            return Err(TestkitError::Malformed(format!(
                "{} is not inside {RESERVED_TEST_DIR}/",
                self.file_name
            )));
        }
        if self.invocation.is_empty() {
            return Err(TestkitError::Malformed("empty invocation".into()));
        }
        if self.version == 0 {
            return Err(TestkitError::Malformed("version must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn materialize_test(ws: &Workspace, artifact: &TestArtifact) -> Result<(), TestkitError> {
    artifact.validate()?;
    ws.write(&artifact.file_name, artifact.source_text.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub timeout: Duration,
    pub output_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            output_cap: TAIL_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout_tail: String,
    pub stderr_tail: String,
    pub duration_s: f64,
    pub timed_out: bool,
}

fn spawn_tail_reader<R: Read + Send + 'static>(mut source: R, cap: usize) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut tail: Vec<u8> = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match source.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    tail.extend_from_slice(&buf[..n]);
                    if tail.len() > cap {
                        let cut = tail.len() - cap;
                        tail.drain(..cut);
                    }
                }
            }
        }
        tail
    })
}

/// Replace absolute workspace paths so output is independent of where the
/// workspace lives.
fn relativize(text: &str, root: &Path) -> String {
    let mut out = text.to_string();
    let mut roots = vec![root.to_path_buf()];
    if let Ok(canon) = root.canonicalize() {
        if canon != root {
            roots.push(canon);
        }
    }
    for r in roots {
        let r = r.display().to_string();
        out = out.replace(&format!("{r}/"), "").replace(&r, ".");
    }
    out
}

/// Run `argv` in `root` with `REPETON=1`, killing the process group at the
/// deadline.
pub fn run_command(root: &Path, argv: &[String], limits: Limits) -> Result<ExecutionResult, TestkitError> {
    let (program, args) = argv.split_first().ok_or_else(|| TestkitError::SpawnFailure {
        program: String::new(),
        reason: "empty command".into(),
    })?;
    let started = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .current_dir(root)
        .env("REPETON", "1")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| TestkitError::SpawnFailure {
            program: program.clone(),
            reason: e.to_string(),
        })?;

    let stdout = spawn_tail_reader(child.stdout.take().expect("piped"), limits.output_cap);
    let stderr = spawn_tail_reader(child.stderr.take().expect("piped"), limits.output_cap);

    let pid = child.id() as libc::pid_t;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if started.elapsed() >= limits.timeout => {
                timed_out = true;
                // SAFETY: signalling our own child's process group.
                unsafe {
                    libc::kill(-pid, libc::SIGKILL);
                }
                let _ = child.kill();
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(_) => break None,
        }
    };
    if !timed_out {
        // Reap anything the test left running in its group.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }

    let exit_code = if timed_out {
        KILL_EXIT_CODE
    } else {
        use std::os::unix::process::ExitStatusExt;
        status
            .map(|s| s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0)))
            .unwrap_or(-1)
    };
    let stdout = stdout.join().unwrap_or_default();
    let stderr = stderr.join().unwrap_or_default();
    Ok(ExecutionResult {
        exit_code,
        stdout_tail: relativize(&String::from_utf8_lossy(&stdout), root),
        stderr_tail: relativize(&String::from_utf8_lossy(&stderr), root),
        duration_s: started.elapsed().as_secs_f64(),
        timed_out,
    })
}

pub fn run_test(ws: &Workspace, artifact: &TestArtifact, limits: Limits) -> Result<ExecutionResult, TestkitError> {
    artifact.validate()?;
    run_command(ws.root(), &artifact.invocation, limits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestVerdict {
    Pass,
    FailBugPresent,
    FailInvalidTest,
    Inconclusive,
}

impl std::fmt::Display for TestVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub verdict: TestVerdict,
    pub log_excerpt: String,
    pub suggestion: String,
}

impl DiagnosticReport {
    pub fn render(&self) -> String {
        format!(
            "Verdict: {}\nSuggestion: {}\nLog excerpt:\n{}",
            self.verdict, self.suggestion, self.log_excerpt
        )
    }
}

/// What a model-backed judge may conclude. There is deliberately no pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeVerdict {
    BugPresent,
    InvalidTest,
}

impl From<JudgeVerdict> for TestVerdict {
    fn from(v: JudgeVerdict) -> Self {
        match v {
            JudgeVerdict::BugPresent => TestVerdict::FailBugPresent,
            JudgeVerdict::InvalidTest => TestVerdict::FailInvalidTest,
        }
    }
}

#[derive(Debug, Error)]
#[error("judge unavailable: {0}")]
pub struct JudgeUnavailable(pub String);

pub trait Judge {
    fn judge(&mut self, result: &ExecutionResult) -> Result<JudgeVerdict, JudgeUnavailable>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyRules {
    pub invalid_markers: Vec<String>,
}

impl Default for ClassifyRules {
    fn default() -> Self {
        Self {
            invalid_markers: vec!["ImportError".into(), "ModuleNotFoundError".into(), "SyntaxError".into()],
        }
    }
}

fn tail_chars(s: &str, max_bytes: usize) -> &str {
    if s.len() <= max_bytes {
        return s;
    }
    let mut start = s.len() - max_bytes;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

pub fn log_excerpt(result: &ExecutionResult) -> String {
    let mut text = format!("exit code: {}", result.exit_code);
    if result.timed_out {
        text.push_str(" (timed out)");
    }
    text.push('\n');
    if !result.stderr_tail.is_empty() {
        text.push_str("--- stderr ---\n");
        text.push_str(&result.stderr_tail);
        if !text.ends_with('\n') {
            text.push('\n');
        }
    }
    if !result.stdout_tail.is_empty() {
        text.push_str("--- stdout ---\n");
        text.push_str(&result.stdout_tail);
    }
    tail_chars(&text, EXCERPT_BYTES).to_string()
}

fn suggestion(verdict: TestVerdict, via_judge: bool) -> String {
    let base = match verdict {
        TestVerdict::Pass => "",
        TestVerdict::FailBugPresent => {
            "The reproduction test still fails with the bug's signature. Revise the patch or inspect a different region."
        }
        TestVerdict::FailInvalidTest => {
            "The test itself looks broken (timeout, or an import/syntax error in the test file). Refine the test before judging patches with it."
        }
        TestVerdict::Inconclusive => {
            "The test failed without the expected signature. Check whether the current patch changed behaviour unexpectedly."
        }
    };
    if via_judge {
        format!("(model judgement) {base}")
    } else {
        base.to_string()
    }
}

/// Deterministic rules first, the judge only for inconclusive failures.
pub fn classify_result(
    result: &ExecutionResult,
    expected_signature: Option<&str>,
    judge: Option<&mut dyn Judge>,
    rules: &ClassifyRules,
) -> (TestVerdict, Option<DiagnosticReport>) {
    let fallback = fallback_verdict(result, expected_signature, rules);
    if fallback == TestVerdict::Pass {
        return (TestVerdict::Pass, None);
    }
    let (verdict, via_judge) = match (fallback, judge) {
        (TestVerdict::Inconclusive, Some(judge)) => match judge.judge(result) {
            Ok(v) => (TestVerdict::from(v), true),
            Err(_) => (TestVerdict::Inconclusive, false),
        },
        (v, _) => (v, false),
    };
    assert_ne!(verdict, TestVerdict::Pass, "a failing run may not be upgraded to Pass");
    let report = DiagnosticReport {
        verdict,
        log_excerpt: log_excerpt(result),
        suggestion: suggestion(verdict, via_judge),
    };
    (verdict, Some(report))
}

pub fn fallback_verdict(result: &ExecutionResult, expected_signature: Option<&str>, rules: &ClassifyRules) -> TestVerdict {
    if result.exit_code == 0 && !result.timed_out {
        return TestVerdict::Pass;
    }
    if result.timed_out {
        return TestVerdict::FailInvalidTest;
    }
    let stderr = &result.stderr_tail;
    let in_test_file = stderr.contains(RESERVED_TEST_DIR);
    if in_test_file && rules.invalid_markers.iter().any(|m| stderr.contains(m.as_str())) {
        return TestVerdict::FailInvalidTest;
    }
    if let Some(sig) = expected_signature.filter(|s| !s.is_empty()) {
        if stderr.contains(sig) {
            return TestVerdict::FailBugPresent;
        }
    }
    TestVerdict::Inconclusive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workspace::IgnoreRules;

    fn result(exit_code: i32, stderr: &str, timed_out: bool) -> ExecutionResult {
        ExecutionResult {
            exit_code,
            stdout_tail: String::new(),
            stderr_tail: stderr.into(),
            duration_s: 0.0,
            timed_out,
        }
    }

    fn scratch() -> (tempfile::TempDir, Workspace) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("repo");
        std::fs::create_dir_all(&root).unwrap();
        std::fs::write(root.join("m.py"), "x = 1\n").unwrap();
        let ws = Workspace::attach(root, dir.path().join("objects"), "tk", IgnoreRules::default()).unwrap();
        (dir, ws)
    }

    fn argv(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn fallback_rules_in_order() {
        let rules = ClassifyRules::default();
        assert_eq!(classify_result(&result(0, "", false), None, None, &rules).0, TestVerdict::Pass);
        assert_eq!(
            classify_result(&result(KILL_EXIT_CODE, "", true), None, None, &rules).0,
            TestVerdict::FailInvalidTest
        );
        let import = "File \".repeton_tests/test_repro_v1.py\", line 1\nModuleNotFoundError: No module named 'x'";
        assert_eq!(
            classify_result(&result(1, import, false), Some("x"), None, &rules).0,
            TestVerdict::FailInvalidTest
        );
        // marker outside the test directory is not an invalid test
        assert_eq!(
            fallback_verdict(&result(1, "ImportError in lib", false), None, &rules),
            TestVerdict::Inconclusive
        );
        let (v, report) = classify_result(
            &result(1, "AssertionError: separability_matrix", false),
            Some("AssertionError: separability_matrix"),
            None,
            &rules,
        );
        assert_eq!(v, TestVerdict::FailBugPresent);
        assert_eq!(report.unwrap().verdict, TestVerdict::FailBugPresent);
        assert_eq!(fallback_verdict(&result(1, "boom", false), Some("sig"), &rules), TestVerdict::Inconclusive);
    }

    struct Fixed(Result<JudgeVerdict, ()>);
    impl Judge for Fixed {
        fn judge(&mut self, _r: &ExecutionResult) -> Result<JudgeVerdict, JudgeUnavailable> {
            self.0.map_err(|_| JudgeUnavailable("down".into()))
        }
    }

    #[test]
    fn judge_only_resolves_inconclusive() {
        let rules = ClassifyRules::default();
        let mut judge = Fixed(Ok(JudgeVerdict::BugPresent));
        let (v, r) = classify_result(&result(1, "boom", false), None, Some(&mut judge), &rules);
        assert_eq!(v, TestVerdict::FailBugPresent);
        assert!(r.unwrap().suggestion.starts_with("(model judgement)"));
        // a pass never consults the judge
        let mut judge = Fixed(Ok(JudgeVerdict::InvalidTest));
        assert_eq!(classify_result(&result(0, "", false), None, Some(&mut judge), &rules).0, TestVerdict::Pass);
        let mut down = Fixed(Err(()));
        assert_eq!(
            classify_result(&result(1, "boom", false), None, Some(&mut down), &rules).0,
            TestVerdict::Inconclusive
        );
    }

    #[test]
    fn excerpt_is_bounded() {
        let big = "e".repeat(20_000);
        let report = classify_result(&result(1, &big, false), None, None, &ClassifyRules::default()).1.unwrap();
        assert!(report.log_excerpt.len() <= EXCERPT_BYTES);
    }

    #[test]
    fn materialize_rules() {
        let (_d, ws) = scratch();
        let v1 = TestArtifact::python(1, "print(1)\n");
        materialize_test(&ws, &v1).unwrap();
        let mut v2 = v1.clone();
        v2.source_text = "print(2)\n".into();
        v2.version = 2;
        materialize_test(&ws, &v2).unwrap();
        assert_eq!(ws.read(&v1.file_name).unwrap(), b"print(2)\n");

        let mut bad = v1.clone();
        bad.file_name = format!("{RESERVED_TEST_DIR}/../x");
        assert!(matches!(materialize_test(&ws, &bad), Err(TestkitError::Malformed(_))));
        bad.file_name = "x.py".into();
        assert!(matches!(materialize_test(&ws, &bad), Err(TestkitError::Malformed(_))));
    }

    #[test]
    fn run_exit_zero_timeout_and_spawn_failure() {
        let (_d, ws) = scratch();
        let ok = run_command(ws.root(), &argv(&["sh", "-c", "echo hi; echo err >&2; test \"$REPETON\" = 1"]), Limits::default())
            .unwrap();
        assert_eq!((ok.exit_code, ok.timed_out), (0, false));
        assert_eq!(ok.stdout_tail, "hi\n");
        assert_eq!(ok.stderr_tail, "err\n");

        let limits = Limits {
            timeout: Duration::from_millis(200),
            ..Limits::default()
        };
        let slow = run_command(ws.root(), &argv(&["sh", "-c", "sleep 5 & sleep 5"]), limits).unwrap();
        assert!(slow.timed_out);
        assert_eq!(slow.exit_code, KILL_EXIT_CODE);
        assert!(slow.duration_s < 4.0);

        assert!(matches!(
            run_command(ws.root(), &argv(&["/definitely/not/here"]), Limits::default()),
            Err(TestkitError::SpawnFailure { .. })
        ));
    }

    #[test]
    fn output_is_tail_capped_and_relative() {
        let (_d, ws) = scratch();
        let limits = Limits {
            output_cap: 16,
            ..Limits::default()
        };
        let r = run_command(ws.root(), &argv(&["sh", "-c", "seq 1 1000"]), limits).unwrap();
        assert!(r.stdout_tail.len() <= 16);
        assert!(r.stdout_tail.ends_with("1000\n"));

        let r = run_command(ws.root(), &argv(&["sh", "-c", "pwd >&2; echo \"$PWD/x.py\" >&2"]), Limits::default()).unwrap();
        assert_eq!(r.stderr_tail, ".\nx.py\n");
    }
}
