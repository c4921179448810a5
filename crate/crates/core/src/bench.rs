//! Batch runs over task files and the resolved/unresolved/empty-patch
//! accounting.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentio::BackendFactory;
use crate::orchestrator::{harness_failure, run_irv_in, Event, IrvConfig, RunOutcome, RunReport};
use crate::par::{self, Exec};
use crate::testkit::run_command;
use crate::workspace::{IgnoreRules, Workspace};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate instance_id {0:?}")]
    DuplicateId(String),
    #[error("empty batch: no tasks or reports to process")]
    EmptyBatch,
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub instance_id: String,
    pub repo_location: String,
    pub base_revision: String,
    pub problem_statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_command: Option<String>,
    /// Seconds; overrides the configured wall-clock budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit: Option<u64>,
}

fn is_remote(location: &str) -> bool {
    location.contains("://") || location.starts_with("git@")
}

/// One JSON object per line; blank lines are skipped. Relative local
/// `repo_location`s resolve against the tasks file's directory.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>, BenchError> {
    let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut task: TaskInstance = serde_json::from_str(line).map_err(|e| BenchError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let invalid = |message: &str| BenchError::Parse {
            line: line_no,
            message: message.to_string(),
        };
        if task.instance_id.trim().is_empty() {
            return Err(invalid("instance_id is empty"));
        }
        if task.problem_statement.trim().is_empty() {
            return Err(invalid("problem_statement is empty"));
        }
        if task.time_limit == Some(0) {
            return Err(invalid("time_limit must be at least 1"));
        }
        if !seen.insert(task.instance_id.clone()) {
            return Err(BenchError::DuplicateId(task.instance_id));
        }
        if !is_remote(&task.repo_location) && Path::new(&task.repo_location).is_relative() {
            task.repo_location = base_dir.join(&task.repo_location).to_string_lossy().into_owned();
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Three-bucket layout: CannotReproduce folds into Unresolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreeBucketRow {
    pub resolved: usize,
    pub unresolved: usize,
    pub empty_patch: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub counts: BTreeMap<RunOutcome, usize>,
    pub total: usize,
    pub resolve_rate_percent: f64,
    pub three_bucket: ThreeBucketRow,
}

/// `round(100 * resolved / total, 2)` in exact integer arithmetic, as hundredths
/// of a percent. Halves round up.
pub fn resolve_rate_hundredths(resolved: usize, total: usize) -> u64 {
    let (r, t) = (resolved as u128, total as u128);
    ((20_000 * r + t) / (2 * t)) as u64
}

impl BenchSummary {
    pub fn from_counts(counts: BTreeMap<RunOutcome, usize>) -> Result<Self, BenchError> {
        let mut counts = counts;
        for outcome in RunOutcome::ALL {
            counts.entry(outcome).or_insert(0);
        }
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(BenchError::EmptyBatch);
        }
        let get = |o: RunOutcome| counts[&o];
        let resolved = get(RunOutcome::Resolved);
        let three_bucket = ThreeBucketRow {
            resolved,
            unresolved: get(RunOutcome::Unresolved) + get(RunOutcome::CannotReproduce),
            empty_patch: get(RunOutcome::EmptyPatch),
            total,
        };
        Ok(Self {
            resolve_rate_percent: resolve_rate_hundredths(resolved, total) as f64 / 100.0,
            counts,
            total,
            three_bucket,
        })
    }

    pub fn count(&self, outcome: RunOutcome) -> usize {
        self.counts.get(&outcome).copied().unwrap_or(0)
    }

    /// Aligned text table: Resolved, Unresolved and Empty Patch plus the total,
    /// then the four-bucket breakdown.
    pub fn render_table(&self) -> String {
        let header = ["Resolved", "Unresolved", "Empty Patch", "Total"];
        let row = [
            self.three_bucket.resolved,
            self.three_bucket.unresolved,
            self.three_bucket.empty_patch,
            self.three_bucket.total,
        ]
        .map(|n| n.to_string());
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
        let mut out = format!("{}\n{}\n", line(&header), line(&row));
        out.push_str(&format!("Resolve rate: {:.2}%\n", self.resolve_rate_percent));
        out.push_str(&format!(
            "(Unresolved includes {} CannotReproduce)\n",
            self.count(RunOutcome::CannotReproduce)
        ));
        out
    }
}

pub fn summarize_outcomes(reports: &[RunReport]) -> Result<BenchSummary, BenchError> {
    let mut counts = BTreeMap::new();
    for report in reports {
        *counts.entry(report.outcome).or_insert(0) += 1;
    }
    BenchSummary::from_counts(counts)
}

fn push_event(report: &mut RunReport, started: Instant, kind: &str, detail: String) {
    report.event_log.push(Event {
        t: (started.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
        kind: kind.to_string(),
        detail,
    });
}

/// One task in `<work_root>/<instance_id>`, with the validation veto applied.
pub fn run_task(task: &TaskInstance, config: &IrvConfig, factory: &dyn BackendFactory, work_root: &Path) -> RunReport {
    let started = Instant::now();
    let attempt = panic::catch_unwind(AssertUnwindSafe(|| {
        let backend = match factory.for_run(&task.instance_id) {
            Ok(b) => b,
            Err(e) => return harness_failure(&task.instance_id, started, format!("backend: {e}")),
        };
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
        let mut report = run_irv_in(&mut ws, task, config, backend, started);
        if report.outcome == RunOutcome::Resolved {
            if let Some(command) = task.validation_command.as_deref().filter(|c| !c.trim().is_empty()) {
                let argv = vec!["sh".to_string(), "-c".to_string(), command.to_string()];
                match run_command(ws.root(), &argv, config.limits()) {
                    Ok(r) if r.exit_code == 0 => push_event(&mut report, started, "validation-passed", "exit 0".into()),
                    Ok(r) => {
                        report.outcome = RunOutcome::Unresolved;
                        push_event(&mut report, started, "validation-downgrade", format!("exit {}", r.exit_code));
                    }
                    Err(e) => {
                        report.outcome = RunOutcome::Unresolved;
                        push_event(&mut report, started, "validation-downgrade", e.to_string());
                    }
                }
            }
        }
        report
    }));
    attempt.unwrap_or_else(|payload| {
        let why = payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        harness_failure(&task.instance_id, started, format!("crash: {why}"))
    })
}

/// Runs every task with up to `parallelism` in flight; reports come back in
/// input order.
pub fn run_bench(
    tasks: &[TaskInstance],
    parallelism: usize,
    config: &IrvConfig,
    factory: &dyn BackendFactory,
    work_root: &Path,
) -> Result<(Vec<RunReport>, BenchSummary), BenchError> {
    if parallelism == 0 {
        return Err(BenchError::InvalidParallelism);
    }
    if tasks.is_empty() {
        return Err(BenchError::EmptyBatch);
    }
    let reports = par::map_ordered(tasks.iter().collect(), Exec::Threads(parallelism), |task| {
        run_task(task, config, factory, work_root)
    });
    let summary = summarize_outcomes(&reports)?;
    Ok((reports, summary))
}

/// Every `*.json` RunReport in `dir`, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>, BenchError> {
    let io = |source| BenchError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|source| BenchError::Io {
            path: path.clone(),
            source,
        })?;
        // Skip JSON files that are not run reports, such as a summary.
        if let Ok(report) = serde_json::from_str::<RunReport>(&text) {
            reports.push(report);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workspace::DiffDocument;

    fn counts(r: usize, u: usize, e: usize, c: usize) -> BTreeMap<RunOutcome, usize> {
        BTreeMap::from([
            (RunOutcome::Resolved, r),
            (RunOutcome::Unresolved, u),
            (RunOutcome::EmptyPatch, e),
            (RunOutcome::CannotReproduce, c),
        ])
    }

    fn report(id: &str, outcome: RunOutcome) -> RunReport {
        RunReport {
            instance_id: id.into(),
            outcome,
            final_diff: DiffDocument::empty(),
            iterations_used: 0,
            llm_calls_used: 0,
            duration_s: 0.0,
            event_log: vec![],
        }
    }

    #[test]
    fn counts_35_of_300() {
        let s = BenchSummary::from_counts(counts(35, 113, 152, 0)).unwrap();
        assert_eq!(s.total, 300);
        assert_eq!(s.resolve_rate_percent, 11.67);
    }

    #[test]
    fn rate_edges() {
        assert_eq!(BenchSummary::from_counts(counts(5, 0, 0, 0)).unwrap().resolve_rate_percent, 100.0);
        assert_eq!(BenchSummary::from_counts(counts(0, 2, 1, 1)).unwrap().resolve_rate_percent, 0.0);
        // 1/8 = 12.5 exactly; 1/3 = 33.333..; 2/3 = 66.666..
        assert_eq!(resolve_rate_hundredths(1, 8), 1250);
        assert_eq!(resolve_rate_hundredths(1, 3), 3333);
        assert_eq!(resolve_rate_hundredths(2, 3), 6667);
        // 1/16 = 6.25 exactly, 1/1600 = 0.0625 rounds to 0.06
        assert_eq!(resolve_rate_hundredths(1, 1600), 6);
        assert!(matches!(BenchSummary::from_counts(BTreeMap::new()), Err(BenchError::EmptyBatch)));
    }

    #[test]
    fn three_bucket_row_folds_cannot_reproduce() {
        let s = summarize_outcomes(&[
            report("a", RunOutcome::CannotReproduce),
            report("b", RunOutcome::Unresolved),
            report("c", RunOutcome::Resolved),
        ])
        .unwrap();
        assert_eq!(s.count(RunOutcome::CannotReproduce), 1);
        assert_eq!(
            s.three_bucket,
            ThreeBucketRow {
                resolved: 1,
                unresolved: 2,
                empty_patch: 0,
                total: 3
            }
        );
        let table = s.render_table();
        assert!(table.starts_with("Resolved  Unresolved  Empty Patch  Total\n       1           2            0      3\n"));
        assert!(matches!(summarize_outcomes(&[]), Err(BenchError::EmptyBatch)));
    }

    #[test]
    fn load_tasks_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let line = |id: &str| {
            format!(r#"{{"instance_id":"{id}","repo_location":"calc","base_revision":"HEAD","problem_statement":"p"}}"#)
        };
        let path = dir.path().join("tasks.jsonl");
        fs::write(&path, format!("{}\n\n{}\n", line("a"), line("b"))).unwrap();
        let tasks = load_tasks(&path).unwrap();
        assert_eq!(tasks.iter().map(|t| t.instance_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(Path::new(&tasks[0].repo_location), dir.path().join("calc"));

        fs::write(&path, format!("{}\n{}\n", line("a"), line("a"))).unwrap();
        assert!(matches!(load_tasks(&path), Err(BenchError::DuplicateId(id)) if id == "a"));

        fs::write(&path, format!("{}\n{}\n{{oops\n", line("a"), line("b"))).unwrap();
        assert!(matches!(load_tasks(&path), Err(BenchError::Parse { line: 3, .. })));
    }
}
