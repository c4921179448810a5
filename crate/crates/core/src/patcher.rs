//! The code search and repair stage machine.
//!
//! Stages advance strictly one at a time. Entering a stage records a
//! checkpoint pairing a workspace snapshot with a conversation label, so a
//! rollback restores both the tree and the dialogue to that point. At most
//! one region edit is allowed per pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agentio::{AgentIoError, Conversation};
use crate::codemap::split_lines;
use crate::codesearch::{KeywordQuery, MatchSet};
use crate::testkit::{DiagnosticReport, TestVerdict};
use crate::workspace::{DiffDocument, Snapshot, Workspace, WorkspaceError};

pub const DEFAULT_MAX_STAGE_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcsrStage {
    Keywords = 1,
    FileSearch = 2,
    Outline = 3,
    Localize = 4,
    Edit = 5,
}

impl IcsrStage {
    pub const ALL: [IcsrStage; 5] = [
        IcsrStage::Keywords,
        IcsrStage::FileSearch,
        IcsrStage::Outline,
        IcsrStage::Localize,
        IcsrStage::Edit,
    ];

    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn next(self) -> Option<IcsrStage> {
        Self::ALL.get(self as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IcsrStage::Keywords => "keywords",
            IcsrStage::FileSearch => "file_search",
            IcsrStage::Outline => "outline",
            IcsrStage::Localize => "localize",
            IcsrStage::Edit => "edit",
        }
    }
}

impl fmt::Display for IcsrStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IcsrStage {
    type Err = PatcherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Self::ALL
            .into_iter()
            .find(|st| st.name() == norm || st.value().to_string() == norm || norm == st.name().replace('_', ""))
            .ok_or_else(|| PatcherError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum PatcherError {
    #[error("stage {stage} is not complete: {reason}")]
    StageIncomplete { stage: IcsrStage, reason: String },
    #[error("already at the final stage")]
    AtFinalStage,
    #[error("rollback from {from} to {to} does not go backwards")]
    ForwardRollback { from: IcsrStage, to: IcsrStage },
    #[error("a rollback needs a justification")]
    EmptyJustification,
    #[error("attempt budget for stage {0} exhausted")]
    BudgetExhausted(IcsrStage),
    #[error("a region was already edited in this pass")]
    SecondEditInIteration,
    #[error("lines {start}-{end} are outside 1-{total}")]
    SpanOutOfBounds { start: usize, end: usize, total: usize },
    #[error("edit targets {got} but the active file is {expected}")]
    FileMismatch { expected: String, got: String },
    #[error("operation requires stage {required}, current stage is {current}")]
    WrongStage { required: String, current: IcsrStage },
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Conversation(#[from] AgentIoError),
}

/// What completes each stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageEvidence {
    Keywords(KeywordQuery),
    Matches(MatchSet),
    File(String),
    Region { start: usize, end: usize, symbol: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEdit {
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub replacement_text: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub snapshot: Snapshot,
    pub conversation_label: String,
    pub conversation_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcsrState {
    pub stage: IcsrStage,
    pub active_file: Option<String>,
    pub query: Option<KeywordQuery>,
    pub matches: Option<MatchSet>,
    pub region: Option<(usize, usize, Option<String>)>,
    pub attempts: BTreeMap<IcsrStage, u32>,
    pub checkpoints: BTreeMap<IcsrStage, Checkpoint>,
    pub last_feedback: Option<DiagnosticReport>,
    pub max_stage_attempts: u32,
    label_prefix: String,
    edit_applied: bool,
}

impl IcsrState {
    /// Start a pass at `Keywords`, checkpointing the current tree and
    /// conversation.
    pub fn begin(
        ws: &mut Workspace,
        conv: &mut Conversation,
        label_prefix: &str,
        max_stage_attempts: u32,
    ) -> Result<Self, PatcherError> {
        let mut state = Self {
            stage: IcsrStage::Keywords,
            active_file: None,
            query: None,
            matches: None,
            region: None,
            attempts: IcsrStage::ALL.iter().map(|s| (*s, 0)).collect(),
            checkpoints: BTreeMap::new(),
            last_feedback: None,
            max_stage_attempts: max_stage_attempts.max(1),
            label_prefix: label_prefix.to_string(),
            edit_applied: false,
        };
        state.record_checkpoint(ws, conv)?;
        Ok(state)
    }

    pub fn label_for(&self, stage: IcsrStage) -> String {
        format!("{}/{}", self.label_prefix, stage.name())
    }

    pub fn edit_applied(&self) -> bool {
        self.edit_applied
    }

    pub fn attempts_at(&self, stage: IcsrStage) -> u32 {
        self.attempts.get(&stage).copied().unwrap_or(0)
    }

    fn record_checkpoint(&mut self, ws: &mut Workspace, conv: &mut Conversation) -> Result<(), PatcherError> {
        let snapshot = ws.take_snapshot_at(self.stage.name())?;
        let label = self.label_for(self.stage);
        conv.checkpoint(&label);
        self.checkpoints.insert(
            self.stage,
            Checkpoint {
                snapshot,
                conversation_label: label,
                conversation_len: conv.len(),
            },
        );
        Ok(())
    }

    pub fn advance_stage(
        &mut self,
        ws: &mut Workspace,
        conv: &mut Conversation,
        evidence: StageEvidence,
    ) -> Result<(), PatcherError> {
        let next = self.stage.next().ok_or(PatcherError::AtFinalStage)?;
        let incomplete = |reason: &str| PatcherError::StageIncomplete {
            stage: self.stage,
            reason: reason.to_string(),
        };
        match (self.stage, evidence) {
            (IcsrStage::Keywords, StageEvidence::Keywords(query)) => self.query = Some(query),
            (IcsrStage::FileSearch, StageEvidence::Matches(matches)) => {
                if matches.is_empty() {
                    return Err(incomplete("the search matched no files"));
                }
                self.matches = Some(matches);
            }
            (IcsrStage::Outline, StageEvidence::File(path)) => {
                if !ws.exists(&path) {
                    return Err(PatcherError::FileNotFound(path));
                }
                self.active_file = Some(path);
            }
            (IcsrStage::Localize, StageEvidence::Region { start, end, symbol }) => {
                let path = self.active_file.clone().ok_or_else(|| incomplete("no active file"))?;
                let total = line_count(&ws.read(&path)?);
                if start < 1 || start > end || end > total {
                    return Err(PatcherError::SpanOutOfBounds { start, end, total });
                }
                self.region = Some((start, end, symbol));
            }
            (stage, other) => {
                return Err(PatcherError::StageIncomplete {
                    stage,
                    reason: format!("evidence {other:?} does not complete this stage"),
                })
            }
        }
        self.stage = next;
        self.record_checkpoint(ws, conv)
    }

    /// Count a failed attempt (e.g. unparseable model output) at the current
    /// stage.
    pub fn record_failure(&mut self) -> Result<(), PatcherError> {
        let used = self.attempts.entry(self.stage).or_insert(0);
        if *used >= self.max_stage_attempts {
            return Err(PatcherError::BudgetExhausted(self.stage));
        }
        *used += 1;
        Ok(())
    }

    pub fn rollback_stage(
        &mut self,
        ws: &mut Workspace,
        conv: &mut Conversation,
        target: IcsrStage,
        justification: &str,
    ) -> Result<(), PatcherError> {
        if target >= self.stage {
            return Err(PatcherError::ForwardRollback {
                from: self.stage,
                to: target,
            });
        }
        if justification.trim().is_empty() {
            return Err(PatcherError::EmptyJustification);
        }
        if self.attempts_at(target) >= self.max_stage_attempts {
            return Err(PatcherError::BudgetExhausted(target));
        }
        let checkpoint = self
            .checkpoints
            .get(&target)
            .cloned()
            .expect("a checkpoint exists for every stage up to the current one");
        ws.restore_snapshot(&checkpoint.snapshot)?;
        conv.rollback_to(&checkpoint.conversation_label)?;

        self.checkpoints.retain(|stage, _| *stage <= target);
        *self.attempts.entry(target).or_insert(0) += 1;
        self.stage = target;
        self.edit_applied = false;
        if target <= IcsrStage::Keywords {
            self.query = None;
        }
        if target <= IcsrStage::FileSearch {
            self.matches = None;
        }
        if target <= IcsrStage::Outline {
            self.active_file = None;
        }
        if target <= IcsrStage::Localize {
            self.region = None;
        }
        let previous = self.last_feedback.take();
        self.last_feedback = Some(DiagnosticReport {
            verdict: previous.as_ref().map(|r| r.verdict).unwrap_or(TestVerdict::Inconclusive),
            log_excerpt: previous.map(|r| r.log_excerpt).unwrap_or_default(),
            suggestion: justification.trim().to_string(),
        });
        Ok(())
    }

    /// Replace one contiguous line span of the active file.
    pub fn apply_region_edit(&mut self, ws: &mut Workspace, edit: &RegionEdit) -> Result<DiffDocument, PatcherError> {
        if self.stage != IcsrStage::Edit {
            return Err(PatcherError::WrongStage {
                required: IcsrStage::Edit.to_string(),
                current: self.stage,
            });
        }
        if self.edit_applied {
            return Err(PatcherError::SecondEditInIteration);
        }
        let active = self.active_file.clone().unwrap_or_default();
        if edit.path != active {
            return Err(PatcherError::FileMismatch {
                expected: active,
                got: edit.path.clone(),
            });
        }
        let original = ws.read(&edit.path)?;
        let updated = splice_lines(&original, edit)?;
        ws.write(&edit.path, &updated)?;
        self.edit_applied = true;
        let base = &self.checkpoints[&IcsrStage::Edit].snapshot;
        Ok(ws.compute_diff(base)?)
    }

    /// Discard pending modifications and refocus on another file.
    pub fn switch_active_file(&mut self, ws: &mut Workspace, new_path: &str) -> Result<(), PatcherError> {
        if !matches!(self.stage, IcsrStage::Localize | IcsrStage::Edit) {
            return Err(PatcherError::WrongStage {
                required: "localize or edit".into(),
                current: self.stage,
            });
        }
        if !ws.exists(new_path) {
            return Err(PatcherError::FileNotFound(new_path.to_string()));
        }
        let reset_to = self
            .checkpoints
            .get(&IcsrStage::Edit)
            .or_else(|| self.checkpoints.get(&IcsrStage::Localize))
            .expect("localize checkpoint exists")
            .snapshot
            .clone();
        ws.restore_snapshot(&reset_to)?;
        self.checkpoints.remove(&IcsrStage::Edit);
        self.active_file = Some(new_path.to_string());
        self.region = None;
        self.stage = IcsrStage::Localize;
        self.edit_applied = false;
        Ok(())
    }
}

fn line_count(bytes: &[u8]) -> usize {
    split_lines(&String::from_utf8_lossy(bytes)).len()
}

fn splice_lines(original: &[u8], edit: &RegionEdit) -> Result<Vec<u8>, PatcherError> {
    let text = String::from_utf8_lossy(original);
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let total = lines.len();
    if edit.start_line < 1 || edit.start_line > edit.end_line || edit.end_line > total {
        return Err(PatcherError::SpanOutOfBounds {
            start: edit.start_line,
            end: edit.end_line,
            total,
        });
    }
    let mut out = String::with_capacity(text.len() + edit.replacement_text.len());
    for line in &lines[..edit.start_line - 1] {
        out.push_str(line);
    }
    out.push_str(&edit.replacement_text);
    let span_had_newline = lines[edit.end_line - 1].ends_with('\n');
    if span_had_newline && !edit.replacement_text.is_empty() && !edit.replacement_text.ends_with('\n') {
        out.push('\n');
    }
    for line in &lines[edit.end_line..] {
        out.push_str(line);
    }
    Ok(out.into_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codesearch::MatchEntry;
    use crate::workspace::IgnoreRules;

    const MOD: &str = "class A:\n    def f(self):\n        pass\n\ndef g():\n    return 1\n";

    fn setup() -> (tempfile::TempDir, Workspace, Conversation) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("repo");
        std::fs::create_dir_all(&root).unwrap();
        std::fs::write(root.join("mod.py"), MOD).unwrap();
        std::fs::write(root.join("other.py"), "y = 2\n").unwrap();
        let ws = Workspace::attach(root, dir.path().join("objects"), "p", IgnoreRules::default()).unwrap();
        (dir, ws, Conversation::new())
    }

    fn matches() -> MatchSet {
        MatchSet {
            entries: vec![MatchEntry {
                path: "mod.py".into(),
                path_hits: 0,
                content_hits: 1,
                score: 1,
            }],
            truncated: false,
        }
    }

    fn to_edit(ws: &mut Workspace, conv: &mut Conversation) -> IcsrState {
        let mut s = IcsrState::begin(ws, conv, "it1", 3).unwrap();
        conv.push_user("kw");
        s.advance_stage(ws, conv, StageEvidence::Keywords(KeywordQuery::new(&["g"], 1).unwrap()))
            .unwrap();
        conv.push_user("search");
        s.advance_stage(ws, conv, StageEvidence::Matches(matches())).unwrap();
        s.advance_stage(ws, conv, StageEvidence::File("mod.py".into())).unwrap();
        s.advance_stage(ws, conv, StageEvidence::Region { start: 5, end: 6, symbol: Some("g".into()) })
            .unwrap();
        s
    }

    #[test]
    fn advance_records_checkpoints() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = IcsrState::begin(&mut ws, &mut conv, "it1", 3).unwrap();
        s.advance_stage(&mut ws, &mut conv, StageEvidence::Keywords(KeywordQuery::new(&["g"], 1).unwrap()))
            .unwrap();
        assert_eq!(s.stage, IcsrStage::FileSearch);
        assert!(s.checkpoints.contains_key(&IcsrStage::FileSearch));

        let err = s
            .advance_stage(&mut ws, &mut conv, StageEvidence::Matches(MatchSet::default()))
            .unwrap_err();
        assert!(matches!(err, PatcherError::StageIncomplete { .. }));
        assert_eq!(s.stage, IcsrStage::FileSearch);
    }

    #[test]
    fn final_stage_refuses_to_advance() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = to_edit(&mut ws, &mut conv);
        assert!(matches!(
            s.advance_stage(&mut ws, &mut conv, StageEvidence::File("mod.py".into())),
            Err(PatcherError::AtFinalStage)
        ));
    }

    #[test]
    fn rollback_restores_tree_and_conversation() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = to_edit(&mut ws, &mut conv);
        s.rollback_stage(&mut ws, &mut conv, IcsrStage::Localize, "wrong region").unwrap();
        s.advance_stage(&mut ws, &mut conv, StageEvidence::Region { start: 1, end: 3, symbol: None })
            .unwrap();
        s.apply_region_edit(
            &mut ws,
            &RegionEdit {
                path: "mod.py".into(),
                start_line: 1,
                end_line: 1,
                replacement_text: "class B:\n".into(),
                rationale: String::new(),
            },
        )
        .unwrap();
        conv.push_user("more");
        let keywords_len = s.checkpoints[&IcsrStage::Keywords].conversation_len;
        s.rollback_stage(&mut ws, &mut conv, IcsrStage::Keywords, "files irrelevant").unwrap();
        assert_eq!(s.stage, IcsrStage::Keywords);
        assert_eq!(s.attempts_at(IcsrStage::Keywords), 1);
        assert_eq!(conv.len(), keywords_len);
        assert_eq!(ws.read("mod.py").unwrap(), MOD.as_bytes());
        assert_eq!(s.last_feedback.as_ref().unwrap().suggestion, "files irrelevant");
        assert!(s.query.is_none() && s.active_file.is_none());
    }

    #[test]
    fn rollback_errors() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = to_edit(&mut ws, &mut conv);
        assert!(matches!(
            s.rollback_stage(&mut ws, &mut conv, IcsrStage::Edit, "x"),
            Err(PatcherError::ForwardRollback { .. })
        ));
        assert!(matches!(
            s.rollback_stage(&mut ws, &mut conv, IcsrStage::Keywords, "  "),
            Err(PatcherError::EmptyJustification)
        ));
        s.attempts.insert(IcsrStage::Keywords, 3);
        assert!(matches!(
            s.rollback_stage(&mut ws, &mut conv, IcsrStage::Keywords, "again"),
            Err(PatcherError::BudgetExhausted(IcsrStage::Keywords))
        ));
        assert_eq!(s.stage, IcsrStage::Edit);
    }

    #[test]
    fn budget_caps_rollbacks() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = IcsrState::begin(&mut ws, &mut conv, "it", 3).unwrap();
        for round in 0..4 {
            s.advance_stage(&mut ws, &mut conv, StageEvidence::Keywords(KeywordQuery::new(&["g"], 1).unwrap()))
                .unwrap();
            let r = s.rollback_stage(&mut ws, &mut conv, IcsrStage::Keywords, "refine");
            if round < 3 {
                r.unwrap();
            } else {
                assert!(matches!(r, Err(PatcherError::BudgetExhausted(_))));
            }
        }
        assert_eq!(s.attempts_at(IcsrStage::Keywords), 3);
        assert_eq!(s.stage, IcsrStage::FileSearch);
        for _ in 0..3 {
            s.record_failure().unwrap();
        }
        assert!(matches!(s.record_failure(), Err(PatcherError::BudgetExhausted(_))));
    }

    #[test]
    fn single_edit_per_pass() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = to_edit(&mut ws, &mut conv);
        let edit = RegionEdit {
            path: "mod.py".into(),
            start_line: 5,
            end_line: 6,
            replacement_text: "def g():\n    return 2\n".into(),
            rationale: "fix".into(),
        };
        let diff = s.apply_region_edit(&mut ws, &edit).unwrap();
        assert_eq!((diff.files_touched, diff.hunk_count), (1, 1));
        assert_eq!(
            diff.text,
            "--- a/mod.py\n+++ b/mod.py\n@@ -3,4 +3,4 @@\n         pass\n \n def g():\n-    return 1\n+    return 2\n"
        );
        assert!(matches!(s.apply_region_edit(&mut ws, &edit), Err(PatcherError::SecondEditInIteration)));
    }

    #[test]
    fn edit_validation() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = to_edit(&mut ws, &mut conv);
        let mut edit = RegionEdit {
            path: "other.py".into(),
            start_line: 1,
            end_line: 1,
            replacement_text: String::new(),
            rationale: String::new(),
        };
        assert!(matches!(s.apply_region_edit(&mut ws, &edit), Err(PatcherError::FileMismatch { .. })));
        edit.path = "mod.py".into();
        edit.end_line = 9;
        assert!(matches!(s.apply_region_edit(&mut ws, &edit), Err(PatcherError::SpanOutOfBounds { .. })));
        // pure deletion
        edit.end_line = 1;
        let diff = s.apply_region_edit(&mut ws, &edit).unwrap();
        assert_eq!((diff.files_touched, diff.hunk_count), (1, 1));
        assert!(!String::from_utf8(ws.read("mod.py").unwrap()).unwrap().contains("class A"));
    }

    #[test]
    fn switch_resets_pending_edits() {
        let (_d, mut ws, mut conv) = setup();
        let mut s = to_edit(&mut ws, &mut conv);
        let edit_entry = s.checkpoints[&IcsrStage::Edit].snapshot.clone();
        s.apply_region_edit(
            &mut ws,
            &RegionEdit {
                path: "mod.py".into(),
                start_line: 6,
                end_line: 6,
                replacement_text: "    return 3".into(),
                rationale: String::new(),
            },
        )
        .unwrap();
        s.switch_active_file(&mut ws, "other.py").unwrap();
        assert!(ws.compute_diff(&edit_entry).unwrap().is_empty);
        assert_eq!(s.stage, IcsrStage::Localize);
        assert_eq!(s.active_file.as_deref(), Some("other.py"));
        assert!(!s.edit_applied());

        // same file also resets
        s.advance_stage(&mut ws, &mut conv, StageEvidence::Region { start: 1, end: 1, symbol: None })
            .unwrap();
        s.apply_region_edit(
            &mut ws,
            &RegionEdit {
                path: "other.py".into(),
                start_line: 1,
                end_line: 1,
                replacement_text: "y = 3\n".into(),
                rationale: String::new(),
            },
        )
        .unwrap();
        s.switch_active_file(&mut ws, "other.py").unwrap();
        assert_eq!(ws.read("other.py").unwrap(), b"y = 2\n");

        assert!(matches!(s.switch_active_file(&mut ws, "missing.py"), Err(PatcherError::FileNotFound(_))));
    }

    #[test]
    fn stage_names_parse() {
        assert_eq!("keywords".parse::<IcsrStage>().unwrap(), IcsrStage::Keywords);
        assert_eq!("File Search".parse::<IcsrStage>().unwrap(), IcsrStage::FileSearch);
        assert_eq!("filesearch".parse::<IcsrStage>().unwrap(), IcsrStage::FileSearch);
        assert_eq!("4".parse::<IcsrStage>().unwrap(), IcsrStage::Localize);
        assert!("nowhere".parse::<IcsrStage>().is_err());
    }
}
