use std::collections::BTreeMap;
use std::fs;

use proptest::prelude::*;
use repeton::agentio::Conversation;
use repeton::codesearch::{match_files, KeywordQuery, SearchConfig};
use repeton::par::Exec;
use repeton::patcher::{IcsrStage, IcsrState, PatcherError, RegionEdit, StageEvidence};
use repeton::workspace::{DiffDocument, IgnoreRules, Workspace};

pub const FILE_LINES: usize = 30;

pub fn scratch() -> (tempfile::TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("repo");
    fs::create_dir_all(root.join("pkg")).unwrap();
    let body: String = (1..=FILE_LINES).map(|i| format!("alpha_{i} = {i}\n")).collect();
    fs::write(root.join("pkg/mod.py"), body).unwrap();
    fs::write(root.join("pkg/other.py"), "beta = 1\n").unwrap();
    let ws = Workspace::attach(root, dir.path().join("objects"), "icsr", IgnoreRules::default()).unwrap();
    (dir, ws)
}

pub fn evidence(ws: &Workspace, stage: IcsrStage, start: usize, len: usize) -> StageEvidence {
    match stage {
        IcsrStage::Keywords => StageEvidence::Keywords(KeywordQuery::parse("alpha", 0).unwrap()),
        IcsrStage::FileSearch => {
            let query = KeywordQuery::parse("alpha", 0).unwrap();
            StageEvidence::Matches(match_files(ws, &query, 5, &SearchConfig::default(), Exec::Sequential).unwrap())
        }
        IcsrStage::Outline => StageEvidence::File("pkg/mod.py".into()),
        IcsrStage::Localize | IcsrStage::Edit => StageEvidence::Region {
            start,
            end: (start + len).min(FILE_LINES),
            symbol: None,
        },
    }
}

pub fn fresh_edit(start: usize, len: usize, n: usize, tag: &str) -> RegionEdit {
    RegionEdit {
        path: "pkg/mod.py".into(),
        start_line: start,
        end_line: (start + len).min(FILE_LINES),
        replacement_text: (0..n).map(|i| format!("fresh_{tag}_{i} = 0\n")).collect(),
        rationale: "fix".into(),
    }
}

/// Walk a fresh state to the edit stage and apply one fresh-line edit.
pub fn single_edit(start: usize, len: usize, n: usize) -> (IcsrState, DiffDocument) {
    let (_d, mut ws) = scratch();
    let mut conv = Conversation::new();
    let mut state = IcsrState::begin(&mut ws, &mut conv, "iteration-1", 3).unwrap();
    for _ in 0..4 {
        let ev = evidence(&ws, state.stage, start, len);
        state.advance_stage(&mut ws, &mut conv, ev).unwrap();
    }
    assert_eq!(state.stage, IcsrStage::Edit);
    let doc = state.apply_region_edit(&mut ws, &fresh_edit(start, len, n, "e")).unwrap();
    (state, doc)
}

#[derive(Debug, Clone)]
pub enum Op {
    Chat(u8),
    Advance(usize, usize),
    Rollback(u8, bool),
    Edit(usize, usize, u8),
    Stray(u8),
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (1u8..4).prop_map(Op::Chat),
        4 => (1usize..FILE_LINES, 0usize..4).prop_map(|(s, l)| Op::Advance(s, l)),
        3 => (0u8..5, any::<bool>()).prop_map(|(t, blank)| Op::Rollback(t, blank)),
        3 => (1usize..FILE_LINES, 0usize..4, 0u8..4).prop_map(|(s, l, n)| Op::Edit(s, l, n)),
        1 => any::<u8>().prop_map(Op::Stray),
    ]
}

/// Run `ops` against a fresh state. After every accepted rollback the tree
/// must equal what it was when the target stage was entered and the
/// conversation must have the checkpointed length. Returns the number of
/// accepted rollbacks.
pub fn check_rollbacks(ops: &[Op]) -> Result<usize, TestCaseError> {
    let (_d, mut ws) = scratch();
    let mut conv = Conversation::new();
    conv.push_user("task");
    let mut state = IcsrState::begin(&mut ws, &mut conv, "iteration-1", 3).unwrap();
    // Independent record of what each stage looked like when entered.
    let mut entered: BTreeMap<IcsrStage, (BTreeMap<String, String>, usize)> = BTreeMap::new();
    entered.insert(IcsrStage::Keywords, (ws.digest_map().unwrap(), conv.len()));
    let mut counter = 0u32;
    let mut accepted = 0;

    for op in ops {
        match *op {
            Op::Chat(n) => {
                for _ in 0..n {
                    counter += 1;
                    conv.push_user(format!("u{counter}"));
                    conv.push_assistant(format!("a{counter}"));
                }
            }
            Op::Advance(start, len) => {
                let ev = evidence(&ws, state.stage, start, len);
                if state.advance_stage(&mut ws, &mut conv, ev).is_ok() {
                    entered.insert(state.stage, (ws.digest_map().unwrap(), conv.len()));
                }
            }
            Op::Stray(b) => {
                ws.write("pkg/stray.py", format!("x = {b}\n").as_bytes()).unwrap();
            }
            Op::Edit(start, len, n) => {
                counter += 1;
                let _ = state.apply_region_edit(&mut ws, &fresh_edit(start, len, n as usize, &counter.to_string()));
            }
            Op::Rollback(t, blank) => {
                let target = IcsrStage::ALL[t as usize];
                let before_stage = state.stage;
                let expected_len = conv.checkpoint_len(&state.label_for(target));
                let attempts = state.attempts_at(target);
                let reason = if blank { "  " } else { "wrong file" };
                match state.rollback_stage(&mut ws, &mut conv, target, reason) {
                    Ok(()) => {
                        accepted += 1;
                        prop_assert!(target < before_stage);
                        let (digests, len) = entered[&target].clone();
                        prop_assert_eq!(ws.digest_map().unwrap(), digests.clone());
                        prop_assert_eq!(&state.checkpoints[&target].snapshot.digest_map, &digests);
                        prop_assert_eq!(Some(conv.len()), expected_len);
                        prop_assert_eq!(conv.len(), len);
                        prop_assert_eq!(state.stage, target);
                        prop_assert!(!state.edit_applied());
                        prop_assert!(state.checkpoints.keys().all(|s| *s <= target));
                        prop_assert_eq!(state.attempts_at(target), attempts + 1);
                        entered.retain(|s, _| *s <= target);
                    }
                    Err(PatcherError::ForwardRollback { .. }) => prop_assert!(target >= before_stage),
                    Err(PatcherError::EmptyJustification) => prop_assert!(blank),
                    Err(PatcherError::BudgetExhausted(s)) => {
                        prop_assert_eq!(s, target);
                        prop_assert_eq!(attempts, 3);
                    }
                    Err(e) => prop_assert!(false, "unexpected error {e}"),
                }
            }
        }
    }
    Ok(accepted)
}
