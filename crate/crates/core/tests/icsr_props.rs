mod common;

use common::icsr::{check_rollbacks, evidence, fresh_edit, op, scratch, single_edit, FILE_LINES};
use proptest::prelude::*;
use repeton::agentio::Conversation;
use repeton::patcher::{IcsrStage, IcsrState, PatcherError, RegionEdit};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    #[test]
    fn rollback_restores_tree_and_conversation(ops in prop::collection::vec(op(), 1..40)) {
        check_rollbacks(&ops)?;
    }

    /// One region edit with fresh replacement lines yields a one-file,
    /// one-hunk diff.
    #[test]
    fn single_edit_is_minimal(start in 1usize..=FILE_LINES, len in 0usize..6, n in 0usize..5) {
        let (_state, doc) = single_edit(start, len, n);
        prop_assert_eq!((doc.files_touched, doc.hunk_count), (1, 1));
    }
}

#[test]
fn rollbacks_are_actually_exercised() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    let strategy = prop::collection::vec(op(), 20..40);
    let accepted: usize = (0..50)
        .map(|_| check_rollbacks(&strategy.new_tree(&mut runner).unwrap().current()).unwrap())
        .sum();
    assert!(accepted > 20, "only {accepted} rollbacks accepted");
}

#[test]
fn second_edit_in_one_iteration_is_refused() {
    let (_d, mut ws) = scratch();
    let mut conv = Conversation::new();
    let mut state = IcsrState::begin(&mut ws, &mut conv, "iteration-1", 3).unwrap();
    for _ in 0..4 {
        let ev = evidence(&ws, state.stage, 3, 2);
        state.advance_stage(&mut ws, &mut conv, ev).unwrap();
    }
    state.apply_region_edit(&mut ws, &fresh_edit(3, 2, 1, "a")).unwrap();
    let second = state.apply_region_edit(&mut ws, &fresh_edit(10, 0, 1, "b"));
    assert!(matches!(second, Err(PatcherError::SecondEditInIteration)));
}

#[test]
fn switch_file_discards_pending_edit() {
    let (_d, mut ws) = scratch();
    let mut conv = Conversation::new();
    let base = ws.digest_map().unwrap();
    let mut state = IcsrState::begin(&mut ws, &mut conv, "iteration-1", 3).unwrap();
    for _ in 0..4 {
        let ev = evidence(&ws, state.stage, 2, 1);
        state.advance_stage(&mut ws, &mut conv, ev).unwrap();
    }
    let edit = RegionEdit {
        path: "pkg/mod.py".into(),
        start_line: 2,
        end_line: 3,
        replacement_text: "changed = 1\n".into(),
        rationale: "try".into(),
    };
    state.apply_region_edit(&mut ws, &edit).unwrap();
    assert_ne!(ws.digest_map().unwrap(), base);
    state.switch_active_file(&mut ws, "pkg/other.py").unwrap();
    assert_eq!(ws.digest_map().unwrap(), base);
    assert_eq!(state.stage, IcsrStage::Localize);
    assert_eq!(state.active_file.as_deref(), Some("pkg/other.py"));
}
