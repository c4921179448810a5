use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use repeton::workspace::{content_digest, DiffDocument, IgnoreRules, Workspace};

const PATHS: [&str; 5] = ["a.py", "b.txt", "pkg/c.py", "pkg/sub/d.py", "e.cfg"];

#[derive(Debug, Clone)]
enum Op {
    Write(usize, String),
    Remove(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..PATHS.len(), "[a-z \n]{0,40}").prop_map(|(i, s)| Op::Write(i, s)),
        1 => (0..PATHS.len()).prop_map(Op::Remove),
    ]
}

fn seeded() -> (tempfile::TempDir, Workspace) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("repo");
    fs::create_dir_all(root.join("pkg/sub")).unwrap();
    for (i, p) in PATHS.iter().enumerate().take(3) {
        fs::write(root.join(p), format!("line {i}\nshared\n")).unwrap();
    }
    let ws = Workspace::attach(root, dir.path().join("objects"), "p", IgnoreRules::default()).unwrap();
    (dir, ws)
}

fn apply(ws: &Workspace, op: &Op) {
    match op {
        Op::Write(i, text) => ws.write(PATHS[*i], text.as_bytes()).unwrap(),
        Op::Remove(i) => {
            if ws.exists(PATHS[*i]) {
                ws.remove(PATHS[*i]).unwrap();
            }
        }
    }
}

/// Independent view of the tree: sha256 per regular file, walked directly.
fn walk_digests(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).into_iter().filter_map(Result::ok) {
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            out.insert(rel, content_digest(&fs::read(entry.path()).unwrap()));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn restore_returns_to_snapshot(before in prop::collection::vec(op(), 0..6), after in prop::collection::vec(op(), 1..10)) {
        let (_d, mut ws) = seeded();
        for o in &before {
            apply(&ws, o);
        }
        let snap = ws.take_snapshot().unwrap();
        prop_assert_eq!(&snap.digest_map, &walk_digests(ws.root()));
        for o in &after {
            apply(&ws, o);
        }
        ws.restore_snapshot(&snap).unwrap();
        prop_assert_eq!(&ws.digest_map().unwrap(), &snap.digest_map);
        prop_assert_eq!(&walk_digests(ws.root()), &snap.digest_map);
        let again = ws.take_snapshot().unwrap();
        prop_assert_eq!(again.digest_map, snap.digest_map);
    }

    #[test]
    fn diff_counts_match_recount(after in prop::collection::vec(op(), 0..8)) {
        let (_d, mut ws) = seeded();
        let snap = ws.take_snapshot().unwrap();
        for o in &after {
            apply(&ws, o);
        }
        let doc = ws.compute_diff(&snap).unwrap();
        prop_assert_eq!(doc.is_empty, ws.digest_map().unwrap() == snap.digest_map);
        prop_assert_eq!(DiffDocument::from_text(&doc.text), doc);
    }
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok_and(|o| o.status.success())
}

fn lines(n: usize, tag: &str) -> Vec<String> {
    (1..=n).map(|i| format!("{tag} {i}")).collect()
}

/// Single-region rewrites: our diff text equals `diff -u` byte for byte and
/// `patch -p1` applies it to the base tree.
#[test]
fn diff_agrees_with_gnu_diff_and_patch() {
    if !have("diff") || !have("patch") {
        eprintln!("diff/patch unavailable, skipping");
        return;
    }
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(64));
    let strategy = (5usize..40, 0usize..40, 0usize..5, 0usize..5);
    runner
        .run(&strategy, |(len, start_seed, del_seed, ins)| {
            let base = lines(len, "keep");
            let start = start_seed % len;
            let del = del_seed.min(len - start);
            if del == 0 && ins == 0 {
                return Ok(());
            }
            let mut new = base.clone();
            new.splice(start..start + del, lines(ins, "fresh"));
            let join = |v: &[String]| v.iter().map(|l| format!("{l}\n")).collect::<String>();

            let dir = tempfile::tempdir().unwrap();
            let root = dir.path().join("repo");
            fs::create_dir_all(&root).unwrap();
            fs::write(root.join("x.py"), join(&base)).unwrap();
            let mut ws = Workspace::attach(root.clone(), dir.path().join("objects"), "d", IgnoreRules::default()).unwrap();
            let snap = ws.take_snapshot().unwrap();
            ws.write("x.py", join(&new).as_bytes()).unwrap();
            let doc = ws.compute_diff(&snap).unwrap();
            prop_assert_eq!((doc.files_touched, doc.hunk_count), (1, 1));

            let old_path = dir.path().join("old.py");
            fs::write(&old_path, join(&base)).unwrap();
            let out = Command::new("diff")
                .args(["-u", "--label", "a/x.py", "--label", "b/x.py"])
                .arg(&old_path)
                .arg(root.join("x.py"))
                .output()
                .unwrap();
            prop_assert_eq!(String::from_utf8(out.stdout).unwrap(), doc.text.clone());

            let check = dir.path().join("check");
            fs::create_dir_all(&check).unwrap();
            fs::write(check.join("x.py"), join(&base)).unwrap();
            let patch_file = dir.path().join("p.diff");
            fs::write(&patch_file, &doc.text).unwrap();
            let status = Command::new("patch")
                .args(["-p1", "--quiet", "-i"])
                .arg(&patch_file)
                .current_dir(&check)
                .status()
                .unwrap();
            prop_assert!(status.success());
            prop_assert_eq!(fs::read_to_string(check.join("x.py")).unwrap(), join(&new));
            Ok(())
        })
        .unwrap();
}

#[test]
fn created_and_deleted_files_apply_with_patch() {
    if !have("patch") {
        return;
    }
    let (dir, mut ws) = seeded();
    let snap = ws.take_snapshot().unwrap();
    ws.remove("b.txt").unwrap();
    ws.write("pkg/sub/d.py", b"def f():\n    return 1\n").unwrap();
    ws.write("a.py", b"line 0\nchanged\n").unwrap();
    let doc = ws.compute_diff(&snap).unwrap();
    assert_eq!(doc.files_touched, 3);

    let check = dir.path().join("check");
    fs::create_dir_all(check.join("pkg")).unwrap();
    for (i, p) in PATHS.iter().enumerate().take(3) {
        fs::write(check.join(p), format!("line {i}\nshared\n")).unwrap();
    }
    let patch_file = dir.path().join("p.diff");
    fs::write(&patch_file, &doc.text).unwrap();
    let status = Command::new("patch")
        .args(["-p1", "--quiet", "-i"])
        .arg(&patch_file)
        .current_dir(&check)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(walk_digests(&check), ws.digest_map().unwrap());
}
