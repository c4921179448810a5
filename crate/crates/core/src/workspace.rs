//! The checked-out repository under repair.
//!
//! A [`Workspace`] is an isolated working tree at `<work_root>/<instance_id>/repo`
//! together with a content-addressed object store at
//! `<work_root>/<instance_id>/objects`. Snapshots record a digest per file;
//! the store keeps the bytes so any snapshot can be restored exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use similar::{Algorithm, TextDiff};
use thiserror::Error;
use walkdir::WalkDir;

/// Directory (relative to the workspace root) holding reproduction tests.
/// Excluded from snapshots and diffs.
pub const RESERVED_TEST_DIR: &str = ".repeton_tests";

/// Context lines per hunk in emitted diffs.
pub const DIFF_CONTEXT: usize = 3;

static NEXT_WORKSPACE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("repository location unavailable: {0}")]
    LocationUnavailable(String),
    #[error("revision not found: {0}")]
    RevisionNotFound(String),
    #[error("isolation directory already occupied: {}", .0.display())]
    DirtyTarget(PathBuf),
    #[error("snapshot {0} was not taken on this workspace")]
    ForeignSnapshot(String),
    #[error("path escapes the workspace: {0}")]
    PathEscape(String),
    #[error("git {command} failed: {stderr}")]
    Git { command: String, stderr: String },
    #[error("i/o failure at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> WorkspaceError {
    let path = path.into();
    move |source| WorkspaceError::Io { path, source }
}

pub type Result<T, E = WorkspaceError> = std::result::Result<T, E>;

/// Untracked build noise excluded from digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgnoreRules {
    pub dir_names: Vec<String>,
    pub file_suffixes: Vec<String>,
}

impl Default for IgnoreRules {
    fn default() -> Self {
        Self {
            dir_names: vec!["__pycache__".into()],
            file_suffixes: vec![".pyc".into()],
        }
    }
}

impl IgnoreRules {
    fn skips_dir(&self, name: &str) -> bool {
        name == ".git" || self.dir_names.iter().any(|d| d == name)
    }

    fn skips_file(&self, name: &str) -> bool {
        self.file_suffixes.iter().any(|s| name.ends_with(s.as_str()))
    }
}

/// A restore point: content digest per relative path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub snapshot_id: String,
    pub digest_map: BTreeMap<String, String>,
    pub taken_at_stage: String,
    workspace_token: String,
}

impl Snapshot {
    pub fn belongs_to(&self, ws: &Workspace) -> bool {
        self.workspace_token == ws.token
    }
}

/// A unified diff with summary counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiffDocument {
    pub text: String,
    pub files_touched: usize,
    pub hunk_count: usize,
    pub is_empty: bool,
}

impl DiffDocument {
    pub fn empty() -> Self {
        Self {
            is_empty: true,
            ..Self::default()
        }
    }

    /// Recount a unified diff produced by `compute_diff`.
    pub fn from_text(text: &str) -> Self {
        let lines: Vec<&str> = text.lines().collect();
        let (mut files, mut hunks) = (0, 0);
        let (mut old_left, mut new_left) = (0usize, 0usize);
        let mut i = 0;
        while i < lines.len() {
            let line = lines[i];
            if old_left > 0 || new_left > 0 {
                match line.as_bytes().first() {
                    Some(b'-') => old_left = old_left.saturating_sub(1),
                    Some(b'+') => new_left = new_left.saturating_sub(1),
                    Some(b'\\') => {}
                    _ => {
                        old_left = old_left.saturating_sub(1);
                        new_left = new_left.saturating_sub(1);
                    }
                }
            } else if line.starts_with("--- ") && lines.get(i + 1).is_some_and(|l| l.starts_with("+++ ")) {
                files += 1;
                i += 1;
            } else if line.starts_with("Binary files ") {
                files += 1;
            } else if let Some((old, new)) = parse_hunk_header(line) {
                hunks += 1;
                old_left = old;
                new_left = new;
            }
            i += 1;
        }
        Self {
            text: text.to_string(),
            files_touched: files,
            hunk_count: hunks,
            is_empty: files == 0,
        }
    }
}

fn parse_hunk_header(line: &str) -> Option<(usize, usize)> {
    let body = line.strip_prefix("@@ -")?;
    let (ranges, _) = body.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let count = |r: &str| match r.split_once(',') {
        Some((_, n)) => n.parse().ok(),
        None => Some(1),
    };
    Some((count(old)?, count(new)?))
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    objects: PathBuf,
    base_revision: String,
    instance_id: String,
    ignore: IgnoreRules,
    token: String,
    next_snapshot: u64,
}

fn git(dir: &Path, args: &[&str]) -> Result<String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(["-c", "core.autocrlf=false", "-c", "commit.gpgsign=false"])
        .args(args)
        .env("GIT_TERMINAL_PROMPT", "0")
        .env("GIT_AUTHOR_NAME", "repeton")
        .env("GIT_AUTHOR_EMAIL", "repeton@localhost")
        .env("GIT_COMMITTER_NAME", "repeton")
        .env("GIT_COMMITTER_EMAIL", "repeton@localhost")
        .env("GIT_AUTHOR_DATE", "2000-01-01T00:00:00Z")
        .env("GIT_COMMITTER_DATE", "2000-01-01T00:00:00Z")
        .output()
        .map_err(io_err("git"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    } else {
        Err(WorkspaceError::Git {
            command: args.first().copied().unwrap_or_default().to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        })
    }
}

fn looks_remote(location: &str) -> bool {
    location.contains("://") || location.starts_with("git@")
}

fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    for entry in WalkDir::new(src).follow_links(false) {
        let entry = entry.map_err(|e| WorkspaceError::Io {
            path: src.to_path_buf(),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under src");
        if rel.components().any(|c| c.as_os_str() == ".git") {
            continue;
        }
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target).map_err(io_err(&target))?;
        } else if entry.file_type().is_file() {
            fs::copy(entry.path(), &target).map_err(io_err(&target))?;
        }
    }
    Ok(())
}

fn check_relative(rel: &str) -> Result<PathBuf> {
    let path = Path::new(rel);
    let ok = !rel.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if ok {
        Ok(path.to_path_buf())
    } else {
        Err(WorkspaceError::PathEscape(rel.to_string()))
    }
}

pub fn content_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Workspace {
    /// Materialize `repo_location` at `base_revision` under
    /// `<work_root>/<instance_id>/repo`.
    ///
    /// A local directory that is not a git checkout is imported as a fresh
    /// single-commit repository; only `HEAD` resolves in that case.
    pub fn open(
        repo_location: &str,
        base_revision: &str,
        instance_id: &str,
        work_root: &Path,
        ignore: IgnoreRules,
    ) -> Result<Self> {
        let instance_dir = work_root.join(instance_id);
        let root = instance_dir.join("repo");
        if root.exists() {
            let occupied = fs::read_dir(&root)
                .map(|mut d| d.next().is_some())
                .unwrap_or(true);
            if occupied {
                return Err(WorkspaceError::DirtyTarget(root));
            }
        }

        if looks_remote(repo_location) {
            fs::create_dir_all(&instance_dir).map_err(io_err(&instance_dir))?;
            Self::clone_into(repo_location, &root)?;
        } else {
            let src = Path::new(repo_location);
            if !src.is_dir() {
                return Err(WorkspaceError::LocationUnavailable(repo_location.to_string()));
            }
            fs::create_dir_all(&instance_dir).map_err(io_err(&instance_dir))?;
            if src.join(".git").exists() {
                Self::clone_into(repo_location, &root)?;
            } else {
                fs::create_dir_all(&root).map_err(io_err(&root))?;
                copy_tree(src, &root)?;
                git(&root, &["init", "--quiet"])?;
                git(&root, &["add", "--all"])?;
                git(&root, &["commit", "--quiet", "--allow-empty", "-m", "baseline"])?;
            }
        }

        let resolved = match git(
            &root,
            &["rev-parse", "--verify", "--quiet", &format!("{base_revision}^{{commit}}")],
        ) {
            Ok(sha) if !sha.is_empty() => sha,
            _ => {
                let _ = fs::remove_dir_all(&instance_dir);
                return Err(WorkspaceError::RevisionNotFound(base_revision.to_string()));
            }
        };
        git(&root, &["checkout", "--quiet", "--detach", &resolved])?;

        let objects = instance_dir.join("objects");
        Self::attach_with_revision(root, objects, instance_id, resolved, ignore)
    }

    fn clone_into(location: &str, root: &Path) -> Result<()> {
        let out = Command::new("git")
            .args(["clone", "--quiet", "--no-checkout", location])
            .arg(root)
            .env("GIT_TERMINAL_PROMPT", "0")
            .output()
            .map_err(io_err("git"))?;
        if out.status.success() {
            Ok(())
        } else {
            Err(WorkspaceError::LocationUnavailable(format!(
                "{location}: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            )))
        }
    }

    /// Adopt an existing directory as a workspace without touching version
    /// control. Object bytes are kept in `objects`.
    pub fn attach(root: PathBuf, objects: PathBuf, instance_id: &str, ignore: IgnoreRules) -> Result<Self> {
        Self::attach_with_revision(root, objects, instance_id, String::new(), ignore)
    }

    fn attach_with_revision(
        root: PathBuf,
        objects: PathBuf,
        instance_id: &str,
        base_revision: String,
        ignore: IgnoreRules,
    ) -> Result<Self> {
        if !root.is_dir() {
            return Err(WorkspaceError::LocationUnavailable(root.display().to_string()));
        }
        fs::create_dir_all(&objects).map_err(io_err(&objects))?;
        let serial = NEXT_WORKSPACE.fetch_add(1, Ordering::Relaxed);
        let token = format!("{instance_id}#{}#{serial}", std::process::id());
        Ok(Self {
            root,
            objects,
            base_revision,
            instance_id: instance_id.to_string(),
            ignore,
            token,
            next_snapshot: 0,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_revision(&self) -> &str {
        &self.base_revision
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn abs_path(&self, rel: &str) -> Result<PathBuf> {
        Ok(self.root.join(check_relative(rel)?))
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.abs_path(rel).map(|p| p.is_file()).unwrap_or(false)
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.abs_path(rel)?;
        fs::read(&path).map_err(io_err(path))
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.abs_path(rel)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(path))
    }

    pub fn remove(&self, rel: &str) -> Result<()> {
        let path = self.abs_path(rel)?;
        fs::remove_file(&path).map_err(io_err(path))
    }

    /// Relative paths of every file covered by snapshots, sorted.
    pub fn list_files(&self) -> Result<Vec<String>> {
        let mut files = Vec::new();
        let walker = WalkDir::new(&self.root)
            .follow_links(false)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| {
                if e.depth() == 0 {
                    return true;
                }
                let name = e.file_name().to_string_lossy();
                if e.file_type().is_dir() {
                    !(self.ignore.skips_dir(&name) || (e.depth() == 1 && name == RESERVED_TEST_DIR))
                } else {
                    !self.ignore.skips_file(&name)
                }
            });
        for entry in walker {
            let entry = entry.map_err(|e| WorkspaceError::Io {
                path: self.root.clone(),
                source: e.into(),
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            files.push(rel);
        }
        files.sort();
        Ok(files)
    }

    fn current_digests(&self) -> Result<BTreeMap<String, (String, Vec<u8>)>> {
        let mut map = BTreeMap::new();
        for rel in self.list_files()? {
            let bytes = self.read(&rel)?;
            map.insert(rel, (content_digest(&bytes), bytes));
        }
        Ok(map)
    }

    fn store_object(&self, digest: &str, bytes: &[u8]) -> Result<()> {
        let path = self.objects.join(digest);
        if !path.exists() {
            fs::write(&path, bytes).map_err(io_err(path))?;
        }
        Ok(())
    }

    fn load_object(&self, digest: &str) -> Result<Vec<u8>> {
        let path = self.objects.join(digest);
        fs::read(&path).map_err(io_err(path))
    }

    pub fn take_snapshot(&mut self) -> Result<Snapshot> {
        self.take_snapshot_at("")
    }

    /// Snapshot labelled with the stage it was taken at.
    pub fn take_snapshot_at(&mut self, stage: &str) -> Result<Snapshot> {
        let mut digest_map = BTreeMap::new();
        for (rel, (digest, bytes)) in self.current_digests()? {
            self.store_object(&digest, &bytes)?;
            digest_map.insert(rel, digest);
        }
        self.next_snapshot += 1;
        Ok(Snapshot {
            snapshot_id: format!("{}/{}", self.instance_id, self.next_snapshot),
            digest_map,
            taken_at_stage: stage.to_string(),
            workspace_token: self.token.clone(),
        })
    }

    /// Digest map of the current tree without storing objects.
    pub fn digest_map(&self) -> Result<BTreeMap<String, String>> {
        Ok(self
            .current_digests()?
            .into_iter()
            .map(|(rel, (digest, _))| (rel, digest))
            .collect())
    }

    pub fn restore_snapshot(&mut self, snap: &Snapshot) -> Result<()> {
        if !snap.belongs_to(self) {
            return Err(WorkspaceError::ForeignSnapshot(snap.snapshot_id.clone()));
        }
        let current = self.digest_map()?;
        for rel in current.keys() {
            if !snap.digest_map.contains_key(rel) {
                self.remove(rel)?;
            }
        }
        for (rel, digest) in &snap.digest_map {
            if current.get(rel) != Some(digest) {
                let bytes = self.load_object(digest)?;
                self.write(rel, &bytes)?;
            }
        }
        Ok(())
    }

    /// Unified diff of the current tree against `snap`.
    pub fn compute_diff(&self, snap: &Snapshot) -> Result<DiffDocument> {
        if !snap.belongs_to(self) {
            return Err(WorkspaceError::ForeignSnapshot(snap.snapshot_id.clone()));
        }
        let current = self.current_digests()?;
        let paths: BTreeSet<&String> = snap.digest_map.keys().chain(current.keys()).collect();

        let mut doc = DiffDocument::empty();
        for rel in paths {
            let before = snap.digest_map.get(rel);
            let after = current.get(rel);
            if before == after.map(|(d, _)| d) {
                continue;
            }
            let old = match before {
                Some(digest) => Some(self.load_object(digest)?),
                None => None,
            };
            let new = after.map(|(_, bytes)| bytes.as_slice());
            let (text, hunks) = file_diff(rel, old.as_deref(), new);
            doc.text.push_str(&text);
            doc.files_touched += 1;
            doc.hunk_count += hunks;
        }
        doc.is_empty = doc.files_touched == 0;
        Ok(doc)
    }
}

/// Unified diff for one file; `None` marks an absent side.
fn file_diff(rel: &str, old: Option<&[u8]>, new: Option<&[u8]>) -> (String, usize) {
    let old_label = if old.is_some() { format!("a/{rel}") } else { "/dev/null".to_string() };
    let new_label = if new.is_some() { format!("b/{rel}") } else { "/dev/null".to_string() };
    let old_text = std::str::from_utf8(old.unwrap_or_default());
    let new_text = std::str::from_utf8(new.unwrap_or_default());
    let (Ok(old_text), Ok(new_text)) = (old_text, new_text) else {
        return (format!("Binary files {old_label} and {new_label} differ\n"), 0);
    };

    let diff = TextDiff::configure()
        .algorithm(Algorithm::Myers)
        .diff_lines(old_text, new_text);
    let mut unified = diff.unified_diff();
    unified.context_radius(DIFF_CONTEXT).header(&old_label, &new_label);
    let hunks = unified.iter_hunks().count();
    if hunks == 0 {
        // Only reachable for an empty file being created or deleted.
        return (format!("--- {old_label}\n+++ {new_label}\n"), 0);
    }
    (unified.to_string(), hunks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch() -> (tempfile::TempDir, Workspace) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("repo");
        fs::create_dir_all(root.join("pkg")).unwrap();
        fs::write(root.join("pkg/a.py"), "one\ntwo\nthree\n").unwrap();
        fs::write(root.join("pkg/b.py"), "x = 1\n").unwrap();
        fs::write(root.join("README"), "readme\n").unwrap();
        let ws = Workspace::attach(root, dir.path().join("objects"), "t", IgnoreRules::default()).unwrap();
        (dir, ws)
    }

    #[test]
    fn from_text_recounts_compute_diff() {
        let (_d, mut ws) = scratch();
        let s0 = ws.take_snapshot().unwrap();
        ws.write("pkg/a.py", b"one\n--- two\nthree\n").unwrap();
        ws.write("pkg/b.py", b"x = 2\n").unwrap();
        ws.write("new.txt", b"fresh\n").unwrap();
        let doc = ws.compute_diff(&s0).unwrap();
        assert_eq!(doc.files_touched, 3);
        assert_eq!(DiffDocument::from_text(&doc.text), doc);
        assert_eq!(DiffDocument::from_text(""), DiffDocument::empty());
    }

    #[test]
    fn snapshot_is_deterministic() {
        let (_d, mut ws) = scratch();
        let s0 = ws.take_snapshot().unwrap();
        let s1 = ws.take_snapshot().unwrap();
        assert_eq!(s0.digest_map, s1.digest_map);
        assert_ne!(s0.snapshot_id, s1.snapshot_id);
        assert_eq!(s0.digest_map.len(), 3);
    }

    #[test]
    fn edit_changes_exactly_one_digest_and_creation_adds_a_key() {
        let (_d, mut ws) = scratch();
        let s0 = ws.take_snapshot().unwrap();
        ws.write("pkg/a.py", b"one\n").unwrap();
        let s1 = ws.take_snapshot().unwrap();
        let differing = s0
            .digest_map
            .iter()
            .filter(|(k, v)| s1.digest_map.get(*k) != Some(*v))
            .count();
        assert_eq!(differing, 1);

        ws.write("pkg/new.py", b"new\n").unwrap();
        let s2 = ws.take_snapshot().unwrap();
        assert_eq!(s2.digest_map.len(), s1.digest_map.len() + 1);
    }

    #[test]
    fn ignored_noise_and_reserved_dir_are_not_covered() {
        let (_d, mut ws) = scratch();
        ws.write("pkg/__pycache__/a.cpython-310.pyc", b"\0\0").unwrap();
        ws.write("pkg/stray.pyc", b"\0").unwrap();
        ws.write(&format!("{RESERVED_TEST_DIR}/test_x.py"), b"assert False\n").unwrap();
        let snap = ws.take_snapshot().unwrap();
        assert_eq!(snap.digest_map.len(), 3);
    }

    #[test]
    fn restore_undoes_edits_deletions_and_creations() {
        let (_d, mut ws) = scratch();
        let s0 = ws.take_snapshot().unwrap();
        ws.write("pkg/a.py", b"changed\n").unwrap();
        ws.write("pkg/b.py", b"x = 2\n").unwrap();
        ws.write("README", b"").unwrap();
        ws.remove("pkg/b.py").unwrap();
        ws.write("new1.py", b"1\n").unwrap();
        ws.write("deep/new2.py", b"2\n").unwrap();
        ws.restore_snapshot(&s0).unwrap();
        assert_eq!(ws.take_snapshot().unwrap().digest_map, s0.digest_map);

        // identity restore
        ws.restore_snapshot(&s0).unwrap();
        assert_eq!(ws.digest_map().unwrap(), s0.digest_map);
    }

    #[test]
    fn foreign_snapshot_is_rejected() {
        let (_d1, mut ws1) = scratch();
        let (_d2, mut ws2) = scratch();
        let s = ws1.take_snapshot().unwrap();
        assert!(matches!(ws2.restore_snapshot(&s), Err(WorkspaceError::ForeignSnapshot(_))));
        assert!(matches!(ws2.compute_diff(&s), Err(WorkspaceError::ForeignSnapshot(_))));
        let _ = ws2.take_snapshot().unwrap();
    }

    #[test]
    fn diff_counts() {
        let (_d, mut ws) = scratch();
        let s0 = ws.take_snapshot().unwrap();
        let d = ws.compute_diff(&s0).unwrap();
        assert!(d.is_empty && d.text.is_empty() && d.files_touched == 0);

        ws.write("pkg/new.py", b"a\nb\n").unwrap();
        ws.remove("README").unwrap();
        let d = ws.compute_diff(&s0).unwrap();
        assert_eq!((d.files_touched, d.hunk_count), (2, 2));
        assert!(d.text.contains("--- /dev/null\n+++ b/pkg/new.py\n@@ -0,0 +1,2 @@\n+a\n+b\n"));
        assert!(d.text.contains("--- a/README\n+++ /dev/null\n@@ -1 +0,0 @@\n-readme\n"));
    }

    #[test]
    fn paths_may_not_escape_root() {
        let (_d, ws) = scratch();
        assert!(matches!(ws.write("../x", b""), Err(WorkspaceError::PathEscape(_))));
        assert!(matches!(ws.read("/etc/passwd"), Err(WorkspaceError::PathEscape(_))));
    }
}
