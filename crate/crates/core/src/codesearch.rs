//! Keyword localization over the project tree.
//!
//! No embeddings and no fuzzy matching: a file scores
//! `3 * path_hits + content_hits`, where a hit is a case-insensitive
//! substring occurrence of a keyword.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};
use crate::workspace::{Workspace, WorkspaceError};

pub const MAX_KEYWORDS: usize = 16;
pub const PATH_WEIGHT: u32 = 3;
pub const DEFAULT_LIMIT: usize = 20;
/// Files above this size are only matched on their path.
pub const MAX_CONTENT_SCAN_BYTES: u64 = 1024 * 1024;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("keyword query is empty")]
    EmptyQuery,
    #[error("too many keywords ({0}, at most {MAX_KEYWORDS})")]
    TooManyKeywords(usize),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    pub original: String,
    pub normalized: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordQuery {
    pub keywords: Vec<Keyword>,
    pub attempt_index: u32,
}

impl KeywordQuery {
    /// Trims tokens, drops blanks and case-insensitive duplicates.
    pub fn new<S: AsRef<str>>(tokens: &[S], attempt_index: u32) -> Result<Self, SearchError> {
        let mut keywords: Vec<Keyword> = Vec::new();
        for token in tokens {
            let original = token.as_ref().trim();
            if original.is_empty() {
                continue;
            }
            let normalized = original.to_lowercase();
            if keywords.iter().any(|k| k.normalized == normalized) {
                continue;
            }
            keywords.push(Keyword {
                original: original.to_string(),
                normalized,
            });
        }
        if keywords.is_empty() {
            return Err(SearchError::EmptyQuery);
        }
        if keywords.len() > MAX_KEYWORDS {
            return Err(SearchError::TooManyKeywords(keywords.len()));
        }
        Ok(Self {
            keywords,
            attempt_index: attempt_index.max(1),
        })
    }

    /// Split a free-form list on commas and whitespace.
    pub fn parse(list: &str, attempt_index: u32) -> Result<Self, SearchError> {
        let tokens: Vec<&str> = list
            .split(|c: char| c == ',' || c.is_whitespace())
            .collect();
        Self::new(&tokens, attempt_index)
    }

    pub fn originals(&self) -> Vec<&str> {
        self.keywords.iter().map(|k| k.original.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub path: String,
    pub path_hits: u32,
    pub content_hits: u32,
    pub score: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub entries: Vec<MatchEntry>,
    pub truncated: bool,
}

impl MatchSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub extensions: Vec<String>,
    pub max_content_bytes: u64,
    pub limit: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            extensions: vec![".py".into()],
            max_content_bytes: MAX_CONTENT_SCAN_BYTES,
            limit: DEFAULT_LIMIT,
        }
    }
}

/// Score one file. `text` is `None` when the content scan was skipped.
pub fn score_file(path: &str, text: Option<&str>, query: &KeywordQuery) -> MatchEntry {
    let lower_path = path.to_lowercase();
    let lower_text = text.map(str::to_lowercase);
    let mut path_hits = 0;
    let mut content_hits = 0;
    for kw in &query.keywords {
        if lower_path.contains(&kw.normalized) {
            path_hits += 1;
        }
        if lower_text.as_deref().is_some_and(|t| t.contains(&kw.normalized)) {
            content_hits += 1;
        }
    }
    MatchEntry {
        path: path.to_string(),
        path_hits,
        content_hits,
        score: PATH_WEIGHT * path_hits + content_hits,
    }
}

pub fn match_files(
    ws: &Workspace,
    query: &KeywordQuery,
    limit: usize,
    config: &SearchConfig,
    exec: Exec,
) -> Result<MatchSet, SearchError> {
    if query.keywords.is_empty() {
        return Err(SearchError::EmptyQuery);
    }
    let limit = limit.max(1);
    let candidates: Vec<String> = ws
        .list_files()?
        .into_iter()
        .filter(|p| config.extensions.iter().any(|ext| p.ends_with(ext.as_str())))
        .collect();

    let scored = par::map_ordered(candidates, exec, |rel| -> Result<MatchEntry, SearchError> {
        let abs = ws.abs_path(&rel)?;
        let size = std::fs::metadata(&abs)
            .map_err(|source| WorkspaceError::Io { path: abs.clone(), source })?
            .len();
        let text = if size > config.max_content_bytes {
            None
        } else {
            Some(String::from_utf8_lossy(&ws.read(&rel)?).into_owned())
        };
        Ok(score_file(&rel, text.as_deref(), query))
    });

    let mut entries = Vec::new();
    for entry in scored {
        let entry = entry?;
        if entry.score > 0 {
            entries.push(entry);
        }
    }
    entries.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
    let truncated = entries.len() > limit;
    entries.truncate(limit);
    Ok(MatchSet { entries, truncated })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchTree {
    pub text: String,
    pub node_count: usize,
}

#[derive(Default)]
struct DirNode {
    dirs: BTreeMap<String, DirNode>,
    files: BTreeMap<String, Option<u32>>,
}

impl DirNode {
    fn insert(&mut self, path: &str, score: Option<u32>) {
        match path.split_once('/') {
            Some((dir, rest)) => self.dirs.entry(dir.to_string()).or_default().insert(rest, score),
            None => {
                self.files.insert(path.to_string(), score);
            }
        }
    }

    fn render(&self, prefix: &str, lines: &mut Vec<String>) {
        let total = self.dirs.len() + self.files.len();
        let mut index = 0;
        for (name, child) in &self.dirs {
            index += 1;
            let last = index == total;
            lines.push(format!("{prefix}{}{name}", if last { "└── " } else { "├── " }));
            let next = format!("{prefix}{}", if last { "    " } else { "│   " });
            child.render(&next, lines);
        }
        for (name, score) in &self.files {
            index += 1;
            let branch = if index == total { "└── " } else { "├── " };
            match score {
                Some(score) => lines.push(format!("{prefix}{branch}{name} [score={score}]")),
                None => lines.push(format!("{prefix}{branch}{name}")),
            }
        }
    }
}

/// Render matches as an ASCII tree; directories precede files at each level.
pub fn render_match_tree(matches: &MatchSet, root_name: &str) -> MatchTree {
    let mut root = DirNode::default();
    for entry in &matches.entries {
        root.insert(&entry.path, Some(entry.score));
    }
    finish_tree(&root, root_name)
}

/// The same tree layout for plain paths, without scores.
pub fn render_path_tree<S: AsRef<str>>(paths: &[S], root_name: &str) -> MatchTree {
    let mut root = DirNode::default();
    for p in paths {
        root.insert(p.as_ref(), None);
    }
    finish_tree(&root, root_name)
}

fn finish_tree(root: &DirNode, root_name: &str) -> MatchTree {
    let mut lines = vec![root_name.to_string()];
    root.render("", &mut lines);
    MatchTree {
        node_count: lines.len(),
        text: lines.join("\n"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, score: u32) -> MatchEntry {
        MatchEntry {
            path: path.into(),
            path_hits: 0,
            content_hits: score,
            score,
        }
    }

    #[test]
    fn tree_format() {
        let set = MatchSet {
            entries: vec![entry("src/b/c.py", 4), entry("src/a.py", 2)],
            truncated: false,
        };
        let tree = render_match_tree(&set, "proj");
        let lines: Vec<&str> = tree.text.lines().collect();
        assert_eq!(
            lines,
            ["proj", "└── src", "    ├── b", "    │   └── c.py [score=4]", "    └── a.py [score=2]"]
        );
        assert_eq!(tree.node_count, 5);
    }

    #[test]
    fn empty_and_single_trees() {
        let tree = render_match_tree(&MatchSet::default(), "proj");
        assert_eq!((tree.text.as_str(), tree.node_count), ("proj", 1));

        let set = MatchSet {
            entries: vec![entry("setup.py", 1)],
            truncated: false,
        };
        let tree = render_match_tree(&set, "proj");
        assert_eq!(tree.text, "proj\n└── setup.py [score=1]");
    }

    #[test]
    fn path_tree_has_no_scores() {
        let tree = render_path_tree(&["pkg/a.py", "setup.py"], ".");
        assert_eq!(tree.text, ".\n├── pkg\n│   └── a.py\n└── setup.py");
    }

    #[test]
    fn query_normalization() {
        let q = KeywordQuery::new(&[" Matrix ", "", "matrix", "Sep"], 1).unwrap();
        assert_eq!(q.originals(), ["Matrix", "Sep"]);
        assert_eq!(q.keywords[0].normalized, "matrix");
        assert!(matches!(KeywordQuery::new::<&str>(&[], 1), Err(SearchError::EmptyQuery)));
        assert!(matches!(KeywordQuery::parse(" , ", 1), Err(SearchError::EmptyQuery)));
        let many: Vec<String> = (0..17).map(|i| format!("k{i}")).collect();
        assert!(matches!(KeywordQuery::new(&many, 1), Err(SearchError::TooManyKeywords(17))));
    }

    #[test]
    fn scoring_weights_path_hits() {
        let q = KeywordQuery::new(&["separable", "matrix"], 1).unwrap();
        let e = score_file("modeling/separable.py", Some("# separable models\ndef separability_matrix(): ..."), &q);
        assert_eq!((e.path_hits, e.content_hits, e.score), (1, 2, 5));
        let e = score_file("modeling/separable.py", None, &q);
        assert_eq!((e.path_hits, e.content_hits, e.score), (1, 0, 3));
    }
}
