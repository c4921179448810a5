//! File outlines and region views for indentation-delimited source.
//!
//! The outliner is a line scanner, not a parser: it tracks brackets, string
//! literals and backslash continuations only far enough to find where each
//! logical line begins, then reads structure off the indentation. That keeps
//! it working on files that would not compile.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Exec};
use crate::workspace::{Workspace, WorkspaceError};

pub const TAB_WIDTH: usize = 8;

#[derive(Debug, Error)]
pub enum CodemapError {
    #[error("{0} is not a text file")]
    NotText(String),
    #[error("symbol {symbol} not found in {path}")]
    SymbolNotFound { path: String, symbol: String },
    #[error("range {start}-{end} is outside 1-{total} in {path}")]
    RangeOutOfBounds {
        path: String,
        start: usize,
        end: usize,
        total: usize,
    },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Class,
    Function,
    Method,
}

impl fmt::Display for SymbolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SymbolKind::Class => "class",
            SymbolKind::Function => "function",
            SymbolKind::Method => "method",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolSpan {
    pub kind: SymbolKind,
    pub qualified_name: String,
    pub start_line: usize,
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileOutline {
    pub path: String,
    pub total_lines: usize,
    pub symbols: Vec<SymbolSpan>,
}

impl FileOutline {
    pub fn find(&self, qualified_name: &str) -> Option<&SymbolSpan> {
        self.symbols.iter().find(|s| s.qualified_name == qualified_name)
    }

    /// One line per symbol: `<kind> <qualified_name> [<start>-<end>]`.
    pub fn render(&self) -> String {
        self.symbols
            .iter()
            .map(|s| format!("{} {} [{}-{}]", s.kind, s.qualified_name, s.start_line, s.end_line))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionView {
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
    pub enclosing_symbol: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegionTarget {
    Symbol(String),
    Lines(usize, usize),
}

/// Physical lines without terminators, plus whether the last one had one.
pub(crate) fn split_lines(text: &str) -> Vec<&str> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').collect()
}

fn decode(path: &str, contents: &[u8]) -> Result<String, CodemapError> {
    if contents.contains(&0) {
        return Err(CodemapError::NotText(path.to_string()));
    }
    String::from_utf8(contents.to_vec()).map_err(|_| CodemapError::NotText(path.to_string()))
}

// ---------------------------------------------------------------------------
// logical line scanning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Quote {
    Single(char),
    Triple(char),
}

#[derive(Debug, Default, Clone, Copy)]
struct ScanState {
    depth: usize,
    string: Option<Quote>,
    continued: bool,
}

impl ScanState {
    fn clean(&self) -> bool {
        self.depth == 0 && self.string.is_none() && !self.continued
    }

    /// Advance over one physical line.
    fn feed(&mut self, line: &str) {
        self.continued = false;
        let chars: Vec<char> = line.trim_end_matches('\r').chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            match self.string {
                Some(quote) => {
                    if c == '\\' {
                        if i + 1 == chars.len() {
                            self.continued = true;
                        }
                        i += 2;
                        continue;
                    }
                    match quote {
                        Quote::Triple(q) if c == q && chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q) => {
                            self.string = None;
                            i += 3;
                            continue;
                        }
                        Quote::Single(q) if c == q => self.string = None,
                        _ => {}
                    }
                }
                None => match c {
                    '#' => break,
                    '\'' | '"' => {
                        if chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c) {
                            self.string = Some(Quote::Triple(c));
                            i += 3;
                            continue;
                        }
                        self.string = Some(Quote::Single(c));
                    }
                    '(' | '[' | '{' => self.depth += 1,
                    ')' | ']' | '}' => self.depth = self.depth.saturating_sub(1),
                    '\\' if i + 1 == chars.len() => self.continued = true,
                    _ => {}
                },
            }
            i += 1;
        }
        // An unterminated single-quoted string ends with its line unless escaped.
        if matches!(self.string, Some(Quote::Single(_))) && !self.continued {
            self.string = None;
        }
    }
}

#[derive(Debug)]
struct LogicalLine<'a> {
    /// 0-based physical line indices.
    first: usize,
    last: usize,
    indent: usize,
    head: &'a str,
}

fn indent_width(line: &str) -> usize {
    let mut col = 0;
    for c in line.chars() {
        match c {
            ' ' => col += 1,
            '\t' => col = (col / TAB_WIDTH + 1) * TAB_WIDTH,
            '\x0c' => col = 0,
            _ => break,
        }
    }
    col
}

fn logical_lines<'a>(lines: &[&'a str]) -> Vec<LogicalLine<'a>> {
    let mut out: Vec<LogicalLine<'a>> = Vec::new();
    let mut state = ScanState::default();
    let mut open: Option<LogicalLine<'a>> = None;
    for (idx, line) in lines.iter().enumerate() {
        if state.clean() {
            let stripped = line.trim_start_matches([' ', '\t', '\x0c']).trim_end_matches('\r');
            if stripped.is_empty() || stripped.starts_with('#') {
                continue;
            }
            open = Some(LogicalLine {
                first: idx,
                last: idx,
                indent: indent_width(line),
                head: stripped,
            });
        }
        state.feed(line);
        if let Some(current) = open.as_mut() {
            current.last = idx;
        }
        if state.clean() {
            if let Some(done) = open.take() {
                out.push(done);
            }
        }
    }
    if let Some(done) = open.take() {
        out.push(done);
    }
    out
}

fn identifier(s: &str) -> Option<&str> {
    let end = s
        .char_indices()
        .find(|(_, c)| !(c.is_alphanumeric() || *c == '_'))
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let name = &s[..end];
    let starts_ok = name.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_');
    starts_ok.then_some(name)
}

fn after_keyword<'a>(head: &'a str, keyword: &str) -> Option<&'a str> {
    let rest = head.strip_prefix(keyword)?;
    let trimmed = rest.trim_start_matches([' ', '\t']);
    (trimmed.len() < rest.len()).then_some(trimmed)
}

/// `(is_class, name)` when the logical line opens a definition.
fn introducer(head: &str) -> Option<(bool, &str)> {
    if let Some(rest) = after_keyword(head, "class") {
        return identifier(rest).map(|n| (true, n));
    }
    let def_rest = after_keyword(head, "def")
        .or_else(|| after_keyword(head, "async").and_then(|r| after_keyword(r, "def")))?;
    identifier(def_rest).map(|n| (false, n))
}

struct RawDef<'a> {
    is_class: bool,
    name: &'a str,
    header_line: usize,
    indent: usize,
    start: usize,
    end: usize,
}

pub fn outline_file(path: &str, contents: &[u8]) -> Result<FileOutline, CodemapError> {
    let text = decode(path, contents)?;
    let lines = split_lines(&text);
    let logical = logical_lines(&lines);

    let mut defs: Vec<RawDef> = Vec::new();
    for (k, header) in logical.iter().enumerate() {
        let Some((is_class, name)) = introducer(header.head) else {
            continue;
        };
        let mut end = header.last;
        for body in &logical[k + 1..] {
            if body.indent <= header.indent {
                break;
            }
            end = body.last;
        }
        let mut start = header.first;
        for prev in logical[..k].iter().rev() {
            if prev.indent == header.indent && prev.head.starts_with('@') {
                start = prev.first;
            } else {
                break;
            }
        }
        defs.push(RawDef {
            is_class,
            name,
            header_line: header.first,
            indent: header.indent,
            start,
            end,
        });
    }

    // Resolve nesting with a stack of open definitions.
    let mut symbols: Vec<SymbolSpan> = Vec::with_capacity(defs.len());
    let mut stack: Vec<(usize, usize, bool, String)> = Vec::new(); // (end, indent, is_class, qualified)
    let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for def in &defs {
        while let Some(&(end, indent, _, _)) = stack.last() {
            if end < def.header_line || indent >= def.indent {
                stack.pop();
            } else {
                break;
            }
        }
        let (kind, base) = match stack.last() {
            Some((_, _, parent_is_class, parent)) => {
                let kind = if def.is_class {
                    SymbolKind::Class
                } else if *parent_is_class {
                    SymbolKind::Method
                } else {
                    SymbolKind::Function
                };
                (kind, format!("{parent}.{}", def.name))
            }
            None => (
                if def.is_class { SymbolKind::Class } else { SymbolKind::Function },
                def.name.to_string(),
            ),
        };
        let count = seen.entry(base.clone()).or_insert(0);
        *count += 1;
        let qualified = if *count == 1 { base } else { format!("{base}#{count}") };
        stack.push((def.end, def.indent, def.is_class, qualified.clone()));
        symbols.push(SymbolSpan {
            kind,
            qualified_name: qualified,
            start_line: def.start + 1,
            end_line: def.end + 1,
        });
    }
    symbols.sort_by(|a, b| a.start_line.cmp(&b.start_line).then(b.end_line.cmp(&a.end_line)));

    Ok(FileOutline {
        path: path.to_string(),
        total_lines: lines.len(),
        symbols,
    })
}

pub fn outline_workspace_file(ws: &Workspace, path: &str) -> Result<FileOutline, CodemapError> {
    let bytes = ws.read(path)?;
    outline_file(path, &bytes)
}

/// Outline many files; results follow input order.
pub fn outline_many(ws: &Workspace, paths: Vec<String>, exec: Exec) -> Vec<Result<FileOutline, CodemapError>> {
    par::map_ordered(paths, exec, |p| outline_workspace_file(ws, &p))
}

/// Numbered lines `start..=end` of `text`, terminators preserved.
pub fn number_lines(text: &str, start: usize, end: usize) -> String {
    let mut out = String::new();
    for (idx, line) in text.split_inclusive('\n').enumerate() {
        let n = idx + 1;
        if n < start {
            continue;
        }
        if n > end {
            break;
        }
        out.push_str(&format!("{n}: {line}"));
    }
    out
}

pub fn view_region(ws: &Workspace, path: &str, target: &RegionTarget) -> Result<RegionView, CodemapError> {
    let bytes = ws.read(path)?;
    region_of(path, &bytes, target)
}

pub fn region_of(path: &str, contents: &[u8], target: &RegionTarget) -> Result<RegionView, CodemapError> {
    let outline = outline_file(path, contents)?;
    let text = decode(path, contents)?;
    let (start, end, enclosing) = match target {
        RegionTarget::Symbol(name) => {
            let sym = outline.find(name).ok_or_else(|| CodemapError::SymbolNotFound {
                path: path.to_string(),
                symbol: name.clone(),
            })?;
            (sym.start_line, sym.end_line, Some(sym.qualified_name.clone()))
        }
        RegionTarget::Lines(start, end) => {
            if *start < 1 || start > end || *end > outline.total_lines {
                return Err(CodemapError::RangeOutOfBounds {
                    path: path.to_string(),
                    start: *start,
                    end: *end,
                    total: outline.total_lines,
                });
            }
            (*start, *end, None)
        }
    };
    Ok(RegionView {
        path: path.to_string(),
        start_line: start,
        end_line: end,
        text: number_lines(&text, start, end),
        enclosing_symbol: enclosing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "class A:\n    def f(self):\n        pass\n\ndef g():\n    return 1\n";

    fn spans(src: &str) -> Vec<(SymbolKind, String, usize, usize)> {
        outline_file("mod.py", src.as_bytes())
            .unwrap()
            .symbols
            .into_iter()
            .map(|s| (s.kind, s.qualified_name, s.start_line, s.end_line))
            .collect()
    }

    #[test]
    fn basic_fixture() {
        use SymbolKind::*;
        assert_eq!(
            spans(FIXTURE),
            vec![
                (Class, "A".into(), 1, 3),
                (Method, "A.f".into(), 2, 3),
                (Function, "g".into(), 5, 6)
            ]
        );
        let outline = outline_file("mod.py", FIXTURE.as_bytes()).unwrap();
        assert_eq!(outline.total_lines, 6);
        assert_eq!(outline.render(), "class A [1-3]\nmethod A.f [2-3]\nfunction g [5-6]");
    }

    #[test]
    fn empty_and_comment_only() {
        let o = outline_file("e.py", b"").unwrap();
        assert_eq!((o.total_lines, o.symbols.len()), (0, 0));
        let o = outline_file("c.py", b"# def nope():\n#   class X:\n").unwrap();
        assert_eq!((o.total_lines, o.symbols.len()), (2, 0));
    }

    #[test]
    fn binary_is_rejected() {
        assert!(matches!(outline_file("b.bin", b"\0\x01"), Err(CodemapError::NotText(_))));
        assert!(matches!(outline_file("b.bin", &[0xff, 0xfe]), Err(CodemapError::NotText(_))));
    }

    #[test]
    fn decorators_strings_and_trailing_comments() {
        let src = "\
@decorator(
    arg=1,
)
@other
def f(x):
    s = \"\"\"
def not_a_function():
\"\"\"
    return (x +
1)
    # trailing comment

x = 1
";
        assert_eq!(spans(src), vec![(SymbolKind::Function, "f".into(), 1, 10)]);
    }

    #[test]
    fn nested_async_duplicates_and_tabs() {
        let src = "\
class C:
\tasync def run(self):
\t\tdef inner():
\t\t\tpass
\t\treturn inner
\t@property
\tdef x(self): return 1
\t@x.setter
\tdef x(self, v): pass
def top(): pass
";
        use SymbolKind::*;
        assert_eq!(
            spans(src),
            vec![
                (Class, "C".into(), 1, 9),
                (Method, "C.run".into(), 2, 5),
                (Function, "C.run.inner".into(), 3, 4),
                (Method, "C.x".into(), 6, 7),
                (Method, "C.x#2".into(), 8, 9),
                (Function, "top".into(), 10, 10),
            ]
        );
    }

    #[test]
    fn keywords_need_a_separator() {
        assert!(spans("classify = 1\ndefault = 2\nasync_def = 3\n").is_empty());
    }

    #[test]
    fn region_by_symbol_and_range() {
        let v = region_of("mod.py", FIXTURE.as_bytes(), &RegionTarget::Symbol("g".into())).unwrap();
        assert_eq!(v.text, "5: def g():\n6:     return 1\n");
        assert_eq!((v.start_line, v.end_line), (5, 6));
        assert_eq!(v.enclosing_symbol.as_deref(), Some("g"));

        let v = region_of("mod.py", FIXTURE.as_bytes(), &RegionTarget::Lines(1, 1)).unwrap();
        assert_eq!(v.text, "1: class A:\n");
        assert!(v.enclosing_symbol.is_none());

        assert!(matches!(
            region_of("mod.py", FIXTURE.as_bytes(), &RegionTarget::Symbol("missing".into())),
            Err(CodemapError::SymbolNotFound { .. })
        ));
        assert!(matches!(
            region_of("mod.py", FIXTURE.as_bytes(), &RegionTarget::Lines(0, 1)),
            Err(CodemapError::RangeOutOfBounds { .. })
        ));
        assert!(matches!(
            region_of("mod.py", FIXTURE.as_bytes(), &RegionTarget::Lines(3, 7)),
            Err(CodemapError::RangeOutOfBounds { .. })
        ));
    }

    #[test]
    fn partition_reconstructs_text() {
        let v1 = region_of("mod.py", FIXTURE.as_bytes(), &RegionTarget::Lines(1, 4)).unwrap();
        let v2 = region_of("mod.py", FIXTURE.as_bytes(), &RegionTarget::Lines(5, 6)).unwrap();
        let rebuilt: String = [v1.text, v2.text]
            .concat()
            .split_inclusive('\n')
            .map(|l| l.split_once(": ").unwrap().1)
            .collect();
        assert_eq!(rebuilt, FIXTURE);
    }
}
