mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use common::fixtures;
use proptest::prelude::*;
use repeton::codemap::{outline_file, outline_many, SymbolSpan};
use repeton::codesearch::{match_files, render_match_tree, KeywordQuery, SearchConfig};
use repeton::par::Exec;
use repeton::workspace::{IgnoreRules, Workspace};

fn corpus() -> std::path::PathBuf {
    fixtures().join("outline_corpus")
}

fn oracle_script() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/oracles/outline_oracle.py")
}

fn python_available() -> bool {
    Command::new("python3").arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn corpus_matches_frozen_oracle() {
    let oracle: BTreeMap<String, Vec<SymbolSpan>> =
        serde_json::from_str(&fs::read_to_string(corpus().join("oracle.json")).unwrap()).unwrap();
    assert_eq!(oracle.len(), 26);
    let mut symbols = 0;
    for (name, expected) in &oracle {
        let bytes = fs::read(corpus().join(name)).unwrap();
        let got = outline_file(name, &bytes).unwrap();
        assert_eq!(&got.symbols, expected, "{name}");
        symbols += expected.len();
    }
    assert_eq!(symbols, 1072);
}

#[test]
fn parallel_and_sequential_outlines_agree() {
    let ws = Workspace::attach(
        corpus(),
        tempfile::tempdir().unwrap().path().join("objects"),
        "corpus",
        IgnoreRules::default(),
    )
    .unwrap();
    let paths: Vec<String> = ws.list_files().unwrap().into_iter().filter(|p| p.ends_with(".py")).collect();
    let seq = outline_many(&ws, paths.clone(), Exec::Sequential);
    let par = outline_many(&ws, paths, Exec::Threads(4));
    assert_eq!(seq.len(), 26);
    assert_eq!(
        seq.into_iter().map(Result::unwrap).collect::<Vec<_>>(),
        par.into_iter().map(Result::unwrap).collect::<Vec<_>>()
    );
}

#[test]
fn search_ranks_the_buggy_module_first() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(
        fixtures().join("calc").to_str().unwrap(),
        "HEAD",
        "search",
        dir.path(),
        IgnoreRules::default(),
    )
    .unwrap();
    let query = KeywordQuery::parse("range_sum, ops", 0).unwrap();
    let seq = match_files(&ws, &query, 10, &SearchConfig::default(), Exec::Sequential).unwrap();
    let par = match_files(&ws, &query, 10, &SearchConfig::default(), Exec::Threads(3)).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq.entries[0].path, "calc/ops.py");
    let tree = render_match_tree(&seq, "calc");
    assert!(tree.text.contains("ops.py"));
}

/// Random nested class/def sources with decorators, comments, blank lines
/// and multi-line strings.
fn source() -> impl Strategy<Value = String> {
    prop::collection::vec((0u8..16, prop::collection::vec(0u8..16, 0..4)), 1..6).prop_map(|items| {
        let mut out = String::new();
        let mut counter = 0;
        for (style, children) in items {
            emit(&mut out, 0, style, &mut counter);
            for c in children {
                emit(&mut out, 4, c, &mut counter);
                if c % 5 == 0 {
                    emit(&mut out, 8, c / 5, &mut counter);
                }
            }
            if style % 3 == 0 {
                out.push_str("\nx = 1  # module level\n");
            }
        }
        out
    })
}

fn emit(out: &mut String, indent: usize, style: u8, counter: &mut u32) {
    *counter += 1;
    let pad = " ".repeat(indent);
    let name = if style.is_multiple_of(7) { "dup".to_string() } else { format!("n{counter}") };
    if style & 1 == 1 {
        out.push_str(&format!("{pad}@decorator({counter},\n{pad}           flag=True)\n"));
    }
    if style & 2 == 2 {
        out.push_str(&format!("{pad}class {name}(Base):\n"));
    } else if style & 4 == 4 {
        out.push_str(&format!("{pad}async def {name}(self, a,\n{pad}        b=2):\n"));
    } else {
        out.push_str(&format!("{pad}def {name}(x):\n"));
    }
    if style & 8 == 8 {
        out.push_str(&format!("{pad}    \"\"\"Doc.\n\ndef not_a_def():\n{pad}    \"\"\"\n"));
    }
    out.push_str(&format!("{pad}    value = [1,\n{pad}             2]\n"));
    out.push_str("\n# trailing comment\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_sources_match_python_ast(src in source()) {
        if !python_available() {
            return Ok(());
        }
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("gen.py");
        fs::write(&file, &src).unwrap();
        let out = Command::new("python3").arg(oracle_script()).arg(&file).output().unwrap();
        prop_assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let oracle: BTreeMap<String, Vec<SymbolSpan>> = serde_json::from_slice(&out.stdout).unwrap();
        let got = outline_file("gen.py", src.as_bytes()).unwrap();
        prop_assert_eq!(&got.symbols, &oracle["gen.py"], "{}", src);
    }
}
