use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use repeton::codemap::outline_many;
use repeton::codesearch::{match_files, KeywordQuery, SearchConfig};
use repeton::par::Exec;
use repeton::workspace::{IgnoreRules, Workspace};

fn corpus() -> (tempfile::TempDir, Workspace) {
    let objects = tempfile::tempdir().unwrap();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/outline_corpus");
    let ws = Workspace::attach(root, objects.path().join("objects"), "bench", IgnoreRules::default()).unwrap();
    (objects, ws)
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_outline(c: &mut Criterion) {
    let (_keep, ws) = corpus();
    let paths: Vec<String> = ws.list_files().unwrap().into_iter().filter(|p| p.ends_with(".py")).collect();
    let mut group = c.benchmark_group("outline_many");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| outline_many(&ws, paths.clone(), exec))
        });
    }
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    let (_keep, ws) = corpus();
    let query = KeywordQuery::parse("def, class, return, yield, lambda", 0).unwrap();
    let config = SearchConfig::default();
    let mut group = c.benchmark_group("match_files");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| match_files(&ws, &query, 20, &config, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_outline, bench_search);
criterion_main!(benches);
