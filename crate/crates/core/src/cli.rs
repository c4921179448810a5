//! Command-line routing. `route` never panics to the user; it maps every
//! failure to an exit code and a message on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::agentio::{
    BackendFactory, ChatBackend, LiveBackend, LiveConfig, RecordingBackend, RecordingFactory, ReplayBackend,
    ReplayDir, ScriptDir, ScriptedBackend,
};
use crate::bench::{load_reports, load_tasks, run_bench, summarize_outcomes, BenchError, TaskInstance};
use crate::codemap::outline_file;
use crate::codesearch::{match_files, render_match_tree, KeywordQuery, SearchConfig};
use crate::orchestrator::{run_irv_in, IrvConfig, RunOutcome};
use crate::par::Exec;
use crate::workspace::{IgnoreRules, Workspace};

pub const WORK_DIR_ENV: &str = "REPETON_WORK_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_RESOLVED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ENV: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "repeton", version, about = "Structured patch-and-test bug repair harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Repair one task.
    Run(RunArgs),
    /// Repair every task in a JSON-lines file.
    Bench(BenchArgs),
    /// Print the outline of a source file.
    Outline(OutlineArgs),
    /// Rank files in a directory against keywords.
    Search(SearchArgs),
    /// Run one task while writing a replay transcript.
    Record(RecordArgs),
    /// Recompute the outcome summary from saved run reports.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Live,
    Replay,
    Script,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RecordSource {
    Live,
    Script,
}

#[derive(Debug, Args)]
struct ConfigFlags {
    /// Config file: a JSON object or key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_irv_iterations: Option<u32>,
    #[arg(long)]
    max_llm_calls: Option<usize>,
    /// Seconds.
    #[arg(long)]
    wall_clock_budget: Option<u64>,
    #[arg(long)]
    window_k: Option<usize>,
    #[arg(long)]
    max_stage_attempts: Option<u32>,
    /// Continue with an uncertified reproduction test.
    #[arg(long)]
    no_strict_reproduction: bool,
    #[arg(long)]
    keep_first_passing: bool,
    /// Seconds per test run.
    #[arg(long)]
    test_timeout: Option<u64>,
    #[arg(long)]
    context_limit: Option<usize>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Debug, Args)]
struct TaskFlags {
    /// Git repository (path or URL) or a plain directory.
    #[arg(long)]
    repo: String,
    #[arg(long, default_value = "HEAD")]
    rev: String,
    #[arg(long)]
    problem_file: PathBuf,
    /// Defaults to the repository's directory name.
    #[arg(long)]
    instance_id: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Workspace root; defaults to $REPETON_WORK_DIR or a fresh temp dir.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    task: TaskFlags,
    #[arg(long, value_enum, default_value = "live")]
    backend: BackendKind,
    /// Replay transcript (JSON lines).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Scripted responses (JSON array).
    #[arg(long)]
    script: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, value_enum, default_value = "live")]
    backend: BackendKind,
    /// Directory of `<instance_id>.jsonl` transcripts.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Directory of `<instance_id>.json` scripts.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Also record every run into this directory.
    #[arg(long)]
    record_dir: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Debug, Args)]
struct OutlineArgs {
    file: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long, default_value = ".")]
    repo: PathBuf,
    #[arg(required = true)]
    keywords: Vec<String>,
    #[arg(long, default_value_t = crate::codesearch::DEFAULT_LIMIT)]
    limit: usize,
    /// Candidate file extension; repeatable.
    #[arg(long = "ext")]
    extensions: Vec<String>,
}

#[derive(Debug, Args)]
struct RecordArgs {
    #[command(flatten)]
    task: TaskFlags,
    #[arg(long, value_enum, default_value = "live")]
    backend: RecordSource,
    /// Where to write the transcript.
    #[arg(long)]
    transcript: PathBuf,
    #[arg(long)]
    script: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    reports: PathBuf,
}

/// A failure with its exit code.
struct Failure {
    code: i32,
    message: String,
}

fn env_err(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_ENV,
        message: message.to_string(),
    }
}

fn usage_err(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.to_string(),
    }
}

type CliResult = Result<i32, Failure>;

pub fn route<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Outline(args) => cmd_outline(args),
        Command::Search(args) => cmd_search(args),
        Command::Record(args) => cmd_record(args),
        Command::Summarize(args) => cmd_summarize(args),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Parse a config file body: a JSON object, or `key = value` lines where
/// values are JSON literals or bare strings.
pub fn parse_config_text(text: &str) -> Result<IrvConfig, String> {
    let trimmed = text.trim();
    let value = if trimmed.starts_with('{') {
        serde_json::from_str::<Value>(trimmed).map_err(|e| e.to_string())?
    } else {
        let mut map = Map::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", idx + 1))?;
            let raw = raw.trim();
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.trim().to_string(), value);
        }
        Value::Object(map)
    };
    serde_json::from_value(value).map_err(|e| e.to_string())
}

fn build_config(flags: &ConfigFlags) -> Result<IrvConfig, Failure> {
    let mut config = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| env_err(format!("{}: {e}", path.display())))?;
            parse_config_text(&text).map_err(|e| usage_err(format!("{}: {e}", path.display())))?
        }
        None => IrvConfig::default(),
    };
    macro_rules! apply {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = flags.$flag.clone() { config.$field = v; })*
        };
    }
    apply!(
        max_irv_iterations => max_irv_iterations,
        max_llm_calls => max_llm_calls,
        wall_clock_budget => wall_clock_budget_s,
        window_k => window_k,
        max_stage_attempts => max_stage_attempts,
        test_timeout => test_timeout_s,
        context_limit => context_limit,
        model => model_id,
        temperature => temperature,
        max_tokens => max_tokens
    );
    if flags.no_strict_reproduction {
        config.strict_reproduction = false;
    }
    if flags.keep_first_passing {
        config.keep_first_passing = true;
    }
    config.validate().map_err(usage_err)?;
    Ok(config)
}

fn work_root(flag: &Option<PathBuf>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.clone();
    }
    if let Some(dir) = std::env::var_os(WORK_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    std::env::temp_dir().join(format!("repeton-{}-{nanos}", std::process::id()))
}

fn load_task(flags: &TaskFlags) -> Result<TaskInstance, Failure> {
    let statement = fs::read_to_string(&flags.problem_file)
        .map_err(|e| env_err(format!("{}: {e}", flags.problem_file.display())))?;
    if statement.trim().is_empty() {
        return Err(usage_err(format!("{} is empty", flags.problem_file.display())));
    }
    let instance_id = match &flags.instance_id {
        Some(id) => id.clone(),
        None => Path::new(flags.repo.trim_end_matches('/'))
            .file_name()
            .map(|n| n.to_string_lossy().trim_end_matches(".git").to_string())
            .filter(|n| !n.is_empty())
            .unwrap_or_else(|| "task".into()),
    };
    Ok(TaskInstance {
        instance_id,
        repo_location: flags.repo.clone(),
        base_revision: flags.rev.clone(),
        problem_statement: statement,
        validation_command: None,
        time_limit: None,
    })
}

fn single_backend(kind: BackendKind, transcript: &Option<PathBuf>, script: &Option<PathBuf>) -> Result<Box<dyn ChatBackend>, Failure> {
    let need = |path: &Option<PathBuf>, flag: &str| {
        path.clone()
            .ok_or_else(|| usage_err(format!("--backend {kind:?} needs --{flag}").to_lowercase()))
    };
    Ok(match kind {
        BackendKind::Live => Box::new(LiveBackend::new(LiveConfig::from_env().map_err(env_err)?)),
        BackendKind::Replay => Box::new(ReplayBackend::from_path(&need(transcript, "transcript")?).map_err(env_err)?),
        BackendKind::Script => Box::new(ScriptedBackend::from_path(&need(script, "script")?).map_err(env_err)?),
    })
}

fn execute_single(task: TaskInstance, flags: &TaskFlags, config: &IrvConfig, backend: Box<dyn ChatBackend>) -> CliResult {
    let started = Instant::now();
    let root = work_root(&flags.work_dir);
    let mut ws = Workspace::open(
        &task.repo_location,
        &task.base_revision,
        &task.instance_id,
        &root,
        IgnoreRules::default(),
    )
    .map_err(env_err)?;
    eprintln!("workspace: {}", ws.root().display());
    let report = run_irv_in(&mut ws, &task, config, backend, started);
    let (json_path, patch_path) = report.write_to(&flags.out_dir).map_err(env_err)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    eprintln!(
        "outcome: {} after {} iteration(s), {} model call(s); report {}, patch {}",
        report.outcome,
        report.iterations_used,
        report.llm_calls_used,
        json_path.display(),
        patch_path.display()
    );
    Ok(if report.outcome == RunOutcome::Resolved { EXIT_OK } else { EXIT_NOT_RESOLVED })
}

fn cmd_run(args: RunArgs) -> CliResult {
    let config = build_config(&args.config)?;
    let task = load_task(&args.task)?;
    let backend = single_backend(args.backend, &args.transcript, &args.script)?;
    execute_single(task, &args.task, &config, backend)
}

fn cmd_record(args: RecordArgs) -> CliResult {
    let config = build_config(&args.config)?;
    let task = load_task(&args.task)?;
    let kind = match args.backend {
        RecordSource::Live => BackendKind::Live,
        RecordSource::Script => BackendKind::Script,
    };
    let inner = single_backend(kind, &None, &args.script)?;
    let backend = RecordingBackend::create(inner, &args.transcript).map_err(env_err)?;
    let code = execute_single(task, &args.task, &config, Box::new(backend))?;
    eprintln!("transcript: {}", args.transcript.display());
    Ok(code)
}

fn cmd_bench(args: BenchArgs) -> CliResult {
    let config = build_config(&args.config)?;
    if args.parallelism == 0 {
        return Err(usage_err("--parallelism must be at least 1"));
    }
    let tasks = load_tasks(&args.tasks).map_err(|e| match e {
        BenchError::Io { .. } => env_err(e),
        other => usage_err(other),
    })?;
    let need = |path: &Option<PathBuf>, flag: &str| {
        path.clone()
            .ok_or_else(|| usage_err(format!("this backend needs --{flag} <dir>")))
    };
    let factory: Box<dyn BackendFactory> = match args.backend {
        BackendKind::Live => Box::new(LiveConfig::from_env().map_err(env_err)?),
        BackendKind::Replay => Box::new(ReplayDir(need(&args.transcript, "transcript")?)),
        BackendKind::Script => Box::new(ScriptDir(need(&args.script, "script")?)),
    };
    let factory: Box<dyn BackendFactory> = match args.record_dir {
        Some(dir) => Box::new(RecordingFactory { inner: factory, dir }),
        None => factory,
    };
    let root = work_root(&args.work_dir);
    let (reports, summary) = run_bench(&tasks, args.parallelism, &config, factory.as_ref(), &root).map_err(env_err)?;
    for report in &reports {
        report.write_to(&args.out_dir).map_err(env_err)?;
        eprintln!("{}: {}", report.instance_id, report.outcome);
    }
    write_summary(&args.out_dir, &summary)?;
    Ok(EXIT_OK)
}

fn write_summary(out_dir: &Path, summary: &crate::bench::BenchSummary) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::create_dir_all(out_dir).map_err(env_err)?;
    fs::write(out_dir.join("summary.txt"), summary.render_table()).map_err(env_err)?;
    println!("{json}");
    eprint!("{}", summary.render_table());
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> CliResult {
    let reports = load_reports(&args.reports).map_err(env_err)?;
    let summary = summarize_outcomes(&reports).map_err(env_err)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    eprint!("{}", summary.render_table());
    Ok(EXIT_OK)
}

fn cmd_outline(args: OutlineArgs) -> CliResult {
    let bytes = fs::read(&args.file).map_err(|e| env_err(format!("{}: {e}", args.file.display())))?;
    let outline = outline_file(&args.file.to_string_lossy(), &bytes).map_err(usage_err)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&outline).expect("outline serializes"));
    } else {
        println!("{}", outline.render());
    }
    Ok(EXIT_OK)
}

fn cmd_search(args: SearchArgs) -> CliResult {
    if !args.repo.is_dir() {
        return Err(env_err(format!("{} is not a directory", args.repo.display())));
    }
    let query = KeywordQuery::new(&args.keywords, 1).map_err(usage_err)?;
    let scratch = std::env::temp_dir().join(format!("repeton-search-{}", std::process::id()));
    let ws = Workspace::attach(args.repo.clone(), scratch.clone(), "search", IgnoreRules::default()).map_err(env_err)?;
    let mut config = SearchConfig::default();
    if !args.extensions.is_empty() {
        config.extensions = args
            .extensions
            .iter()
            .map(|e| if e.starts_with('.') { e.clone() } else { format!(".{e}") })
            .collect();
    }
    let result = match_files(&ws, &query, args.limit, &config, Exec::default());
    let _ = fs::remove_dir_all(&scratch);
    let matches = result.map_err(env_err)?;
    let name = args
        .repo
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| ".".into());
    println!("{}", render_match_tree(&matches, &name).text);
    if matches.truncated {
        eprintln!("(more matches beyond --limit {})", args.limit);
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_formats() {
        let c = parse_config_text("# pinned\nmax_irv_iterations = 2\nmodel_id = gpt-x\nstrict_reproduction=false\n").unwrap();
        assert_eq!((c.max_irv_iterations, c.model_id.as_str(), c.strict_reproduction), (2, "gpt-x", false));
        let c = parse_config_text(r#"{"max_llm_calls": 9}"#).unwrap();
        assert_eq!(c.max_llm_calls, 9);
        assert!(parse_config_text("bogus = 1").is_err());
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(route(["repeton", "run", "--no-such-flag"]), EXIT_USAGE);
        assert_eq!(route(["repeton"]), EXIT_USAGE);
        assert_eq!(route(["repeton", "--help"]), EXIT_OK);
    }

    #[test]
    fn empty_reports_dir_is_an_environment_error() {
        let dir = tempfile::tempdir().unwrap();
        let reports = dir.path().to_str().unwrap();
        assert_eq!(route(["repeton", "summarize", "--reports", reports]), EXIT_ENV);
    }
}
