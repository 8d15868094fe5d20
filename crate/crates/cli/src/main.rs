//! `kernloop`: run, resume and evaluate kernel refinement suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 infrastructure failure,
//! 3 some tasks of the suite could not be completed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kernloop_core::agents::{Conductor, HardwareSpec, RuleTable};
use kernloop_core::compendium::{self, extractive_provider, parse_sources, BuildOptions, Compendium};
use kernloop_core::eval::{evaluate_suite, report_render, EvalOptions, Format, SpeedupBasis};
use kernloop_core::llm::{LlmClient, LlmProvider, ProviderConfig, ReplayProvider};
use kernloop_core::metrics::{Backend, Catalog};
use kernloop_core::orchestrator::{load_task_result, run_suite, LoopDeps, RunOptions, TaskResult, TASK_RESULT_FILE};
use kernloop_core::profiler::{FixtureAdapter, FixtureFormat, NcuAdapter, NcuAliasTable, PerfAdapter, ProfilerAdapter};
use kernloop_core::verifier::{HarnessConfig, HarnessVerifier, TaskSpec};
use tracing::{info, warn};

const EXIT_USAGE: u8 = 1;
const EXIT_INFRA: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

/// An error caused by the invocation rather than by the environment.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "kernloop", version, about = "Profile-guided LLM kernel refinement loop")]
struct Cli {
    /// Log filter, e.g. `info` or `kernloop_core=debug`; RUST_LOG wins when set.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the refinement loop over a task suite.
    Run(RunArgs),
    /// Re-run a suite deterministically from a recorded transcript.
    Replay(ReplayArgs),
    /// Compute Success / Speedup / Fast1 from a state directory.
    Evaluate(EvaluateArgs),
    /// Offline metric-documentation knowledge base.
    Compendium {
        #[command(subcommand)]
        command: CompendiumCommand,
    },
    /// Hardware description handed to the agents.
    Hw {
        #[command(subcommand)]
        command: HwCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Cpu,
    Gpu,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Backend {
        match b {
            BackendArg::Cpu => Backend::Cpu,
            BackendArg::Gpu => Backend::Gpu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderArg {
    /// Serve responses from `--transcript`.
    Replay,
    /// OpenAI-compatible endpoint described by `--provider-config`.
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfilerArg {
    Perf,
    Ncu,
    /// Replay stored profiler output from `--profile-fixtures`.
    Fixture,
}

#[derive(Debug, Args)]
struct SuiteArgs {
    /// Directory of task descriptors (`*.json`).
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, value_enum, default_value = "cpu")]
    backend: BackendArg,
    /// State directory; one subdirectory per task.
    #[arg(long)]
    state: PathBuf,
    /// Overrides every task's attempt budget.
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Continue from persisted state instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Stop a task once its best speedup reaches this value.
    #[arg(long)]
    target_speedup: Option<f64>,
    /// Hardware JSON; CPU hardware is probed when omitted.
    #[arg(long)]
    hw_file: Option<PathBuf>,
    /// Defaults to perf for cpu and ncu for gpu, or fixture when
    /// `--profile-fixtures` is given.
    #[arg(long, value_enum)]
    profiler: Option<ProfilerArg>,
    /// Directory of `iter<N>.raw` / `default.raw` profiler outputs.
    #[arg(long)]
    profile_fixtures: Option<PathBuf>,
    /// Compendium JSON; the bundled one is used when omitted.
    #[arg(long)]
    compendium: Option<PathBuf>,
    /// Bottleneck rule table JSON.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Metrics documents handed to the Conductor per round.
    #[arg(long, default_value_t = kernloop_core::agents::DEFAULT_DOC_K)]
    doc_k: usize,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long, value_enum)]
    provider: ProviderArg,
    /// Transcript to replay (`--provider replay`).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Provider config JSON (`--provider http`).
    #[arg(long)]
    provider_config: Option<PathBuf>,
    /// Where live LLM exchanges are recorded; defaults to
    /// `<state>/transcript.ndjson` for non-replay providers.
    #[arg(long)]
    record_transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    transcript: PathBuf,
    #[command(flatten)]
    suite: SuiteArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Json,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Table => Format::Table,
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Count a best speedup of exactly 1.0x towards Fast1.
    #[arg(long)]
    fast1_inclusive: bool,
    /// Average speedups over all tasks, failures counting as 1.0x.
    #[arg(long)]
    speedup_over_all: bool,
    /// Count infrastructure failures as unsuccessful tasks.
    #[arg(long)]
    include_infrastructure: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SummarizerArg {
    /// Deterministic extractive summarizer; no network.
    Extractive,
    Replay,
    Http,
}

#[derive(Debug, Subcommand)]
enum CompendiumCommand {
    /// Summarize documentation snapshots into a compendium.
    Build {
        /// Source list: `<tool> <path-or-url>` per line, relative to its directory.
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "extractive")]
        provider: SummarizerArg,
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long)]
        provider_config: Option<PathBuf>,
        /// Backends whose default metrics must be covered.
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["cpu", "gpu"])]
        backends: Vec<BackendArg>,
        /// Fixed build timestamp, for reproducible output.
        #[arg(long)]
        built_at: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum HwCommand {
    /// Print the hardware JSON for this host (cpu) or validate a file (gpu).
    Probe {
        #[arg(long, value_enum, default_value = "cpu")]
        backend: BackendArg,
        #[arg(long)]
        hw_file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_provider_config(path: Option<&Path>) -> Result<ProviderConfig> {
    let path = path.ok_or_else(|| usage("--provider-config is required for the http provider"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn replay_provider(path: Option<&Path>) -> Result<Arc<dyn LlmProvider>> {
    let path = path.ok_or_else(|| usage("--transcript is required for the replay provider"))?;
    if !path.is_file() {
        return Err(usage(format!("transcript {} not found", path.display())));
    }
    Ok(Arc::new(ReplayProvider::from_file(path)?))
}

fn load_tasks(dir: &Path, backend: Backend) -> Result<Vec<TaskSpec>> {
    if !dir.is_dir() {
        return Err(usage(format!("task directory {} not found", dir.display())));
    }
    let all = TaskSpec::load_dir(dir).map_err(|e| usage(e.to_string()))?;
    let total = all.len();
    let tasks: Vec<TaskSpec> = all.into_iter().filter(|t| t.backend == backend).collect();
    if tasks.is_empty() {
        return Err(usage(format!("no {backend} tasks among the {total} in {}", dir.display())));
    }
    Ok(tasks)
}

fn hardware(backend: Backend, hw_file: Option<&Path>) -> Result<HardwareSpec> {
    let hw = match hw_file {
        Some(p) => HardwareSpec::load(p).map_err(|e| usage(e.to_string()))?,
        None if backend == Backend::Gpu => return Err(usage("gpu hardware cannot be probed; pass --hw-file")),
        None => HardwareSpec::probe_host(backend)?,
    };
    if hw.backend != backend {
        return Err(usage(format!("hardware file describes a {} target, not {backend}", hw.backend)));
    }
    Ok(hw)
}

fn profiler(args: &SuiteArgs, backend: Backend, catalog: Arc<Catalog>) -> Result<Arc<dyn ProfilerAdapter>> {
    let kind = args.profiler.unwrap_or(match (&args.profile_fixtures, backend) {
        (Some(_), _) => ProfilerArg::Fixture,
        (None, Backend::Cpu) => ProfilerArg::Perf,
        (None, Backend::Gpu) => ProfilerArg::Ncu,
    });
    Ok(match kind {
        ProfilerArg::Perf => Arc::new(PerfAdapter::new(catalog)),
        ProfilerArg::Ncu => {
            let aliases = NcuAliasTable::builtin(&catalog);
            Arc::new(NcuAdapter::new(catalog, aliases))
        }
        ProfilerArg::Fixture => {
            let dir = args
                .profile_fixtures
                .clone()
                .ok_or_else(|| usage("--profiler fixture needs --profile-fixtures"))?;
            let format = match backend {
                Backend::Cpu => FixtureFormat::Perf,
                Backend::Gpu => FixtureFormat::Ncu(NcuAliasTable::builtin(&catalog)),
            };
            Arc::new(FixtureAdapter::new(dir, format, catalog))
        }
    })
}

/// Lets task descriptors name sibling binaries such as
/// `kernloop-toy-runner` without a path.
fn expose_own_directory() {
    let Some(dir) = std::env::current_exe().ok().and_then(|p| p.parent().map(Path::to_path_buf)) else {
        return;
    };
    let mut paths: Vec<PathBuf> = std::env::var_os("PATH")
        .map(|p| std::env::split_paths(&p).collect())
        .unwrap_or_default();
    if !paths.contains(&dir) {
        paths.push(dir);
        if let Ok(joined) = std::env::join_paths(paths) {
            std::env::set_var("PATH", joined);
        }
    }
}

fn run_suite_cmd(args: &SuiteArgs, llm: LlmClient) -> Result<u8> {
    let backend = Backend::from(args.backend);
    if args.parallel == 0 {
        return Err(usage("--parallel must be at least 1"));
    }
    if args.max_attempts == Some(0) {
        return Err(usage("--max-attempts must be at least 1"));
    }
    let tasks = load_tasks(&args.tasks, backend)?;
    let catalog = Catalog::builtin();
    let rules = match &args.rules {
        Some(p) => RuleTable::load(p, &catalog).map_err(|e| usage(e.to_string()))?,
        None => RuleTable::builtin(),
    };
    let compendium = match &args.compendium {
        Some(p) => Compendium::load(p).map_err(|e| usage(e.to_string()))?,
        None => Compendium::bundled(),
    };
    let deps = LoopDeps {
        llm,
        verifier: Arc::new(HarnessVerifier::new(HarnessConfig::default())),
        profiler: profiler(args, backend, Arc::new(catalog.clone()))?,
        compendium: Arc::new(compendium),
        hardware: hardware(backend, args.hw_file.as_deref())?,
        conductor: Arc::new(Conductor::new(catalog, rules)),
    };
    let mut opts = RunOptions::new(&args.state);
    opts.max_attempts = args.max_attempts;
    opts.target_speedup = args.target_speedup;
    opts.doc_k = args.doc_k;
    std::fs::create_dir_all(&args.state).with_context(|| format!("creating {}", args.state.display()))?;

    info!(tasks = tasks.len(), parallel = args.parallel, "starting suite");
    let results = run_suite(&tasks, &deps, &opts, args.parallel, args.resume);
    let mut finished = 0;
    for (task, r) in tasks.iter().zip(&results) {
        match r {
            Ok(t) if !t.is_infrastructure_failure() && t.error.is_none() => {
                finished += 1;
                println!(
                    "{}: {} after {} attempt(s), best {}",
                    t.task_id,
                    if t.success { "success" } else { "no correct kernel" },
                    t.attempts_used,
                    t.best_speedup().map(|s| format!("{s:.2}x")).unwrap_or_else(|| "-".into())
                );
            }
            Ok(t) => println!(
                "{}: {:?}: {}",
                t.task_id,
                t.status,
                t.error.as_deref().unwrap_or("unknown error")
            ),
            Err(e) => println!("{}: error: {e}", task.task_id),
        }
    }
    let stats = deps.llm.stats();
    info!(completed = stats.completed, retries = stats.retries, "llm usage");
    Ok(if finished == tasks.len() {
        0
    } else if finished == 0 {
        EXIT_INFRA
    } else {
        EXIT_PARTIAL
    })
}

fn run_cmd(args: &RunArgs) -> Result<u8> {
    let provider = match args.provider {
        ProviderArg::Replay => replay_provider(args.transcript.as_deref())?,
        ProviderArg::Http => read_provider_config(args.provider_config.as_deref())?.build()?,
    };
    let mut llm = LlmClient::new(provider);
    let record = match (&args.record_transcript, args.provider) {
        (Some(p), _) => Some(p.clone()),
        (None, ProviderArg::Http) => Some(args.suite.state.join("transcript.ndjson")),
        (None, ProviderArg::Replay) => None,
    };
    if let Some(path) = record {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        llm = llm.with_transcript_file(&path)?;
    }
    run_suite_cmd(&args.suite, llm)
}

fn replay_cmd(args: &ReplayArgs) -> Result<u8> {
    let llm = LlmClient::new(replay_provider(Some(&args.transcript))?);
    run_suite_cmd(&args.suite, llm)
}

fn collect_results(state: &Path) -> Result<Vec<TaskResult>> {
    if !state.is_dir() {
        return Err(usage(format!("state directory {} not found", state.display())));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(state)
        .with_context(|| format!("listing {}", state.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut results = Vec::new();
    for dir in dirs {
        match load_task_result(&dir)? {
            Some(r) => results.push(r),
            None => warn!(dir = %dir.display(), "no {TASK_RESULT_FILE}; task skipped"),
        }
    }
    Ok(results)
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<u8> {
    let results = collect_results(&args.state)?;
    if results.is_empty() {
        return Err(usage(format!("no task results under {}", args.state.display())));
    }
    let opts = EvalOptions {
        fast1_inclusive: args.fast1_inclusive,
        speedup_basis: if args.speedup_over_all {
            SpeedupBasis::AllTasks
        } else {
            SpeedupBasis::Successes
        },
        include_infrastructure: args.include_infrastructure,
    };
    let report = evaluate_suite(&results, opts)?;
    let text = report_render(&report, args.format.into());
    match &args.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn compendium_cmd(cmd: &CompendiumCommand) -> Result<u8> {
    let CompendiumCommand::Build {
        sources,
        out,
        provider,
        transcript,
        provider_config,
        backends,
        built_at,
    } = cmd;
    let text = std::fs::read_to_string(sources).map_err(|e| usage(format!("{}: {e}", sources.display())))?;
    let list = parse_sources(&text);
    if list.is_empty() {
        return Err(usage(format!("{} lists no sources", sources.display())));
    }
    let provider: Arc<dyn LlmProvider> = match provider {
        SummarizerArg::Extractive => Arc::new(extractive_provider()),
        SummarizerArg::Replay => replay_provider(transcript.as_deref())?,
        SummarizerArg::Http => read_provider_config(provider_config.as_deref())?.build()?,
    };
    let llm = LlmClient::new(provider);
    let options = BuildOptions {
        backends: backends.iter().map(|b| Backend::from(*b)).collect(),
        built_at: built_at.clone(),
        ..Default::default()
    };
    let base = sources.parent().unwrap_or(Path::new("."));
    let (c, report) = compendium::build(&list, base, &llm, &Catalog::builtin(), &options)?;
    c.save(out)?;
    for w in &report.source_warnings {
        warn!("{w}");
    }
    println!(
        "{} entries from {} segments ({} failed, {} retries) -> {}",
        c.entries.len(),
        report.segments,
        report.failures.len(),
        report.retries,
        out.display()
    );
    Ok(0)
}

fn hw_cmd(cmd: &HwCommand) -> Result<u8> {
    let HwCommand::Probe { backend, hw_file, out } = cmd;
    let hw = hardware((*backend).into(), hw_file.as_deref())?;
    let json = hw.to_json();
    match out {
        Some(p) => std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Run(a) => run_cmd(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compendium { command } => compendium_cmd(command),
        Command::Hw { command } => hw_cmd(command),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .or_else(|_| tracing_subscriber::EnvFilter::try_new(&cli.log))
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    expose_own_directory();

    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_INFRA)
            }
        }
    }
}
