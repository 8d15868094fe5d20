//! Profiler adapters.
//!
//! Each adapter knows how to wrap a runner command with its profiler, where
//! the profiler leaves its output, and how to turn that output into a
//! [`ProfileReport`]. Raw output is always written to disk before parsing.
//!
//! Adding a profiler means implementing [`ProfilerAdapter`] and registering
//! it in an [`AdapterRegistry`]; nothing else in the loop changes.

mod fixture;
mod ncu;
mod perf;

pub use fixture::{FixtureAdapter, FixtureFormat};
pub use ncu::{ncu_parse, NcuAdapter, NcuAliasTable};
pub use perf::{perf_parse, PerfAdapter};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::metrics::{Backend, MetricId, MetricsError, ProfileReport};
use crate::process::{self, ExitKind, ProcessSpec};

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("line {line}: cannot parse {text:?}: {reason}")]
    Parse {
        line: usize,
        text: String,
        reason: String,
    },
    #[error("profiler output contained none of the requested metrics")]
    EmptyProfile,
    #[error("no NCU column alias maps to {metric}{}", expected_column.as_ref().map(|c| format!(" (expected column {c:?})")).unwrap_or_default())]
    UnknownAlias {
        metric: MetricId,
        expected_column: Option<String>,
    },
    #[error("adapter {adapter} cannot collect {metric}")]
    Dispatch { adapter: String, metric: MetricId },
    #[error("adapter {adapter} emitted undeclared metric {metric}")]
    UndeclaredMetric { adapter: String, metric: MetricId },
    #[error("profiling timed out after {0:?}")]
    Timeout(Duration),
    #[error("profiler failed ({exit}): {stderr}")]
    ProfilerFailure { exit: String, stderr: String },
    #[error("fixture not found: {0}")]
    FixtureMissing(PathBuf),
    #[error("invalid alias table: {0}")]
    AliasTable(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ProfilerError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ProfilerError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One profiling run of an already-verified candidate.
#[derive(Debug, Clone)]
pub struct ProfileRequest {
    /// Runner command to measure; the adapter prepends its own argv.
    pub command: Vec<String>,
    pub metrics: Vec<MetricId>,
    pub timeout: Duration,
    pub workdir: PathBuf,
    /// Where the verbatim profiler output is stored.
    pub raw_path: PathBuf,
    pub env: BTreeMap<String, String>,
    pub iteration: u32,
}

/// Where a wrapped profiler run leaves its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawOutput {
    /// The profiler writes directly to the request's `raw_path`.
    File,
    Stdout,
    Stderr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedCommand {
    pub argv: Vec<String>,
    pub output: RawOutput,
}

pub trait ProfilerAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn backend(&self) -> Backend;

    /// Every metric this adapter may emit.
    fn capabilities(&self) -> &BTreeSet<MetricId>;

    /// `<profiler-argv> -- <runner-argv>` for the request.
    fn wrap(&self, request: &ProfileRequest) -> WrappedCommand;

    fn parse(&self, raw: &str, requested: &[MetricId]) -> Result<ProfileReport, ProfilerError>;

    /// Produces the raw output and parses it. The default launches the
    /// wrapped command; replaying adapters override this.
    fn run(&self, request: &ProfileRequest) -> Result<ProfileReport, ProfilerError> {
        let raw = run_wrapped(&self.wrap(request), request)?;
        self.parse(&raw, &request.metrics)
    }
}

/// Launches `wrapped`, stores its raw output at `request.raw_path` and
/// returns that output.
pub fn run_wrapped(
    wrapped: &WrappedCommand,
    request: &ProfileRequest,
) -> Result<String, ProfilerError> {
    if let Some(parent) = request.raw_path.parent() {
        fs::create_dir_all(parent).map_err(|e| ProfilerError::io(parent, e))?;
    }
    let spec = ProcessSpec::new(wrapped.argv.clone(), &request.workdir, request.timeout)
        .env(&request.env);
    let out = process::run(&spec).map_err(|e| ProfilerError::ProfilerFailure {
        exit: "spawn failed".into(),
        stderr: format!("{}: {e}", wrapped.argv.first().map(String::as_str).unwrap_or("")),
    })?;
    match wrapped.output {
        RawOutput::File => {}
        RawOutput::Stdout => write_raw(&request.raw_path, &out.stdout)?,
        RawOutput::Stderr => write_raw(&request.raw_path, &out.stderr)?,
    }
    match out.exit {
        ExitKind::TimedOut => return Err(ProfilerError::Timeout(request.timeout)),
        e if !e.success() => {
            return Err(ProfilerError::ProfilerFailure {
                exit: e.describe(request.timeout),
                stderr: out.stderr_lossy(),
            })
        }
        _ => {}
    }
    fs::read_to_string(&request.raw_path).map_err(|e| ProfilerError::io(&request.raw_path, e))
}

fn write_raw(path: &Path, bytes: &[u8]) -> Result<(), ProfilerError> {
    fs::write(path, bytes).map_err(|e| ProfilerError::io(path, e))
}

/// Runs `request` through `adapter`, enforcing the capability contract on
/// both sides of the call.
pub fn collect(
    adapter: &dyn ProfilerAdapter,
    request: &ProfileRequest,
) -> Result<ProfileReport, ProfilerError> {
    let caps = adapter.capabilities();
    if let Some(m) = request.metrics.iter().find(|m| !caps.contains(*m)) {
        return Err(ProfilerError::Dispatch {
            adapter: adapter.name().to_string(),
            metric: m.clone(),
        });
    }
    let report = adapter.run(request)?;
    if let Some(m) = report.values().keys().find(|m| !caps.contains(*m)) {
        return Err(ProfilerError::UndeclaredMetric {
            adapter: adapter.name().to_string(),
            metric: m.clone(),
        });
    }
    Ok(report
        .with_iteration(request.iteration)
        .with_raw_artifact(&request.raw_path))
}

/// Named collection of adapters.
#[derive(Default, Clone)]
pub struct AdapterRegistry {
    adapters: BTreeMap<String, Arc<dyn ProfilerAdapter>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: Arc<dyn ProfilerAdapter>) {
        self.adapters.insert(adapter.name().to_string(), adapter);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn ProfilerAdapter>> {
        self.adapters.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    /// First registered adapter for a backend, by name order.
    pub fn for_backend(&self, backend: Backend) -> Option<Arc<dyn ProfilerAdapter>> {
        self.adapters
            .values()
            .find(|a| a.backend() == backend)
            .cloned()
    }
}

/// Shared helper: keep only requested metrics, record the missing ones as
/// warnings and fail if nothing remains.
pub(crate) fn select_requested(
    mut report: ProfileReport,
    requested: &[MetricId],
    mut warnings: BTreeSet<String>,
) -> Result<ProfileReport, ProfilerError> {
    let wanted: BTreeSet<&MetricId> = requested.iter().collect();
    for m in requested {
        if report.value(m).is_none() && !warnings.iter().any(|w| w.starts_with(m.as_str())) {
            warnings.insert(format!("{m}: not present in profiler output"));
        }
    }
    report.retain(|k| wanted.contains(k));
    if report.is_empty() {
        return Err(ProfilerError::EmptyProfile);
    }
    Ok(report.with_warnings(warnings))
}
