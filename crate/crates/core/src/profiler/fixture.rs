use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::metrics::{Backend, Catalog, MetricId, ProfileReport};

use super::ncu::{ncu_parse, NcuAliasTable};
use super::perf::{perf_capabilities, perf_parse};
use super::{ProfileRequest, ProfilerAdapter, ProfilerError, RawOutput, WrappedCommand};

/// Which parser a fixture's stored output goes through.
#[derive(Clone)]
pub enum FixtureFormat {
    Perf,
    Ncu(NcuAliasTable),
}

/// Replays stored profiler output instead of launching a profiler.
///
/// For iteration `N` the adapter reads `iter<N>.raw` from its directory,
/// falling back to `default.raw`. The file is copied to the request's
/// `raw_path` exactly as a live profiler would have written it.
pub struct FixtureAdapter {
    dir: PathBuf,
    format: FixtureFormat,
    catalog: Arc<Catalog>,
    capabilities: BTreeSet<MetricId>,
}

impl FixtureAdapter {
    pub fn new(dir: impl Into<PathBuf>, format: FixtureFormat, catalog: Arc<Catalog>) -> Self {
        let capabilities = match &format {
            FixtureFormat::Perf => perf_capabilities(&catalog),
            FixtureFormat::Ncu(aliases) => aliases.metrics(),
        };
        FixtureAdapter {
            dir: dir.into(),
            format,
            catalog,
            capabilities,
        }
    }

    pub fn fixture_for(&self, iteration: u32) -> Result<PathBuf, ProfilerError> {
        let specific = self.dir.join(format!("iter{iteration}.raw"));
        if specific.is_file() {
            return Ok(specific);
        }
        let fallback = self.dir.join("default.raw");
        if fallback.is_file() {
            return Ok(fallback);
        }
        Err(ProfilerError::FixtureMissing(specific))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ProfilerAdapter for FixtureAdapter {
    fn name(&self) -> &str {
        "fixture"
    }

    fn backend(&self) -> Backend {
        match self.format {
            FixtureFormat::Perf => Backend::Cpu,
            FixtureFormat::Ncu(_) => Backend::Gpu,
        }
    }

    fn capabilities(&self) -> &BTreeSet<MetricId> {
        &self.capabilities
    }

    fn wrap(&self, request: &ProfileRequest) -> WrappedCommand {
        WrappedCommand {
            argv: request.command.clone(),
            output: RawOutput::File,
        }
    }

    fn parse(&self, raw: &str, requested: &[MetricId]) -> Result<ProfileReport, ProfilerError> {
        match &self.format {
            FixtureFormat::Perf => perf_parse(raw, requested, &self.catalog),
            FixtureFormat::Ncu(aliases) => ncu_parse(raw, requested, &self.catalog, aliases),
        }
    }

    fn run(&self, request: &ProfileRequest) -> Result<ProfileReport, ProfilerError> {
        let source = self.fixture_for(request.iteration)?;
        let raw = fs::read_to_string(&source).map_err(|e| ProfilerError::io(&source, e))?;
        if let Some(parent) = request.raw_path.parent() {
            fs::create_dir_all(parent).map_err(|e| ProfilerError::io(parent, e))?;
        }
        fs::write(&request.raw_path, &raw).map_err(|e| ProfilerError::io(&request.raw_path, e))?;
        self.parse(&raw, &request.metrics)
    }
}
