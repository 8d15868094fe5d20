//! Unified metric schema shared by every stage of the loop.
//!
//! A [`Catalog`] lists every metric the system understands. Profiler
//! adapters may only emit metrics from the catalog, the Conductor may only
//! request extra metrics from it, and each backend has a fixed default
//! subset that is collected on every profiling run.

mod delta;
mod report;
mod timing;

pub use delta::{profile_delta, DeltaEntry, ProfileDelta};
pub use report::{ProfileReport, TOPDOWN_SUM_BAND};
pub use timing::{aggregate_samples, speedup, speedup_ratio, Statistic, TimingResult};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_CATALOG: &str = include_str!("../../data/catalog.json");

/// Current version of the `catalog.json` schema.
pub const CATALOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid metric id {0:?}: must be non-empty, lowercase and contain no whitespace")]
    InvalidId(String),
    #[error("unknown metric {0}")]
    UnknownMetric(MetricId),
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("backend mismatch: current report is {current}, baseline is {baseline}")]
    BackendMismatch { current: Backend, baseline: Backend },
    #[error("metric {metric} value {value} out of range: {reason}")]
    OutOfRange {
        metric: MetricId,
        value: f64,
        reason: &'static str,
    },
    #[error("top-down fractions sum to {sum:.2}%, outside [{lo}, {hi}]")]
    TopdownSum { sum: f64, lo: f64, hi: f64 },
    #[error("metric {metric} does not belong to backend {backend}")]
    WrongBackend { metric: MetricId, backend: Backend },
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
}

/// Execution target of a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Cpu,
    Gpu,
}

impl Backend {
    pub const ALL: [Backend; 2] = [Backend::Cpu, Backend::Gpu];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Cpu => "cpu",
            Backend::Gpu => "gpu",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpu" => Ok(Backend::Cpu),
            "gpu" => Ok(Backend::Gpu),
            other => Err(MetricsError::UnknownBackend(other.to_string())),
        }
    }
}

/// Backend scope of a metric definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricBackend {
    Cpu,
    Gpu,
    Any,
}

impl MetricBackend {
    pub fn includes(self, backend: Backend) -> bool {
        matches!(
            (self, backend),
            (MetricBackend::Any, _)
                | (MetricBackend::Cpu, Backend::Cpu)
                | (MetricBackend::Gpu, Backend::Gpu)
        )
    }
}

/// Lowercase dotted metric identifier such as `cpu.ipc`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MetricId(String);

impl MetricId {
    pub fn new(name: impl Into<String>) -> Result<Self, MetricsError> {
        let name = name.into();
        let valid = !name.is_empty()
            && !name.chars().any(char::is_whitespace)
            && !name.chars().any(|c| c.is_ascii_uppercase());
        if valid {
            Ok(MetricId(name))
        } else {
            Err(MetricsError::InvalidId(name))
        }
    }

    /// Shorthand for ids known to be valid at compile time.
    ///
    /// Panics on an invalid id.
    pub fn known(name: &str) -> Self {
        Self::new(name).expect("static metric id is valid")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Backend implied by the `cpu.` / `gpu.` prefix.
    pub fn backend(&self) -> MetricBackend {
        match self.0.split('.').next() {
            Some("cpu") => MetricBackend::Cpu,
            Some("gpu") => MetricBackend::Gpu,
            _ => MetricBackend::Any,
        }
    }

    /// Name without the backend prefix (`cpu.backend_bound` -> `backend_bound`).
    pub fn short_name(&self) -> &str {
        match self.0.split_once('.') {
            Some((_, rest)) => rest,
            None => &self.0,
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for MetricId {
    type Error = MetricsError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        MetricId::new(value)
    }
}

impl From<MetricId> for String {
    fn from(value: MetricId) -> Self {
        value.0
    }
}

impl FromStr for MetricId {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricId::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Ratio,
    Percent,
    Count,
    BytesPerSec,
    Nanoseconds,
    Cycles,
    Dimensionless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub name: MetricId,
    pub backend: MetricBackend,
    pub unit: Unit,
    pub direction: Direction,
    pub default_set: bool,
    /// Alternative spellings used by profilers and documentation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    pub doc: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    version: u32,
    metrics: Vec<MetricDescriptor>,
}

/// The set of metrics known to the system.
#[derive(Debug, Clone)]
pub struct Catalog {
    version: u32,
    descriptors: Vec<MetricDescriptor>,
    index: BTreeMap<MetricId, usize>,
    aliases: BTreeMap<String, usize>,
}

impl Catalog {
    /// The catalog shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_CATALOG).expect("builtin catalog is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let file: CatalogFile =
            serde_json::from_str(text).map_err(|e| MetricsError::InvalidCatalog(e.to_string()))?;
        if file.version != CATALOG_SCHEMA_VERSION {
            return Err(MetricsError::InvalidCatalog(format!(
                "unsupported catalog version {}",
                file.version
            )));
        }
        Self::from_descriptors(file.version, file.metrics)
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MetricsError::InvalidCatalog(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn from_descriptors(
        version: u32,
        descriptors: Vec<MetricDescriptor>,
    ) -> Result<Self, MetricsError> {
        let mut index = BTreeMap::new();
        let mut aliases = BTreeMap::new();
        for (i, d) in descriptors.iter().enumerate() {
            if index.insert(d.name.clone(), i).is_some() {
                return Err(MetricsError::InvalidCatalog(format!(
                    "duplicate metric {}",
                    d.name
                )));
            }
            if d.default_set && d.backend == MetricBackend::Any {
                return Err(MetricsError::InvalidCatalog(format!(
                    "default metric {} must belong to exactly one backend",
                    d.name
                )));
            }
            for alias in &d.aliases {
                // Same alias may legitimately exist on both backends only if
                // it is prefixed; a bare collision is a catalog bug.
                if let Some(prev) = aliases.insert(normalize_name(alias), i) {
                    if prev != i {
                        return Err(MetricsError::InvalidCatalog(format!(
                            "alias {alias:?} used by {} and {}",
                            descriptors[prev].name, d.name
                        )));
                    }
                }
            }
        }
        Ok(Catalog {
            version,
            descriptors,
            index,
            aliases,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn descriptors(&self) -> &[MetricDescriptor] {
        &self.descriptors
    }

    pub fn get(&self, id: &MetricId) -> Option<&MetricDescriptor> {
        self.index.get(id).map(|&i| &self.descriptors[i])
    }

    pub fn contains(&self, id: &MetricId) -> bool {
        self.index.contains_key(id)
    }

    /// Looks up a metric by id or alias, optionally restricted to a backend.
    ///
    /// Matching is case-insensitive and treats `-`, `_` and spaces alike.
    pub fn resolve(&self, name: &str, backend: Option<Backend>) -> Option<&MetricDescriptor> {
        let trimmed = name.trim();
        let hit = MetricId::new(trimmed.to_ascii_lowercase())
            .ok()
            .and_then(|id| self.get(&id))
            .or_else(|| {
                self.aliases
                    .get(&normalize_name(trimmed))
                    .map(|&i| &self.descriptors[i])
            })
            .or_else(|| {
                // Bare short names such as "occupancy" qualified by backend.
                backend.and_then(|b| {
                    let qualified = format!("{}.{}", b.as_str(), normalize_name(trimmed));
                    MetricId::new(qualified).ok().and_then(|id| self.get(&id))
                })
            })?;
        match backend {
            Some(b) if !hit.backend.includes(b) => None,
            _ => Some(hit),
        }
    }

    /// Fixed default metric list for a backend, in catalog order.
    pub fn default_metric_set(&self, backend: Backend) -> Vec<MetricId> {
        self.descriptors
            .iter()
            .filter(|d| d.default_set && d.backend.includes(backend))
            .map(|d| d.name.clone())
            .collect()
    }

    /// Order-preserving union of `defaults` and `extra`, defaults first.
    ///
    /// Every extra metric must exist in the catalog.
    pub fn merge_metric_requests(
        &self,
        defaults: &[MetricId],
        extra: &[MetricId],
    ) -> Result<Vec<MetricId>, MetricsError> {
        if let Some(unknown) = extra.iter().find(|m| !self.contains(m)) {
            return Err(MetricsError::UnknownMetric(unknown.clone()));
        }
        let mut seen = HashSet::new();
        Ok(defaults
            .iter()
            .chain(extra)
            .filter(|m| seen.insert((*m).clone()))
            .cloned()
            .collect())
    }

    pub fn to_json(&self) -> String {
        let file = CatalogFile {
            version: self.version,
            metrics: self.descriptors.clone(),
        };
        serde_json::to_string_pretty(&file).expect("catalog serializes")
    }
}

/// Free-function form of [`Catalog::default_metric_set`] accepting a string backend.
pub fn default_metric_set(catalog: &Catalog, backend: &str) -> Result<Vec<MetricId>, MetricsError> {
    let backend: Backend = backend.parse()?;
    Ok(catalog.default_metric_set(backend))
}

/// Canonical form used for alias matching.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_sep = false;
    for c in name.trim().chars() {
        if c == '-' || c == '_' || c.is_whitespace() {
            if !last_sep && !out.is_empty() {
                out.push('_');
            }
            last_sep = true;
        } else {
            out.extend(c.to_lowercase());
            last_sep = false;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}
