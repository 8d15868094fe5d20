//! Offline knowledge base of profiler metric semantics.
//!
//! Built in two LLM stages: every documentation segment is summarized into
//! structured [`MetricKnowledgeEntry`] records, then records naming the same
//! metric are merged. The result is immutable at run time and consulted by
//! the Conductor through [`Compendium::lookup`].

mod ingest;
mod lookup;
mod offline;
mod summarize;

pub use ingest::{chunk, ingest, parse_sources, strip_html, DocSegment, Ingested, SourceRef, DEFAULT_SEGMENT_BUDGET};
pub use lookup::{tokenize, LexicalScorer, RelevanceScorer};
pub use offline::extractive_provider;
pub use summarize::{summarize_segment, synthesize, SegmentFailure, SummarizeOutcome};

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::{sha256_hex, write_atomic};
use crate::llm::LlmClient;
use crate::metrics::{Backend, Catalog};

pub const COMPENDIUM_SCHEMA_VERSION: u32 = 1;

const BUNDLED: &str = include_str!("../../data/compendium.json");

#[derive(Debug, Error)]
pub enum CompendiumError {
    #[error("no documentation segments ingested ({} source error(s))", .0.len())]
    NoSegments(Vec<String>),
    #[error("nothing to synthesize: every segment summary was empty or failed")]
    NothingToSynthesize,
    #[error("compendium misses default metrics: {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error("unsupported compendium schema version {0}")]
    SchemaVersion(u32),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricKnowledgeEntry {
    /// Catalog id when the name resolves, otherwise the name as documented.
    pub metric: String,
    pub description: String,
    #[serde(default)]
    pub mechanism: String,
    pub bottlenecks: Vec<String>,
    /// Ids of the segments this entry was distilled from.
    pub provenance: Vec<String>,
    /// Other descriptions kept when merged summaries disagreed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternate_descriptions: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub conflicting: bool,
}

impl MetricKnowledgeEntry {
    pub fn validate(&self) -> Result<(), String> {
        if self.metric.trim().is_empty() {
            return Err("metric name is empty".into());
        }
        if self.description.trim().is_empty() {
            return Err(format!("{}: description is empty", self.metric));
        }
        if self.bottlenecks.iter().any(|b| b.trim().is_empty()) {
            return Err(format!("{}: empty bottleneck string", self.metric));
        }
        if self.provenance.is_empty() {
            return Err(format!("{}: provenance is empty", self.metric));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compendium {
    pub schema_version: u32,
    /// RFC 3339 build time; excluded from `content_hash`.
    pub built_at: String,
    pub content_hash: String,
    /// Sorted by metric name.
    pub entries: Vec<MetricKnowledgeEntry>,
}

impl Compendium {
    pub fn new(mut entries: Vec<MetricKnowledgeEntry>, built_at: String) -> Self {
        entries.sort_by(|a, b| a.metric.cmp(&b.metric));
        let content_hash = Self::hash_entries(&entries);
        Compendium {
            schema_version: COMPENDIUM_SCHEMA_VERSION,
            built_at,
            content_hash,
            entries,
        }
    }

    fn hash_entries(entries: &[MetricKnowledgeEntry]) -> String {
        let body = serde_json::to_vec(entries).expect("entries serialize");
        sha256_hex(&[&COMPENDIUM_SCHEMA_VERSION.to_le_bytes(), &body])
    }

    /// The compendium shipped with the crate, built from the bundled
    /// documentation snapshots.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled compendium parses")
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), String::new())
    }

    pub fn get(&self, metric: &str) -> Option<&MetricKnowledgeEntry> {
        self.entries.iter().find(|e| e.metric == metric)
    }

    pub fn lookup(&self, query: &str, k: usize) -> Vec<&MetricKnowledgeEntry> {
        self.lookup_with(&LexicalScorer::default(), query, k)
    }

    /// Top `k` entries with a positive score; ties broken by metric name.
    pub fn lookup_with(&self, scorer: &dyn RelevanceScorer, query: &str, k: usize) -> Vec<&MetricKnowledgeEntry> {
        let mut scored: Vec<(f64, &MetricKnowledgeEntry)> = self
            .entries
            .iter()
            .map(|e| (scorer.score(e, query), e))
            .filter(|(s, _)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.metric.cmp(&b.1.metric)));
        scored.into_iter().take(k).map(|(_, e)| e).collect()
    }

    /// Default metrics of `backends` without an entry.
    pub fn missing_defaults(&self, catalog: &Catalog, backends: &[Backend]) -> Vec<String> {
        let have: BTreeSet<&str> = self.entries.iter().map(|e| e.metric.as_str()).collect();
        backends
            .iter()
            .flat_map(|b| catalog.default_metric_set(*b))
            .filter(|m| !have.contains(m.as_str()))
            .map(|m| m.to_string())
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("compendium serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CompendiumError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|source| CompendiumError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CompendiumError> {
        let text = std::fs::read_to_string(path).map_err(|source| CompendiumError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let c = Self::from_json(&text).map_err(|source| CompendiumError::Json {
            path: path.display().to_string(),
            source,
        })?;
        if c.schema_version != COMPENDIUM_SCHEMA_VERSION {
            return Err(CompendiumError::SchemaVersion(c.schema_version));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub segment_budget: usize,
    /// Extra attempts after a malformed LLM reply.
    pub max_retries: u32,
    pub parallelism: usize,
    /// Backends whose default metrics must be covered.
    pub backends: Vec<Backend>,
    pub built_at: Option<String>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            segment_budget: DEFAULT_SEGMENT_BUDGET,
            max_retries: 2,
            parallelism: 4,
            backends: Backend::ALL.to_vec(),
            built_at: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub segments: usize,
    pub entries_before_merge: usize,
    pub retries: u32,
    pub source_warnings: Vec<String>,
    pub failures: Vec<SegmentFailure>,
}

/// Full pipeline: ingest, summarize every segment, merge, check coverage.
pub fn build(
    sources: &[SourceRef],
    base_dir: &Path,
    llm: &LlmClient,
    catalog: &Catalog,
    options: &BuildOptions,
) -> Result<(Compendium, BuildReport), CompendiumError> {
    let ingested = ingest(sources, base_dir, options.segment_budget);
    if ingested.segments.is_empty() {
        return Err(CompendiumError::NoSegments(ingested.warnings));
    }
    let mut report = BuildReport {
        segments: ingested.segments.len(),
        source_warnings: ingested.warnings.clone(),
        ..Default::default()
    };

    let outcomes = summarize_all(&ingested.segments, llm, catalog, options);
    let mut intermediate = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(o) => {
                report.retries += o.retries;
                intermediate.extend(o.entries);
            }
            Err(f) => {
                tracing::warn!(segment = %f.segment_id, reason = %f.reason, "segment summary failed");
                report.retries += f.retries;
                report.failures.push(f);
            }
        }
    }
    report.entries_before_merge = intermediate.len();
    let compendium = synthesize(intermediate, llm, catalog, options)?;
    Ok((compendium, report))
}

/// Summaries in segment order, computed on up to `parallelism` threads.
fn summarize_all(
    segments: &[DocSegment],
    llm: &LlmClient,
    catalog: &Catalog,
    options: &BuildOptions,
) -> Vec<Result<SummarizeOutcome, SegmentFailure>> {
    let workers = options.parallelism.max(1).min(segments.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<SummarizeOutcome, SegmentFailure>>>> =
        segments.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(seg) = segments.get(i) else { break };
                let r = summarize_segment(seg, llm, catalog, options.max_retries);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every segment summarized"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(metric: &str, desc: &str, bottlenecks: &[&str]) -> MetricKnowledgeEntry {
        MetricKnowledgeEntry {
            metric: metric.into(),
            description: desc.into(),
            mechanism: String::new(),
            bottlenecks: bottlenecks.iter().map(|s| s.to_string()).collect(),
            provenance: vec!["seg-1".into()],
            alternate_descriptions: vec![],
            conflicting: false,
        }
    }

    #[test]
    fn hash_ignores_build_time() {
        let a = Compendium::new(vec![entry("cpu.ipc", "instructions per cycle", &[])], "t1".into());
        let b = Compendium::new(vec![entry("cpu.ipc", "instructions per cycle", &[])], "t2".into());
        assert_eq!(a.content_hash, b.content_hash);
        let c = Compendium::new(vec![entry("cpu.ipc", "changed", &[])], "t1".into());
        assert_ne!(a.content_hash, c.content_hash);
    }

    #[test]
    fn lookup_ranks_and_breaks_ties() {
        let c = Compendium::new(
            vec![
                entry("gpu.sm_throughput", "SM busy fraction", &["compute bound"]),
                entry("gpu.occupancy", "active warps relative to the maximum", &["latency hiding"]),
                entry("cpu.b", "same words", &[]),
                entry("cpu.a", "same words", &[]),
            ],
            String::new(),
        );
        assert_eq!(c.lookup("occupancy", 1)[0].metric, "gpu.occupancy");
        assert!(c.lookup("zebra", 3).is_empty());
        let tie: Vec<_> = c.lookup("words", 2).iter().map(|e| e.metric.as_str()).collect();
        assert_eq!(tie, ["cpu.a", "cpu.b"]);
        assert!(Compendium::empty().lookup("anything", 5).is_empty());
    }

    #[test]
    fn coverage_lists_missing_defaults() {
        let cat = Catalog::builtin();
        let c = Compendium::new(vec![entry("gpu.kernel_time", "d", &[])], String::new());
        let missing = c.missing_defaults(&cat, &[Backend::Gpu]);
        assert!(missing.contains(&"gpu.occupancy".to_string()));
        assert!(!missing.contains(&"gpu.kernel_time".to_string()));
    }

    #[test]
    fn entry_validation() {
        let mut e = entry("cpu.ipc", "d", &["x"]);
        e.validate().unwrap();
        e.bottlenecks.push(" ".into());
        assert!(e.validate().is_err());
        let mut e = entry("cpu.ipc", "d", &[]);
        e.provenance.clear();
        assert!(e.validate().is_err());
    }
}
