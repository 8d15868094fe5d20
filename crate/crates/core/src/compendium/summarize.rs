use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ingest::{tool_backend, DocSegment};
use super::{BuildOptions, Compendium, CompendiumError, MetricKnowledgeEntry};
use crate::llm::{parse_json_reply, ChatRequest, LlmClient, PromptTag};
use crate::metrics::Catalog;
use crate::prompt::render;

const SUMMARIZE_TEMPLATE: &str = include_str!("../../prompts/compendium_summarize.txt");
const MERGE_TEMPLATE: &str = include_str!("../../prompts/compendium_merge.txt");
const SYSTEM: &str = "You turn hardware profiler documentation into precise structured JSON.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizeOutcome {
    pub entries: Vec<MetricKnowledgeEntry>,
    /// Re-asks caused by malformed replies.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFailure {
    pub segment_id: String,
    pub source: String,
    pub reason: String,
    pub retries: u32,
}

#[derive(Debug, Deserialize)]
struct SummaryReply {
    entries: Vec<RawEntry>,
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    metric: String,
    description: String,
    #[serde(default)]
    mechanism: String,
    #[serde(default)]
    bottlenecks: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct MergeReply {
    description: String,
    #[serde(default)]
    mechanism: String,
    #[serde(default)]
    conflict: bool,
}

/// Catalog id for a documented name when it resolves, else the trimmed name.
fn canonical_metric(name: &str, tool: &str, catalog: &Catalog) -> String {
    let name = name.trim();
    let backend = tool_backend(tool);
    catalog
        .resolve(name, backend)
        .or_else(|| backend.and_then(|_| catalog.resolve(name, None)))
        .map(|d| d.name.to_string())
        .unwrap_or_else(|| name.to_string())
}

fn validate_summary(reply: SummaryReply, seg: &DocSegment, catalog: &Catalog) -> Result<Vec<MetricKnowledgeEntry>, String> {
    let mut out = Vec::with_capacity(reply.entries.len());
    for raw in reply.entries {
        let entry = MetricKnowledgeEntry {
            metric: canonical_metric(&raw.metric, &seg.tool, catalog),
            description: raw.description.trim().to_string(),
            mechanism: raw.mechanism.trim().to_string(),
            bottlenecks: raw.bottlenecks.iter().map(|b| b.trim().to_string()).collect(),
            provenance: vec![seg.segment_id.clone()],
            alternate_descriptions: Vec::new(),
            conflicting: false,
        };
        entry.validate()?;
        out.push(entry);
    }
    Ok(out)
}

/// Asks the LLM for structured entries describing one segment.
///
/// Replies that fail to parse or validate are re-requested up to
/// `max_retries` times with the validation error appended to the prompt.
pub fn summarize_segment(
    segment: &DocSegment,
    llm: &LlmClient,
    catalog: &Catalog,
    max_retries: u32,
) -> Result<SummarizeOutcome, SegmentFailure> {
    let vars = BTreeMap::from([
        ("tool", segment.tool.clone()),
        ("source", segment.source.clone()),
        ("segment_id", segment.segment_id.clone()),
        ("text", segment.text.clone()),
    ]);
    let base = render(SUMMARIZE_TEMPLATE, &vars).expect("summarize template variables are bound");
    let fail = |reason: String, retries: u32| SegmentFailure {
        segment_id: segment.segment_id.clone(),
        source: segment.source.clone(),
        reason,
        retries,
    };
    let mut prompt = base.clone();
    for attempt in 0..=max_retries {
        let req = ChatRequest::new(PromptTag::Compendium, SYSTEM, prompt.clone());
        let reply = llm.complete(&req).map_err(|e| fail(e.to_string(), attempt))?;
        let parsed = parse_json_reply::<SummaryReply>(&reply.text)
            .and_then(|r| validate_summary(r, segment, catalog));
        match parsed {
            Ok(entries) => return Ok(SummarizeOutcome { entries, retries: attempt }),
            Err(e) if attempt < max_retries => {
                tracing::debug!(segment = %segment.segment_id, error = %e, "malformed summary, retrying");
                prompt = format!(
                    "{base}\n\nYour previous reply was rejected: {e}\nReply again with only the JSON object."
                );
            }
            Err(e) => return Err(fail(format!("malformed output: {e}"), attempt)),
        }
    }
    unreachable!("loop returns on its final attempt")
}

fn push_unique(into: &mut Vec<String>, seen: &mut BTreeSet<String>, value: &str) {
    let key = value.trim().to_lowercase();
    if !key.is_empty() && seen.insert(key) {
        into.push(value.trim().to_string());
    }
}

fn merge_group(metric: &str, group: Vec<MetricKnowledgeEntry>, llm: &LlmClient, max_retries: u32) -> MetricKnowledgeEntry {
    let mut bottlenecks = Vec::new();
    let mut seen_b = BTreeSet::new();
    let mut provenance = Vec::new();
    let mut seen_p = BTreeSet::new();
    let mut descriptions = Vec::new();
    let mut seen_d = BTreeSet::new();
    for e in &group {
        e.bottlenecks.iter().for_each(|b| push_unique(&mut bottlenecks, &mut seen_b, b));
        for p in &e.provenance {
            if seen_p.insert(p.clone()) {
                provenance.push(p.clone());
            }
        }
        push_unique(&mut descriptions, &mut seen_d, &e.description);
    }
    let first_mechanism = group
        .iter()
        .map(|e| e.mechanism.as_str())
        .find(|m| !m.is_empty())
        .unwrap_or("")
        .to_string();

    let listing = serde_json::to_string_pretty(
        &group
            .iter()
            .map(|e| serde_json::json!({"description": e.description, "mechanism": e.mechanism}))
            .collect::<Vec<_>>(),
    )
    .expect("json");
    let vars = BTreeMap::from([("metric", metric.to_string()), ("entries", listing)]);
    let prompt = render(MERGE_TEMPLATE, &vars).expect("merge template variables are bound");

    let mut merged: Option<MergeReply> = None;
    for _ in 0..=max_retries {
        let req = ChatRequest::new(PromptTag::Compendium, SYSTEM, prompt.clone());
        match llm.complete(&req) {
            Ok(resp) => match parse_json_reply::<MergeReply>(&resp.text) {
                Ok(r) if !r.description.trim().is_empty() => {
                    merged = Some(r);
                    break;
                }
                Ok(_) => tracing::debug!(metric, "merge reply has empty description"),
                Err(e) => tracing::debug!(metric, error = %e, "malformed merge reply"),
            },
            Err(e) => {
                tracing::warn!(metric, error = %e, "merge request failed");
                break;
            }
        }
    }

    match merged {
        Some(r) => {
            let description = r.description.trim().to_string();
            let alternates: Vec<String> = if r.conflict {
                descriptions.into_iter().filter(|d| *d != description).collect()
            } else {
                Vec::new()
            };
            MetricKnowledgeEntry {
                metric: metric.to_string(),
                description,
                mechanism: if r.mechanism.trim().is_empty() { first_mechanism } else { r.mechanism.trim().to_string() },
                bottlenecks,
                provenance,
                conflicting: r.conflict,
                alternate_descriptions: alternates,
            }
        }
        None => {
            tracing::warn!(metric, "keeping unmerged descriptions");
            let mut it = descriptions.into_iter();
            let description = it.next().unwrap_or_default();
            let alternates: Vec<String> = it.collect();
            MetricKnowledgeEntry {
                metric: metric.to_string(),
                description,
                mechanism: first_mechanism,
                bottlenecks,
                provenance,
                conflicting: !alternates.is_empty(),
                alternate_descriptions: alternates,
            }
        }
    }
}

/// Merges per-segment entries into a compendium and checks that every
/// default metric of `options.backends` is covered.
///
/// Entries for the same metric are merged by the LLM; when it reports a
/// contradiction the original descriptions are kept and the entry flagged.
pub fn synthesize(
    intermediate: Vec<MetricKnowledgeEntry>,
    llm: &LlmClient,
    catalog: &Catalog,
    options: &BuildOptions,
) -> Result<Compendium, CompendiumError> {
    if intermediate.is_empty() {
        return Err(CompendiumError::NothingToSynthesize);
    }
    let mut groups: BTreeMap<String, Vec<MetricKnowledgeEntry>> = BTreeMap::new();
    for e in intermediate {
        groups.entry(e.metric.clone()).or_default().push(e);
    }
    let entries: Vec<MetricKnowledgeEntry> = groups
        .into_iter()
        .map(|(metric, mut group)| {
            if group.len() == 1 {
                let mut e = group.pop().unwrap();
                let (mut b, mut seen) = (Vec::new(), BTreeSet::new());
                e.bottlenecks.iter().for_each(|x| push_unique(&mut b, &mut seen, x));
                e.bottlenecks = b;
                e
            } else {
                merge_group(&metric, group, llm, options.max_retries)
            }
        })
        .collect();
    let built_at = options
        .built_at
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339());
    let compendium = Compendium::new(entries, built_at);
    let missing = compendium.missing_defaults(catalog, &options.backends);
    if !missing.is_empty() {
        return Err(CompendiumError::Coverage(missing));
    }
    Ok(compendium)
}
