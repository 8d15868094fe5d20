use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::rules::fmt_num;
use super::{verdict_for, BottleneckLabel, HardwareSpec, RuleTable, Verdict};
use crate::compendium::{Compendium, MetricKnowledgeEntry};
use crate::llm::{parse_json_reply, ChatRequest, LlmClient, LlmError, PromptTag};
use crate::metrics::{profile_delta, Backend, Catalog, DeltaEntry, MetricId, ProfileReport};
use crate::orchestrator::{BestRecord, IterationRecord};
use crate::prompt::render;
use crate::verifier::{Category, VerificationOutcome, VerifyStatus};

const SYSTEM_TEMPLATE: &str = include_str!("../../prompts/conductor_system.txt");
const USER_TEMPLATE: &str = include_str!("../../prompts/conductor.txt");

/// Metric-doc entries embedded in a Conductor prompt.
pub const DEFAULT_DOC_K: usize = 6;
pub const DEFAULT_CONDUCTOR_RETRIES: u32 = 2;

const EXCERPT_LINES: usize = 40;
const EXCERPT_CHARS: usize = 4000;
const ABSENT: &str = "absent";

/// One line of the iteration summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    /// `None` when the Coder produced no code.
    pub status: Option<VerifyStatus>,
    pub speedup: Option<f64>,
    pub verdict: Option<Verdict>,
    pub promoted: bool,
}

impl HistoryEntry {
    pub fn from_record(r: &IterationRecord) -> Self {
        HistoryEntry {
            iteration: r.iteration,
            status: r.verification.as_ref().map(|v| v.status),
            speedup: r.speedup(),
            verdict: r.verdict(),
            promoted: r.promoted_to_best,
        }
    }
}

/// Everything the Conductor sees for one attempt.
///
/// `best_record` is the best as it stood before this attempt, so the
/// verdict compares against it.
#[derive(Debug, Clone)]
pub struct ConductorContext {
    pub task_id: String,
    pub category: Category,
    pub backend: Backend,
    pub language: String,
    pub iteration: u32,
    pub current_code: String,
    pub verifier_feedback: VerificationOutcome,
    pub metric_docs: Vec<MetricKnowledgeEntry>,
    pub current_profile: Option<ProfileReport>,
    pub best_record: Option<BestRecord>,
    pub hardware_spec: HardwareSpec,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub verdict: Verdict,
    pub bottlenecks: Vec<BottleneckLabel>,
    /// Ordered directives for the Coder.
    pub hints: Vec<String>,
    pub extra_metrics: Vec<MetricId>,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_excerpt: Option<String>,
    /// The LLM reply was unusable and the rule labels were used alone.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct Reply {
    #[serde(default, alias = "analysis")]
    rationale: String,
    #[serde(default, alias = "suggestions", alias = "directives")]
    hints: Vec<String>,
    #[serde(default)]
    extra_metrics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Conductor {
    pub catalog: Catalog,
    pub rules: RuleTable,
    /// Re-asks after an unusable reply.
    pub max_retries: u32,
}

impl Default for Conductor {
    fn default() -> Self {
        Conductor::new(Catalog::builtin(), RuleTable::builtin())
    }
}

impl Conductor {
    pub fn new(catalog: Catalog, rules: RuleTable) -> Self {
        Conductor {
            catalog,
            rules,
            max_retries: DEFAULT_CONDUCTOR_RETRIES,
        }
    }

    /// Rule-based labels; only a correct, profiled attempt has any.
    pub fn labels(&self, ctx: &ConductorContext) -> Vec<BottleneckLabel> {
        match (&ctx.current_profile, ctx.verifier_feedback.is_correct()) {
            (Some(p), true) => self.rules.classify(p, &ctx.hardware_spec, Some(ctx.category)),
            _ => Vec::new(),
        }
    }

    /// Assembles the prompt. The five context components always appear
    /// in the same order, with `absent` standing in for missing ones.
    pub fn request(&self, ctx: &ConductorContext, labels: &[BottleneckLabel], verdict: Verdict) -> ChatRequest {
        let lang = &ctx.language;
        let mut vars: BTreeMap<&str, String> = BTreeMap::new();
        vars.insert("task_id", ctx.task_id.clone());
        vars.insert("category", ctx.category.as_str().into());
        vars.insert("backend", ctx.backend.to_string());
        vars.insert("iteration", ctx.iteration.to_string());
        vars.insert("verdict", verdict_line(verdict, ctx));
        vars.insert("current_code", fenced(lang, &ctx.current_code));
        vars.insert("verifier_feedback", feedback_section(&ctx.verifier_feedback));
        vars.insert("metric_docs", docs_section(&ctx.metric_docs));
        vars.insert("profile", profile_section(ctx, labels));
        vars.insert("best", best_section(lang, ctx.best_record.as_ref()));
        vars.insert("hardware", ctx.hardware_spec.render());
        vars.insert("history", history_section(&ctx.history));
        let available: Vec<&str> = self
            .catalog
            .descriptors()
            .iter()
            .filter(|d| d.backend.includes(ctx.backend))
            .map(|d| d.name.as_str())
            .collect();
        vars.insert("available_metrics", available.join(", "));
        let user = render(USER_TEMPLATE, &vars).expect("conductor template variables are bound");
        ChatRequest::new(PromptTag::Conductor, SYSTEM_TEMPLATE.trim_end(), user).for_task(&ctx.task_id)
    }

    /// Runs one Conductor round. Provider failures propagate; unusable
    /// replies fall back to the rule labels after `max_retries` re-asks.
    pub fn conduct(&self, ctx: &ConductorContext, llm: &LlmClient) -> Result<Diagnosis, LlmError> {
        let verdict = verdict_for(&ctx.verifier_feedback, ctx.best_record.as_ref());
        let labels = self.labels(ctx);
        let excerpt = (!ctx.verifier_feedback.is_correct()).then(|| error_excerpt(&ctx.verifier_feedback.logs));
        let base = self.request(ctx, &labels, verdict);
        let mut request = base.clone();
        let mut reason = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                request.user_prompt = format!(
                    "{}\n\nYour previous reply could not be used: {reason}. Reply with the JSON object only.",
                    base.user_prompt
                );
            }
            let response = llm.complete(&request)?;
            match parse_json_reply::<Reply>(&response.text) {
                Ok(reply) => {
                    let hints: Vec<String> = reply
                        .hints
                        .into_iter()
                        .map(|h| h.trim().to_string())
                        .filter(|h| !h.is_empty())
                        .collect();
                    if hints.is_empty() {
                        reason = "the reply contains no hints".into();
                        continue;
                    }
                    let (extra_metrics, warnings) = self.filter_metrics(&reply.extra_metrics, ctx.backend);
                    return Ok(Diagnosis {
                        verdict,
                        bottlenecks: labels,
                        hints,
                        extra_metrics,
                        rationale: reply.rationale.trim().to_string(),
                        error_excerpt: excerpt,
                        fallback: false,
                        warnings,
                    });
                }
                Err(e) => reason = e,
            }
            tracing::warn!(task = %ctx.task_id, iteration = ctx.iteration, %reason, "unusable conductor reply");
        }
        Ok(fallback(verdict, labels, excerpt, &ctx.verifier_feedback, reason))
    }

    fn filter_metrics(&self, requested: &[String], backend: Backend) -> (Vec<MetricId>, Vec<String>) {
        let mut ids: Vec<MetricId> = Vec::new();
        let mut warnings = Vec::new();
        for name in requested {
            match self.catalog.resolve(name, Some(backend)) {
                Some(d) if d.backend.includes(backend) => {
                    if !ids.contains(&d.name) {
                        ids.push(d.name.clone());
                    }
                }
                _ => {
                    tracing::warn!(metric = %name, "conductor requested an unknown metric; ignored");
                    warnings.push(format!("unknown metric {name:?} requested; ignored"));
                }
            }
        }
        (ids, warnings)
    }
}

/// [`Conductor::conduct`] with the builtin catalog and rule table.
pub fn conduct(ctx: &ConductorContext, llm: &LlmClient) -> Result<Diagnosis, LlmError> {
    Conductor::default().conduct(ctx, llm)
}

fn fallback(
    verdict: Verdict,
    labels: Vec<BottleneckLabel>,
    excerpt: Option<String>,
    feedback: &VerificationOutcome,
    reason: String,
) -> Diagnosis {
    let mut hints = Vec::new();
    if verdict == Verdict::CorrectnessFailure {
        hints.push(format!(
            "Fix the {} reported by the verifier before optimizing further; the error excerpt shows where it fails.",
            feedback.status
        ));
    } else if labels.is_empty() {
        hints.push("Keep the best kernel's structure and try one targeted optimization at a time.".into());
    } else {
        for l in &labels {
            hints.push(format!("Reduce the {} bottleneck: {}.", l.label, l.describe()));
        }
    }
    Diagnosis {
        verdict,
        bottlenecks: labels,
        hints,
        extra_metrics: Vec::new(),
        rationale: format!("conductor reply unusable ({reason}); using rule-based labels only"),
        error_excerpt: excerpt,
        fallback: true,
        warnings: Vec::new(),
    }
}

/// The part of a failure log worth showing: from the first line that
/// looks like an error, otherwise the tail.
pub fn error_excerpt(logs: &str) -> String {
    let lines: Vec<&str> = logs.lines().collect();
    let is_error = |l: &&str| {
        let l = l.to_ascii_lowercase();
        ["error", "panic", "fatal", "exception", "mismatch", "signal", "exit status"]
            .iter()
            .any(|k| l.contains(k))
    };
    let start = match lines.iter().position(is_error) {
        Some(i) => i.saturating_sub(2),
        None => lines.len().saturating_sub(EXCERPT_LINES),
    };
    let mut out = lines[start..lines.len().min(start + EXCERPT_LINES)].join("\n");
    if out.len() > EXCERPT_CHARS {
        let mut cut = EXCERPT_CHARS;
        while !out.is_char_boundary(cut) {
            cut -= 1;
        }
        out.truncate(cut);
        out.push_str("\n[...]");
    }
    out
}

/// Compendium entries for the prompt: evidence metrics of the fired labels
/// first, then lookups on the label names, then profiled metrics, capped at `k`.
pub fn select_metric_docs(
    compendium: &Compendium,
    labels: &[BottleneckLabel],
    profile: Option<&ProfileReport>,
    k: usize,
) -> Vec<MetricKnowledgeEntry> {
    let mut out: Vec<MetricKnowledgeEntry> = Vec::new();
    let push = |e: &MetricKnowledgeEntry, out: &mut Vec<MetricKnowledgeEntry>| {
        if out.len() < k && !out.iter().any(|o| o.metric == e.metric) {
            out.push(e.clone());
        }
    };
    for l in labels {
        for ev in &l.evidence {
            if let Some(e) = compendium.get(ev.metric.as_str()) {
                push(e, &mut out);
            }
        }
    }
    for l in labels {
        for e in compendium.lookup(&l.label.query(), 2) {
            push(e, &mut out);
        }
    }
    if let Some(p) = profile {
        for id in p.values().keys() {
            if let Some(e) = compendium.get(id.as_str()) {
                push(e, &mut out);
            }
        }
    }
    out
}

fn fenced(lang: &str, code: &str) -> String {
    format!("```{lang}\n{}\n```", code.trim_end())
}

fn verdict_line(verdict: Verdict, ctx: &ConductorContext) -> String {
    let cur = ctx.verifier_feedback.speedup();
    let best = ctx.best_record.as_ref().map(|b| b.speedup);
    match (verdict, cur, best) {
        (Verdict::Improvement, Some(c), Some(b)) => format!(
            "improvement: speedup rose from {}x to {}x; the current code becomes the new historical best",
            fmt_num(b),
            fmt_num(c)
        ),
        (Verdict::Regression, Some(c), Some(b)) => format!(
            "regression: speedup {}x does not beat the best {}x; the best code is kept",
            fmt_num(c),
            fmt_num(b)
        ),
        (Verdict::FirstMeasurement, Some(c), _) => {
            format!("first_measurement: speedup {}x; the current code becomes the historical best", fmt_num(c))
        }
        (v, ..) => v.to_string(),
    }
}

fn feedback_section(v: &VerificationOutcome) -> String {
    let mut out = String::new();
    if v.is_correct() {
        let _ = write!(out, "Status: correct. Output matches the reference");
        if let (Some(a), Some(r)) = (v.max_abs_err, v.max_rel_err) {
            let _ = write!(out, " (max abs err {}, max rel err {})", fmt_num(a), fmt_num(r));
        }
        out.push_str(".\n");
        if let Some(t) = &v.timing {
            let stat = serde_json::to_value(t.statistic).ok().and_then(|s| s.as_str().map(String::from));
            let _ = writeln!(
                out,
                "Timing ({} of {} runs after {} warmups): reference {} ns, candidate {} ns, speedup {}x.",
                stat.unwrap_or_default(),
                t.timed_runs,
                t.warmup_runs,
                fmt_num(t.t_reference_ns),
                fmt_num(t.t_candidate_ns),
                v.speedup().map(fmt_num).unwrap_or_else(|| "n/a".into())
            );
        }
        out.push_str("No errors to remedy.");
    } else {
        let _ = writeln!(
            out,
            "Status: {}. The candidate failed verification. Name the most likely cause and a concrete remedy.",
            v.status
        );
        let _ = write!(out, "Log excerpt:\n```\n{}\n```", error_excerpt(&v.logs));
    }
    out
}

fn docs_section(docs: &[MetricKnowledgeEntry]) -> String {
    if docs.is_empty() {
        return ABSENT.into();
    }
    let mut out = String::new();
    for d in docs {
        let _ = write!(out, "- {}: {}", d.metric, d.description.trim());
        if !d.mechanism.trim().is_empty() {
            let _ = write!(out, " Measurement: {}", d.mechanism.trim());
        }
        if !d.bottlenecks.is_empty() {
            let _ = write!(out, " Typical bottlenecks: {}.", d.bottlenecks.join("; "));
        }
        out.push('\n');
    }
    out.trim_end().to_string()
}

fn metric_lines(p: &ProfileReport, out: &mut String) {
    for (id, v) in p.values() {
        let _ = writeln!(out, "  {id} = {}", fmt_num(*v));
    }
    for w in &p.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
}

fn profile_section(ctx: &ConductorContext, labels: &[BottleneckLabel]) -> String {
    let Some(p) = &ctx.current_profile else {
        return format!("{ABSENT} (profiling runs only after a correct verification)");
    };
    let mut out = String::new();
    if let Some(s) = ctx.verifier_feedback.speedup() {
        let _ = writeln!(out, "Speedup: {}x over the reference", fmt_num(s));
    }
    out.push_str("Metrics:\n");
    metric_lines(p, &mut out);
    out.push_str("Rule-based bottleneck labels:\n");
    if labels.is_empty() {
        out.push_str("  none\n");
    }
    for l in labels {
        let _ = writeln!(out, "  - {}", l.describe());
    }
    if let Some(best) = &ctx.best_record {
        if let Some(bp) = &best.profile {
            if let Ok(delta) = profile_delta(p, bp) {
                let _ = writeln!(out, "Change vs best (iteration {}):", best.achieved_at_iteration);
                for (id, d) in &delta {
                    let line = match d {
                        DeltaEntry::Both { current, baseline, delta } => format!(
                            "{} vs {} ({}{})",
                            fmt_num(*current),
                            fmt_num(*baseline),
                            if *delta >= 0.0 { "+" } else { "" },
                            fmt_num(*delta)
                        ),
                        DeltaEntry::OnlyCurrent { value } => format!("{} (not measured for best)", fmt_num(*value)),
                        DeltaEntry::OnlyBaseline { value } => format!("not measured (best {})", fmt_num(*value)),
                    };
                    let _ = writeln!(out, "  {id}: {line}");
                }
            }
        }
    }
    out.trim_end().to_string()
}

fn best_section(lang: &str, best: Option<&BestRecord>) -> String {
    let Some(b) = best else {
        return format!("{ABSENT} (no correct candidate yet)");
    };
    let mut out = format!(
        "Iteration {}, speedup {}x.\n{}\nProfile:\n",
        b.achieved_at_iteration,
        fmt_num(b.speedup),
        fenced(lang, &b.candidate.source)
    );
    match &b.profile {
        Some(p) => metric_lines(p, &mut out),
        None => out.push_str("  absent\n"),
    }
    out.trim_end().to_string()
}

fn history_section(history: &[HistoryEntry]) -> String {
    if history.is_empty() {
        return format!("{ABSENT} (first attempt)");
    }
    let mut out = String::from("iter | status | speedup | verdict | best\n");
    for h in history {
        let _ = writeln!(
            out,
            "{} | {} | {} | {} | {}",
            h.iteration,
            h.status.map(|s| s.as_str()).unwrap_or("no_code"),
            h.speedup.map(|s| format!("{}x", fmt_num(s))).unwrap_or_else(|| "-".into()),
            h.verdict.map(|v| v.as_str()).unwrap_or("-"),
            if h.promoted { "yes" } else { "" }
        );
    }
    out.trim_end().to_string()
}
