//! Suite-level evaluation: success rate, speedup aggregates and Fast1.
//!
//! Rates are percentages. A task succeeds when at least one correct kernel
//! was produced; it counts towards Fast1 when its best kernel beats the
//! reference (`> 1.0` by default, `>= 1.0` with [`EvalOptions::fast1_inclusive`]).
//! Tasks that never reached a verdict because of infrastructure trouble are
//! listed separately and kept out of every denominator unless
//! [`EvalOptions::include_infrastructure`] is set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{TaskResult, TaskStatus};
use crate::verifier::Category;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no task results to evaluate")]
    Empty,
    #[error("every task ({0}) failed on infrastructure; nothing to evaluate")]
    OnlyInfrastructure(usize),
    #[error("task {task}: invalid best speedup {value}")]
    BadSpeedup { task: String, value: f64 },
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which tasks the speedup means average over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedupBasis {
    /// Only tasks with a correct kernel.
    #[default]
    Successes,
    /// Every evaluated task; a task without a correct kernel counts as 1.0x,
    /// i.e. the reference implementation is kept.
    AllTasks,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub fast1_inclusive: bool,
    pub speedup_basis: SpeedupBasis,
    /// Count infrastructure failures as unsuccessful tasks.
    pub include_infrastructure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: String,
    pub category: Category,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_speedup: Option<f64>,
    pub fast1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: usize,
    pub successes: usize,
    pub fast1: usize,
    pub success_rate: f64,
    pub fast1_rate: f64,
    /// Geometric mean of best speedups; absent when nothing to average.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arithmetic_mean_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: Category,
    /// Absent when the suite has no task in this category.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfrastructureEntry {
    pub task_id: String,
    pub category: Category,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub options: EvalOptions,
    /// Sorted by task id.
    pub per_task: Vec<TaskEntry>,
    #[serde(flatten)]
    pub overall: Aggregate,
    /// One entry per category, in [`Category::ALL`] order.
    pub by_category: Vec<CategoryReport>,
    pub infrastructure_failed: Vec<InfrastructureEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table" => Ok(Format::Table),
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?} (expected table, json or csv)")),
        }
    }
}

fn is_infrastructure(r: &TaskResult) -> bool {
    r.status != TaskStatus::Finished
}

fn aggregate(entries: &[&TaskEntry], basis: SpeedupBasis) -> Aggregate {
    let tasks = entries.len();
    let successes = entries.iter().filter(|e| e.success).count();
    let fast1 = entries.iter().filter(|e| e.fast1).count();
    let speedups: Vec<f64> = entries
        .iter()
        .filter_map(|e| match (e.success, basis) {
            (true, _) => e.best_speedup,
            (false, SpeedupBasis::AllTasks) => Some(1.0),
            (false, SpeedupBasis::Successes) => None,
        })
        .collect();
    let (geo, arith) = if speedups.is_empty() {
        (None, None)
    } else {
        let n = speedups.len() as f64;
        let log_sum: f64 = speedups.iter().map(|s| s.ln()).sum();
        let sum: f64 = speedups.iter().sum();
        (Some((log_sum / n).exp()), Some(sum / n))
    };
    let pct = |k: usize| if tasks == 0 { 0.0 } else { 100.0 * k as f64 / tasks as f64 };
    Aggregate {
        tasks,
        successes,
        fast1,
        success_rate: pct(successes),
        fast1_rate: pct(fast1),
        mean_speedup: geo,
        arithmetic_mean_speedup: arith,
    }
}

/// Computes the suite metrics. The result does not depend on the order of
/// `results`.
pub fn evaluate_suite(results: &[TaskResult], opts: EvalOptions) -> Result<SuiteReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_task = Vec::new();
    let mut infra = Vec::new();
    for r in results {
        if is_infrastructure(r) {
            infra.push(InfrastructureEntry {
                task_id: r.task_id.clone(),
                category: r.category,
                status: r.status,
                error: r.error.clone(),
            });
            if !opts.include_infrastructure {
                continue;
            }
        }
        let best = r.best_speedup();
        if let Some(v) = best {
            if !(v.is_finite() && v > 0.0) {
                return Err(EvalError::BadSpeedup {
                    task: r.task_id.clone(),
                    value: v,
                });
            }
        }
        let success = r.success && best.is_some();
        let fast1 = success
            && match best {
                Some(s) if opts.fast1_inclusive => s >= 1.0,
                Some(s) => s > 1.0,
                None => false,
            };
        per_task.push(TaskEntry {
            task_id: r.task_id.clone(),
            category: r.category,
            success,
            best_speedup: if success { best } else { None },
            fast1,
        });
    }
    if per_task.is_empty() {
        return Err(EvalError::OnlyInfrastructure(infra.len()));
    }
    // Sorting fixes the summation order, which makes the floating-point
    // means independent of the input order too.
    per_task.sort_by(|a, b| {
        (a.task_id.as_str(), a.category)
            .cmp(&(b.task_id.as_str(), b.category))
            .then(a.best_speedup.partial_cmp(&b.best_speedup).unwrap_or(std::cmp::Ordering::Equal))
    });
    infra.sort_by(|a, b| (a.task_id.as_str(), a.category).cmp(&(b.task_id.as_str(), b.category)));

    let all: Vec<&TaskEntry> = per_task.iter().collect();
    let overall = aggregate(&all, opts.speedup_basis);
    let by_category = Category::ALL
        .iter()
        .map(|&c| {
            let group: Vec<&TaskEntry> = per_task.iter().filter(|e| e.category == c).collect();
            CategoryReport {
                category: c,
                stats: (!group.is_empty()).then(|| aggregate(&group, opts.speedup_basis)),
            }
        })
        .collect();
    Ok(SuiteReport {
        options: opts,
        per_task,
        overall,
        by_category,
        infrastructure_failed: infra,
    })
}

impl SuiteReport {
    pub fn from_json(text: &str) -> Result<SuiteReport, EvalError> {
        Ok(serde_json::from_str(text)?)
    }
}

fn opt_x(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

fn table_row(out: &mut String, name: &str, a: &Aggregate) {
    let _ = writeln!(
        out,
        "{:<18} {:>6} {:>12.1} {:>12} {:>10.1} {:>14}",
        name,
        a.tasks,
        a.success_rate,
        opt_x(a.mean_speedup),
        a.fast1_rate,
        opt_x(a.arithmetic_mean_speedup)
    );
}

fn render_table(r: &SuiteReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>6} {:>12} {:>12} {:>10} {:>14}",
        "Category", "Tasks", "Success (%)", "Speedup (x)", "Fast1 (%)", "Arith. (x)"
    );
    for c in &r.by_category {
        if let Some(a) = &c.stats {
            table_row(&mut out, c.category.as_str(), a);
        }
    }
    table_row(&mut out, "overall", &r.overall);
    let fast1 = if r.options.fast1_inclusive { ">= 1.0x" } else { "> 1.0x" };
    let basis = match r.options.speedup_basis {
        SpeedupBasis::Successes => "successful tasks",
        SpeedupBasis::AllTasks => "all tasks, failures as 1.0x",
    };
    let _ = writeln!(out, "\nSpeedup: geometric mean over {basis}; Fast1: best speedup {fast1}.");
    if !r.infrastructure_failed.is_empty() {
        let counted = if r.options.include_infrastructure { "counted as failures" } else { "excluded" };
        let _ = writeln!(out, "Infrastructure failures ({counted}):");
        for e in &r.infrastructure_failed {
            let status = serde_json::to_value(e.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default();
            let _ = writeln!(out, "  {} [{}] {}", e.task_id, status, e.error.as_deref().unwrap_or(""));
        }
    }
    out
}

fn render_csv(r: &SuiteReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut rows = vec![vec![
        "task_id".to_string(),
        "category".into(),
        "success".into(),
        "best_speedup".into(),
        "fast1".into(),
    ]];
    for e in &r.per_task {
        rows.push(vec![
            e.task_id.clone(),
            e.category.as_str().into(),
            e.success.to_string(),
            e.best_speedup.map(|v| v.to_string()).unwrap_or_default(),
            e.fast1.to_string(),
        ]);
    }
    for row in rows {
        w.write_record(&row).expect("writing csv to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing csv to memory")).expect("csv of utf-8 fields")
}

/// Renders the report. Output is a pure function of the report.
pub fn report_render(report: &SuiteReport, format: Format) -> String {
    match format {
        Format::Table => render_table(report),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Csv => render_csv(report),
    }
}
