//! The Coder and Conductor roles.
//!
//! The Conductor's verdict and bottleneck labels are computed here from
//! measurements; the LLM only contributes the rationale, the ordered
//! directives for the Coder and requests for extra metrics.

mod coder;
mod conductor;
mod hardware;
mod rules;

pub use coder::{generate, generate_request, refine, refine_request, CoderOutput};
pub use conductor::{
    conduct, error_excerpt, select_metric_docs, Conductor, ConductorContext, Diagnosis, HistoryEntry,
    DEFAULT_DOC_K,
};
pub use hardware::{CacheLevel, HardwareSpec};
pub use rules::{
    classify_bottlenecks, BottleneckLabel, Comparator, Evidence, Label, RelativeTo, Rule, RuleSplit, RuleTable,
};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::BestRecord;
use crate::verifier::VerificationOutcome;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("hardware spec: {0}")]
    Hardware(String),
    #[error("rule table: {0}")]
    Rules(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How the current attempt relates to the best one so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    FirstMeasurement,
    Improvement,
    Regression,
    CorrectnessFailure,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::FirstMeasurement => "first_measurement",
            Verdict::Improvement => "improvement",
            Verdict::Regression => "regression",
            Verdict::CorrectnessFailure => "correctness_failure",
        }
    }

    /// Whether the attempt becomes the new best.
    pub fn promotes(self) -> bool {
        matches!(self, Verdict::FirstMeasurement | Verdict::Improvement)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Strictly faster than the best is an improvement; a tie is a regression.
pub fn compare_speedups(current: f64, best: Option<f64>) -> Verdict {
    match best {
        None => Verdict::FirstMeasurement,
        Some(b) if current > b => Verdict::Improvement,
        Some(_) => Verdict::Regression,
    }
}

pub fn compare_with_best(current_speedup: f64, best: Option<&BestRecord>) -> Verdict {
    compare_speedups(current_speedup, best.map(|b| b.speedup))
}

/// Verdict for a verified attempt. Any non-correct status is a
/// correctness failure regardless of timing.
pub fn verdict_for(outcome: &VerificationOutcome, best: Option<&BestRecord>) -> Verdict {
    if !outcome.is_correct() {
        return Verdict::CorrectnessFailure;
    }
    match outcome.speedup() {
        Some(s) => compare_with_best(s, best),
        None => Verdict::Regression,
    }
}
