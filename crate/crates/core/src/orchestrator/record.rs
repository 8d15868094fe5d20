use serde::{Deserialize, Serialize};

use crate::agents::{Diagnosis, Verdict};
use crate::metrics::ProfileReport;
use crate::verifier::{CandidateKernel, VerificationOutcome};

/// One attempt of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based attempt index.
    pub iteration: u32,
    /// Absent when the Coder's reply contained no code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateKernel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileReport>,
    /// Set when profiling a correct candidate failed; the attempt still counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<Diagnosis>,
    pub promoted_to_best: bool,
}

impl IterationRecord {
    pub fn is_correct(&self) -> bool {
        self.verification.as_ref().is_some_and(|v| v.is_correct())
    }

    pub fn speedup(&self) -> Option<f64> {
        self.verification.as_ref().filter(|v| v.is_correct()).and_then(|v| v.speedup())
    }

    pub fn verdict(&self) -> Option<Verdict> {
        self.diagnosis.as_ref().map(|d| d.verdict)
    }

    /// Checks the record's structural invariants.
    pub fn check(&self) -> Result<(), String> {
        if self.profile.is_some() && !self.is_correct() {
            return Err(format!("iteration {}: profile present without a correct verification", self.iteration));
        }
        if self.promoted_to_best {
            if self.speedup().is_none() {
                return Err(format!("iteration {}: promoted without a measured speedup", self.iteration));
            }
            if let Some(v) = self.verdict() {
                if !matches!(v, Verdict::Improvement | Verdict::FirstMeasurement) {
                    return Err(format!("iteration {}: promoted with verdict {v}", self.iteration));
                }
            }
        }
        if self.candidate.is_none() && self.verification.is_some() {
            return Err(format!("iteration {}: verification without a candidate", self.iteration));
        }
        Ok(())
    }
}

/// Historically best correct candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub candidate: CandidateKernel,
    pub verification: VerificationOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileReport>,
    pub speedup: f64,
    pub achieved_at_iteration: u32,
}

impl BestRecord {
    pub fn from_record(record: &IterationRecord) -> Option<BestRecord> {
        let speedup = record.speedup()?;
        Some(BestRecord {
            candidate: record.candidate.clone()?,
            verification: record.verification.clone()?,
            profile: record.profile.clone(),
            speedup,
            achieved_at_iteration: record.iteration,
        })
    }
}

/// Best record recomputed from the history: the earliest correct attempt
/// with the maximal speedup, matching strict-improvement promotion.
pub fn best_of(records: &[IterationRecord]) -> Option<BestRecord> {
    let mut best: Option<&IterationRecord> = None;
    for r in records {
        if let Some(s) = r.speedup() {
            if best.and_then(IterationRecord::speedup).is_none_or(|b| s > b) {
                best = Some(r);
            }
        }
    }
    best.and_then(BestRecord::from_record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    /// Budget used up or early-stop target reached.
    Finished,
    /// The verifier hit an infrastructure failure.
    InfrastructureFailed,
    /// The LLM provider became unavailable.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub category: crate::verifier::Category,
    pub records: Vec<IterationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<BestRecord>,
    pub success: bool,
    pub attempts_used: u32,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskResult {
    pub fn best_speedup(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.speedup)
    }

    pub fn is_infrastructure_failure(&self) -> bool {
        self.status == TaskStatus::InfrastructureFailed
    }
}
