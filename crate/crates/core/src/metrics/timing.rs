use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Aggregate applied to the timed repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    #[default]
    Median,
    Mean,
    Min,
}

/// Reference and candidate run times measured under the same protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingResult {
    /// Aggregated reference time (see `statistic`).
    pub t_reference_ns: f64,
    /// Aggregated candidate time (see `statistic`).
    pub t_candidate_ns: f64,
    pub mean_reference_ns: f64,
    pub mean_candidate_ns: f64,
    pub statistic: Statistic,
    pub warmup_runs: u32,
    pub timed_runs: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_run_samples: Option<RunSamples>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSamples {
    pub reference_ns: Vec<u64>,
    pub candidate_ns: Vec<u64>,
}

impl TimingResult {
    /// Builds a result from raw per-repetition samples.
    pub fn from_samples(
        reference_ns: Vec<u64>,
        candidate_ns: Vec<u64>,
        warmup_runs: u32,
        statistic: Statistic,
        keep_samples: bool,
    ) -> Result<Self, MetricsError> {
        if reference_ns.len() != candidate_ns.len() {
            return Err(MetricsError::InvalidTiming(format!(
                "reference has {} samples, candidate has {}",
                reference_ns.len(),
                candidate_ns.len()
            )));
        }
        let t_reference_ns = aggregate_samples(&reference_ns, statistic)?;
        let t_candidate_ns = aggregate_samples(&candidate_ns, statistic)?;
        let mean_reference_ns = aggregate_samples(&reference_ns, Statistic::Mean)?;
        let mean_candidate_ns = aggregate_samples(&candidate_ns, Statistic::Mean)?;
        Ok(TimingResult {
            t_reference_ns,
            t_candidate_ns,
            mean_reference_ns,
            mean_candidate_ns,
            statistic,
            warmup_runs,
            timed_runs: reference_ns.len() as u32,
            per_run_samples: keep_samples.then_some(RunSamples {
                reference_ns,
                candidate_ns,
            }),
        })
    }

    pub fn speedup(&self) -> Result<f64, MetricsError> {
        speedup(self)
    }
}

/// Speedup of the candidate over the reference: `t_reference / t_candidate`.
pub fn speedup(t: &TimingResult) -> Result<f64, MetricsError> {
    speedup_ratio(t.t_reference_ns, t.t_candidate_ns)
}

pub fn speedup_ratio(t_reference_ns: f64, t_candidate_ns: f64) -> Result<f64, MetricsError> {
    // `!(x > 0)` also rejects NaN.
    if !(t_reference_ns > 0.0) || !t_reference_ns.is_finite() {
        return Err(MetricsError::InvalidTiming(format!(
            "reference time must be positive, got {t_reference_ns}"
        )));
    }
    if !(t_candidate_ns > 0.0) || !t_candidate_ns.is_finite() {
        return Err(MetricsError::InvalidTiming(format!(
            "candidate time must be positive, got {t_candidate_ns}"
        )));
    }
    Ok(t_reference_ns / t_candidate_ns)
}

pub fn aggregate_samples(samples: &[u64], statistic: Statistic) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::InvalidTiming("no timing samples".into()));
    }
    Ok(match statistic {
        Statistic::Median => {
            let mut sorted = samples.to_vec();
            sorted.sort_unstable();
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid] as f64
            } else {
                (sorted[mid - 1] as f64 + sorted[mid] as f64) / 2.0
            }
        }
        Statistic::Mean => {
            // Summing in u128 keeps large nanosecond counts exact.
            let total: u128 = samples.iter().map(|&s| s as u128).sum();
            total as f64 / samples.len() as f64
        }
        Statistic::Min => *samples.iter().min().expect("non-empty") as f64,
    })
}
