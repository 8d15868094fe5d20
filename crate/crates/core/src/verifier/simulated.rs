use std::path::Path;

use super::{CandidateKernel, Comparison, TaskSpec, VerificationOutcome, Verifier, VerifierError, VerifyStatus};
use crate::metrics::TimingResult;

/// A toy kernel: `key = value` lines describing how the candidate behaves.
///
/// ```text
/// # comments are allowed
/// cost_ns = 9300
/// fail = runtime        # build | runtime | wrong, optional
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ToyKernel {
    pub cost_ns: u64,
    pub fail: Option<ToyFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyFailure {
    Build,
    Runtime,
    Wrong,
}

impl ToyKernel {
    pub fn parse(source: &str) -> Result<ToyKernel, String> {
        let mut cost = None;
        let mut fail = None;
        for (i, raw) in source.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value, got {line:?}", i + 1))?;
            match (k.trim(), v.trim()) {
                ("cost_ns", v) => {
                    let c: u64 = v.parse().map_err(|_| format!("line {}: bad cost_ns {v:?}", i + 1))?;
                    if c == 0 {
                        return Err(format!("line {}: cost_ns must be positive", i + 1));
                    }
                    cost = Some(c);
                }
                ("fail", "build") => fail = Some(ToyFailure::Build),
                ("fail", "runtime") => fail = Some(ToyFailure::Runtime),
                ("fail", "wrong") => fail = Some(ToyFailure::Wrong),
                (k, v) => return Err(format!("line {}: unknown setting {k} = {v}", i + 1)),
            }
        }
        if fail == Some(ToyFailure::Build) {
            return Ok(ToyKernel { cost_ns: cost.unwrap_or(1), fail });
        }
        Ok(ToyKernel {
            cost_ns: cost.ok_or("missing cost_ns")?,
            fail,
        })
    }
}

/// In-process verifier for toy kernels. Each candidate is judged from its
/// [`ToyKernel`] description and timed at exactly its declared cost, so
/// trajectories can be scripted without spawning processes.
#[derive(Debug, Clone)]
pub struct SimulatedVerifier {
    pub reference_ns: u64,
}

impl SimulatedVerifier {
    pub fn new(reference_ns: u64) -> Self {
        SimulatedVerifier { reference_ns }
    }
}

impl Verifier for SimulatedVerifier {
    fn verify(
        &self,
        task: &TaskSpec,
        candidate: &CandidateKernel,
        _attempt_dir: &Path,
    ) -> Result<VerificationOutcome, VerifierError> {
        if candidate.source.trim().is_empty() {
            return Err(VerifierError::EmptySource);
        }
        let kernel = match ToyKernel::parse(&candidate.source) {
            Ok(k) => k,
            Err(e) => return Ok(VerificationOutcome::failed(VerifyStatus::BuildError, format!("error: {e}"))),
        };
        match kernel.fail {
            Some(ToyFailure::Build) => {
                return Ok(VerificationOutcome::failed(
                    VerifyStatus::BuildError,
                    "kernel.cpp:1: error: simulated compile failure",
                ))
            }
            Some(ToyFailure::Runtime) => {
                return Ok(VerificationOutcome::failed(
                    VerifyStatus::RuntimeError,
                    "candidate exited: exit status: 1\nsimulated crash",
                ))
            }
            Some(ToyFailure::Wrong) => {
                let mut o = VerificationOutcome::failed(
                    VerifyStatus::IncorrectOutput,
                    "output mismatch at element 0: max_abs_err=1",
                );
                o.max_abs_err = Some(1.0);
                return Ok(o);
            }
            None => {}
        }
        let reps = task.reps.max(1) as usize;
        let timing = TimingResult::from_samples(
            vec![self.reference_ns; reps],
            vec![kernel.cost_ns; reps],
            task.warmup,
            task.statistic,
            false,
        )
        .map_err(VerifierError::Metrics)?;
        let cmp = Comparison {
            pass: true,
            max_abs_err: Some(0.0),
            max_rel_err: Some(0.0),
            reason: None,
        };
        Ok(VerificationOutcome::correct(timing, String::new(), &cmp))
    }

    fn profile_command(&self, task: &TaskSpec, _attempt_dir: &Path) -> Result<Vec<String>, VerifierError> {
        Ok(vec!["simulated".into(), task.task_id.clone()])
    }
}
