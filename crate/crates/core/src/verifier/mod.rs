//! Non-LLM verification: build, run, compare against the reference, time.
//!
//! Everything language-specific lives behind the runner protocol. A runner
//! is an argv template invoked in one of two modes:
//!
//! - `produce`: run once and write the output tensor (KSTN) to `{output_path}`;
//! - `time`: run `{warmup}` unmeasured then `{reps}` measured executions and
//!   write one integer nanosecond sample per line to `{timing_path}`.
//!
//! Exit code 0 means success. The reference runner receives the sentinel
//! `@reference` as `{source_path}`.

pub mod kstn;
mod simulated;
mod task;

pub use kstn::{compare, compare_tensors, Comparison, DType, KstnError, Tensor, TensorData, Tolerance};
pub use simulated::{SimulatedVerifier, ToyFailure, ToyKernel};
pub use task::{Category, RunnerConfig, TaskError, TaskSpec, REFERENCE_SENTINEL};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricsError, TimingResult};
use crate::process::{self, ProcessSpec};

pub const DEFAULT_LOG_CAP: usize = 32 * 1024;

/// Serializes timing phases across every verifier in the process.
static TIMING_LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateKernel {
    pub iteration: u32,
    pub source: String,
    pub language: String,
    #[serde(default)]
    pub build_flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyStatus {
    BuildError,
    RuntimeError,
    IncorrectOutput,
    Correct,
}

impl VerifyStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerifyStatus::BuildError => "build_error",
            VerifyStatus::RuntimeError => "runtime_error",
            VerifyStatus::IncorrectOutput => "incorrect_output",
            VerifyStatus::Correct => "correct",
        }
    }
}

impl std::fmt::Display for VerifyStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub status: VerifyStatus,
    /// Captured output, capped with head and tail retained.
    pub logs: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rel_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingResult>,
}

impl VerificationOutcome {
    pub fn failed(status: VerifyStatus, logs: impl Into<String>) -> Self {
        debug_assert_ne!(status, VerifyStatus::Correct);
        let mut logs = logs.into();
        if logs.trim().is_empty() {
            logs = format!("{status} (no output captured)");
        }
        VerificationOutcome {
            status,
            logs,
            max_abs_err: None,
            max_rel_err: None,
            timing: None,
        }
    }

    pub fn correct(timing: TimingResult, logs: String, comparison: &Comparison) -> Self {
        VerificationOutcome {
            status: VerifyStatus::Correct,
            logs,
            max_abs_err: comparison.max_abs_err,
            max_rel_err: comparison.max_rel_err,
            timing: Some(timing),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.status == VerifyStatus::Correct
    }

    pub fn speedup(&self) -> Option<f64> {
        self.timing.as_ref().and_then(|t| t.speedup().ok())
    }
}

/// Failures that are not the candidate's fault. They abort the task.
#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("reference runner failed in {mode} mode: {detail}")]
    ReferenceFailed { mode: &'static str, detail: String },
    #[error("timing protocol violated by {who}: {detail}")]
    TimingProtocol { who: &'static str, detail: String },
    #[error("runner template: {0}")]
    Template(String),
    #[error("candidate source is empty")]
    EmptySource,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl VerifierError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        VerifierError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Anything that can judge a candidate. The orchestrator only sees this trait.
pub trait Verifier: Send + Sync {
    /// Verifies `candidate` using `attempt_dir` for all artifacts.
    fn verify(
        &self,
        task: &TaskSpec,
        candidate: &CandidateKernel,
        attempt_dir: &Path,
    ) -> Result<VerificationOutcome, VerifierError>;

    /// Command that executes the verified candidate once, for profilers to wrap.
    fn profile_command(&self, task: &TaskSpec, attempt_dir: &Path) -> Result<Vec<String>, VerifierError>;
}

/// Values substituted into runner templates.
#[derive(Debug, Clone, Default)]
pub struct Placeholders {
    vars: BTreeMap<&'static str, String>,
    build_flags: Vec<String>,
}

impl Placeholders {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, key: &'static str, value: impl Into<String>) -> Self {
        self.vars.insert(key, value.into());
        self
    }

    pub fn path(self, key: &'static str, value: &Path) -> Self {
        self.set(key, value.display().to_string())
    }

    pub fn build_flags(mut self, flags: &[String]) -> Self {
        self.build_flags = flags.to_vec();
        self
    }

    /// Expands `{name}` placeholders. An argument that is exactly
    /// `{build_flags}` splices one argument per flag.
    pub fn expand(&self, template: &[String]) -> Result<Vec<String>, VerifierError> {
        let mut out = Vec::with_capacity(template.len());
        for arg in template {
            if arg == "{build_flags}" {
                out.extend(self.build_flags.iter().cloned());
                continue;
            }
            out.push(self.expand_one(arg)?);
        }
        Ok(out)
    }

    fn expand_one(&self, arg: &str) -> Result<String, VerifierError> {
        let mut out = String::with_capacity(arg.len());
        let mut rest = arg;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let name = close.map(|c| &after[..c]);
            match name {
                Some(n) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') => {
                    if n == "build_flags" {
                        out.push_str(&self.build_flags.join(" "));
                    } else {
                        let v = self
                            .vars
                            .get(n)
                            .ok_or_else(|| VerifierError::Template(format!("unresolved placeholder {{{n}}} in {arg:?}")))?;
                        out.push_str(v);
                    }
                    rest = &after[n.len() + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Keeps the first and last `cap / 2` bytes of an oversized log.
pub fn truncate_log(log: &str, cap: usize) -> String {
    if log.len() <= cap {
        return log.to_string();
    }
    let half = cap / 2;
    let mut head_end = half;
    while !log.is_char_boundary(head_end) {
        head_end -= 1;
    }
    let mut tail_start = log.len() - half;
    while !log.is_char_boundary(tail_start) {
        tail_start += 1;
    }
    format!(
        "{}\n... [truncated {} bytes] ...\n{}",
        &log[..head_end],
        tail_start - head_end,
        &log[tail_start..]
    )
}

/// Parses a `time`-mode sample file, requiring exactly `reps` positive samples.
pub fn parse_timing_file(text: &str, reps: u32) -> Result<Vec<u64>, String> {
    let mut samples = Vec::with_capacity(reps as usize);
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: u64 = t
            .parse()
            .map_err(|_| format!("line {}: {t:?} is not an integer nanosecond count", i + 1))?;
        if v == 0 {
            return Err(format!("line {}: sample must be positive", i + 1));
        }
        samples.push(v);
    }
    if samples.len() != reps as usize {
        return Err(format!("expected {reps} samples, found {}", samples.len()));
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarnessConfig {
    pub log_cap: usize,
    /// Store raw timing samples in the outcome.
    pub keep_samples: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            log_cap: DEFAULT_LOG_CAP,
            keep_samples: true,
        }
    }
}

/// Runner-protocol verifier.
///
/// Artifacts land in the attempt directory: `candidate.src`, `build.log`,
/// `run.log`, `ref.kstn`, `out.kstn`, `times.txt` and `ref_times.txt`.
/// Runners execute inside `<attempt>/work`, recreated for every verification.
#[derive(Debug, Clone, Default)]
pub struct HarnessVerifier {
    config: HarnessConfig,
}

enum Role {
    Reference,
    Candidate,
}

impl HarnessVerifier {
    pub fn new(config: HarnessConfig) -> Self {
        HarnessVerifier { config }
    }

    fn placeholders(task: &TaskSpec, role: &Role, attempt_dir: &Path, candidate: Option<&CandidateKernel>) -> Placeholders {
        let work = attempt_dir.join("work");
        let (source, out, times) = match role {
            Role::Reference => (
                REFERENCE_SENTINEL.to_string(),
                attempt_dir.join("ref.kstn"),
                attempt_dir.join("ref_times.txt"),
            ),
            Role::Candidate => (
                attempt_dir.join("candidate.src").display().to_string(),
                attempt_dir.join("out.kstn"),
                attempt_dir.join("times.txt"),
            ),
        };
        Placeholders::new()
            .set("source_path", source)
            .path("output_path", &out)
            .path("timing_path", &times)
            .path("workdir", &work)
            .path("task_dir", &task.task_dir)
            .set("warmup", task.warmup.to_string())
            .set("reps", task.reps.to_string())
            .set("seed", task.seed.to_string())
            .set("language", candidate.map(|c| c.language.clone()).unwrap_or_else(|| task.language.clone()))
            .build_flags(candidate.map(|c| c.build_flags.as_slice()).unwrap_or(&[]))
    }

    fn exec(
        &self,
        runner: &RunnerConfig,
        argv: Vec<String>,
        attempt_dir: &Path,
    ) -> Result<process::ProcessOutput, VerifierError> {
        let spec = ProcessSpec::new(argv, attempt_dir.join("work"), Duration::from_secs_f64(runner.timeout_s))
            .env(&runner.env);
        let argv0 = spec.argv.first().cloned().unwrap_or_default();
        process::run(&spec).map_err(|e| VerifierError::io(Path::new(&argv0), e))
    }

    fn run_mode(
        &self,
        task: &TaskSpec,
        role: &Role,
        mode: &'static str,
        attempt_dir: &Path,
        candidate: Option<&CandidateKernel>,
    ) -> Result<(process::ProcessOutput, String), VerifierError> {
        let runner = match role {
            Role::Reference => &task.runner,
            Role::Candidate => &task.candidate_runner,
        };
        let argv = Self::placeholders(task, role, attempt_dir, candidate)
            .set("mode", mode)
            .expand(&runner.argv)?;
        let out = self.exec(runner, argv, attempt_dir)?;
        let timeout = Duration::from_secs_f64(runner.timeout_s);
        let mut log = out.combined_log();
        if !out.success() {
            if !log.is_empty() && !log.ends_with('\n') {
                log.push('\n');
            }
            log.push_str(&format!("[{mode}] {}\n", out.exit.describe(timeout)));
        }
        Ok((out, log))
    }

    fn timing_samples(
        &self,
        task: &TaskSpec,
        role: &Role,
        attempt_dir: &Path,
        candidate: Option<&CandidateKernel>,
    ) -> Result<Result<Vec<u64>, String>, VerifierError> {
        let (out, log) = self.run_mode(task, role, "time", attempt_dir, candidate)?;
        if !out.success() {
            return Ok(Err(log));
        }
        let path = match role {
            Role::Reference => attempt_dir.join("ref_times.txt"),
            Role::Candidate => attempt_dir.join("times.txt"),
        };
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => return Ok(Err(format!("{log}[time] cannot read {}: {e}\n", path.display()))),
        };
        Ok(parse_timing_file(&text, task.reps).map_err(|e| format!("{log}[time] {e}\n")))
    }

    /// Times a previously verified candidate against the reference.
    ///
    /// Both runners perform the task's warmup then exactly `reps` measured
    /// executions; any deviation from the sample-file contract is an error.
    pub fn time_candidate(
        &self,
        task: &TaskSpec,
        candidate: &CandidateKernel,
        attempt_dir: &Path,
    ) -> Result<TimingResult, VerifierError> {
        prepare_workdir(attempt_dir)?;
        write_file(&attempt_dir.join("candidate.src"), &candidate.source)?;
        let _guard = TIMING_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let reference = self
            .timing_samples(task, &Role::Reference, attempt_dir, None)?
            .map_err(|detail| VerifierError::TimingProtocol { who: "reference", detail })?;
        let cand = self
            .timing_samples(task, &Role::Candidate, attempt_dir, Some(candidate))?
            .map_err(|detail| VerifierError::TimingProtocol { who: "candidate", detail })?;
        Ok(TimingResult::from_samples(
            reference,
            cand,
            task.warmup,
            task.statistic,
            self.config.keep_samples,
        )?)
    }
}

fn prepare_workdir(attempt_dir: &Path) -> Result<(), VerifierError> {
    let work = attempt_dir.join("work");
    if work.exists() {
        fs::remove_dir_all(&work).map_err(|e| VerifierError::io(&work, e))?;
    }
    fs::create_dir_all(&work).map_err(|e| VerifierError::io(&work, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), VerifierError> {
    fs::write(path, text).map_err(|e| VerifierError::io(path, e))
}

impl Verifier for HarnessVerifier {
    fn verify(
        &self,
        task: &TaskSpec,
        candidate: &CandidateKernel,
        attempt_dir: &Path,
    ) -> Result<VerificationOutcome, VerifierError> {
        if candidate.source.trim().is_empty() {
            return Err(VerifierError::EmptySource);
        }
        fs::create_dir_all(attempt_dir).map_err(|e| VerifierError::io(attempt_dir, e))?;
        prepare_workdir(attempt_dir)?;
        for stale in ["out.kstn", "ref.kstn", "times.txt", "ref_times.txt", "build.log", "run.log"] {
            let _ = fs::remove_file(attempt_dir.join(stale));
        }
        write_file(&attempt_dir.join("candidate.src"), &candidate.source)?;
        let cap = self.config.log_cap;

        // Build.
        let mut build_log = String::new();
        if let Some(build) = &task.candidate_runner.build_argv {
            let argv = Self::placeholders(task, &Role::Candidate, attempt_dir, Some(candidate))
                .set("mode", "build")
                .expand(build)?;
            let out = self.exec(&task.candidate_runner, argv, attempt_dir)?;
            build_log = out.combined_log();
            if !out.success() {
                let timeout = Duration::from_secs_f64(task.candidate_runner.timeout_s);
                build_log.push_str(&format!("[build] {}\n", out.exit.describe(timeout)));
                let logs = truncate_log(&build_log, cap);
                write_file(&attempt_dir.join("build.log"), &logs)?;
                return Ok(VerificationOutcome::failed(VerifyStatus::BuildError, logs));
            }
        }
        write_file(&attempt_dir.join("build.log"), &truncate_log(&build_log, cap))?;

        // Reference output.
        let (ref_out, ref_log) = self.run_mode(task, &Role::Reference, "produce", attempt_dir, None)?;
        if !ref_out.success() {
            return Err(VerifierError::ReferenceFailed {
                mode: "produce",
                detail: truncate_log(&ref_log, 4096),
            });
        }
        let reference = Tensor::read(&attempt_dir.join("ref.kstn")).map_err(|e| VerifierError::ReferenceFailed {
            mode: "produce",
            detail: e.to_string(),
        })?;

        // Candidate output.
        let (cand_out, cand_log) = self.run_mode(task, &Role::Candidate, "produce", attempt_dir, Some(candidate))?;
        let mut run_log = format!("== produce ==\n{cand_log}");
        let finish = |status: VerifyStatus, log: &str| -> Result<VerificationOutcome, VerifierError> {
            let logs = truncate_log(log, cap);
            write_file(&attempt_dir.join("run.log"), &logs)?;
            Ok(VerificationOutcome::failed(status, logs))
        };
        if !cand_out.success() {
            return finish(VerifyStatus::RuntimeError, &run_log);
        }
        let produced = match Tensor::read(&attempt_dir.join("out.kstn")) {
            Ok(t) => t,
            Err(KstnError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                run_log.push_str("[produce] runner exited 0 but wrote no output tensor\n");
                return finish(VerifyStatus::RuntimeError, &run_log);
            }
            Err(e) => {
                run_log.push_str(&format!("[compare] {e}\n"));
                return finish(VerifyStatus::IncorrectOutput, &run_log);
            }
        };

        // Correctness.
        let cmp = compare(&produced, &reference, task.tolerance);
        if !cmp.pass {
            run_log.push_str(&format!(
                "[compare] {}\n",
                cmp.reason.as_deref().unwrap_or("outputs differ")
            ));
            let mut outcome = finish(VerifyStatus::IncorrectOutput, &run_log)?;
            outcome.max_abs_err = cmp.max_abs_err;
            outcome.max_rel_err = cmp.max_rel_err;
            return Ok(outcome);
        }

        // Timing, exclusive per process.
        let _guard = TIMING_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let ref_samples = self
            .timing_samples(task, &Role::Reference, attempt_dir, None)?
            .map_err(|detail| VerifierError::TimingProtocol {
                who: "reference",
                detail: truncate_log(&detail, 4096),
            })?;
        let cand_samples = match self.timing_samples(task, &Role::Candidate, attempt_dir, Some(candidate))? {
            Ok(s) => s,
            Err(log) => {
                run_log.push_str("== time ==\n");
                run_log.push_str(&log);
                return finish(VerifyStatus::RuntimeError, &run_log);
            }
        };
        drop(_guard);
        let timing = TimingResult::from_samples(
            ref_samples,
            cand_samples,
            task.warmup,
            task.statistic,
            self.config.keep_samples,
        )?;
        let logs = truncate_log(&run_log, cap);
        write_file(&attempt_dir.join("run.log"), &logs)?;
        Ok(VerificationOutcome::correct(timing, logs, &cmp))
    }

    fn profile_command(&self, task: &TaskSpec, attempt_dir: &Path) -> Result<Vec<String>, VerifierError> {
        let profile_dir = attempt_dir.join("work");
        fs::create_dir_all(&profile_dir).map_err(|e| VerifierError::io(&profile_dir, e))?;
        Self::placeholders(task, &Role::Candidate, attempt_dir, None)
            .set("mode", "produce")
            .path("output_path", &profile_dir.join("profile_out.kstn"))
            .expand(&task.candidate_runner.argv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_expansion() {
        let p = Placeholders::new()
            .set("mode", "time")
            .set("reps", "100")
            .build_flags(&["-O3".into(), "-march=native".into()]);
        let t: Vec<String> = ["cc", "{build_flags}", "--mode={mode}", "n{reps}", "{ not a placeholder }"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            p.expand(&t).unwrap(),
            ["cc", "-O3", "-march=native", "--mode=time", "n100", "{ not a placeholder }"]
        );
        let bad = vec!["{output_path}".to_string()];
        assert!(matches!(p.expand(&bad), Err(VerifierError::Template(_))));
    }

    #[test]
    fn log_truncation_keeps_head_and_tail() {
        let log = format!("{}{}", "a".repeat(100), "z".repeat(100));
        let t = truncate_log(&log, 40);
        assert!(t.starts_with(&"a".repeat(20)));
        assert!(t.ends_with(&"z".repeat(20)));
        assert!(t.contains("truncated 160 bytes"));
        assert_eq!(truncate_log("short", 40), "short");
        // Multi-byte characters are never split.
        let wide = "é".repeat(50);
        assert!(truncate_log(&wide, 11).contains("truncated"));
    }

    #[test]
    fn timing_file_rules() {
        assert_eq!(parse_timing_file("5\n6\n\n7\n", 3).unwrap(), vec![5, 6, 7]);
        assert!(parse_timing_file("5\n6\n", 3).unwrap_err().contains("expected 3"));
        assert!(parse_timing_file("5\nx\n6\n", 3).is_err());
        assert!(parse_timing_file("0\n", 1).is_err());
    }
}
