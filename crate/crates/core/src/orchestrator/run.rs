use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::record::{best_of, BestRecord, IterationRecord, TaskResult, TaskStatus};
use crate::agents::{
    self, select_metric_docs, CoderOutput, Conductor, ConductorContext, Diagnosis, HardwareSpec, HistoryEntry,
    DEFAULT_DOC_K,
};
use crate::compendium::Compendium;
use crate::fsutil::write_atomic;
use crate::llm::{LlmClient, LlmError};
use crate::metrics::{MetricId, ProfileReport};
use crate::profiler::{collect, ProfileRequest, ProfilerAdapter};
use crate::verifier::{TaskSpec, VerificationOutcome, Verifier};

pub const TASK_RESULT_FILE: &str = "task_result.json";
pub const RECORD_FILE: &str = "record.json";
const CODER_STAGE_FILE: &str = "coder.json";
const CONDUCT_STAGE_FILE: &str = "conductor.json";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("task {task}: corrupt state for iteration {iteration}: {reason}")]
    Corrupt {
        task: String,
        iteration: u32,
        reason: String,
    },
    #[error("task {task}: no persisted state under {dir}")]
    NoState { task: String, dir: PathBuf },
    #[error("task {task}: halted after iteration {iteration}")]
    Halted { task: String, iteration: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything a task loop talks to.
#[derive(Clone)]
pub struct LoopDeps {
    pub llm: LlmClient,
    pub verifier: Arc<dyn Verifier>,
    pub profiler: Arc<dyn ProfilerAdapter>,
    pub compendium: Arc<Compendium>,
    pub hardware: HardwareSpec,
    pub conductor: Arc<Conductor>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub state_dir: PathBuf,
    /// Overrides the task's attempt budget.
    pub max_attempts: Option<u32>,
    /// Stop once the best speedup reaches this value.
    pub target_speedup: Option<f64>,
    pub profile_timeout: Duration,
    pub doc_k: usize,
    /// Crash injection: stop with [`OrchestratorError::Halted`] right after
    /// this iteration's record is persisted.
    pub halt_after_iteration: Option<u32>,
}

impl RunOptions {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            state_dir: state_dir.into(),
            max_attempts: None,
            target_speedup: None,
            profile_timeout: Duration::from_secs(600),
            doc_k: DEFAULT_DOC_K,
            halt_after_iteration: None,
        }
    }

    pub fn task_dir(&self, task_id: &str) -> PathBuf {
        self.state_dir.join(task_id)
    }
}

pub fn iteration_dir(task_dir: &Path, iteration: u32) -> PathBuf {
    task_dir.join(format!("iter{iteration}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OrchestratorError> {
    let mut text = serde_json::to_string_pretty(value).expect("state serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn read_stage<T: DeserializeOwned>(path: &Path) -> Option<T> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable stage file");
            None
        }
    }
}

/// Starts a task from scratch, discarding any earlier state for it.
pub fn run_task(task: &TaskSpec, deps: &LoopDeps, opts: &RunOptions) -> Result<TaskResult, OrchestratorError> {
    let dir = opts.task_dir(&task.task_id);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    drive(task, deps, opts, Vec::new())
}

/// Reads the persisted records of a task in iteration order. Stops at the
/// first missing iteration; a record that cannot be read is an error
/// naming its iteration.
pub fn load_records(task_id: &str, task_dir: &Path) -> Result<Vec<IterationRecord>, OrchestratorError> {
    let mut records = Vec::new();
    for n in 1.. {
        let path = iteration_dir(task_dir, n).join(RECORD_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => break,
            Err(e) => return Err(io_err(&path)(e)),
        };
        let corrupt = |reason: String| OrchestratorError::Corrupt {
            task: task_id.to_string(),
            iteration: n,
            reason,
        };
        let record: IterationRecord = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if record.iteration != n {
            return Err(corrupt(format!("record claims iteration {}", record.iteration)));
        }
        record.check().map_err(corrupt)?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_task_result(task_dir: &Path) -> Result<Option<TaskResult>, OrchestratorError> {
    let path = task_dir.join(TASK_RESULT_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| OrchestratorError::Corrupt {
            task: task_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            iteration: 0,
            reason: format!("{TASK_RESULT_FILE}: {e}"),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}

/// Continues a task from its persisted records. A finished task is
/// returned as stored without any new work.
pub fn resume_task(task: &TaskSpec, deps: &LoopDeps, opts: &RunOptions) -> Result<TaskResult, OrchestratorError> {
    let dir = opts.task_dir(&task.task_id);
    if !dir.is_dir() {
        return Err(OrchestratorError::NoState {
            task: task.task_id.clone(),
            dir,
        });
    }
    let records = load_records(&task.task_id, &dir)?;
    if let Some(stored) = load_task_result(&dir)? {
        if stored.status == TaskStatus::Finished {
            if stored.records != records || stored.best != best_of(&records) {
                return Err(OrchestratorError::Corrupt {
                    task: task.task_id.clone(),
                    iteration: records.len() as u32,
                    reason: format!("{TASK_RESULT_FILE} disagrees with the iteration records"),
                });
            }
            return Ok(stored);
        }
    }
    drive(task, deps, opts, records)
}

fn reached_target(best: Option<&BestRecord>, target: Option<f64>) -> bool {
    matches!((best, target), (Some(b), Some(t)) if b.speedup >= t)
}

fn finish(
    task: &TaskSpec,
    dir: &Path,
    records: Vec<IterationRecord>,
    status: TaskStatus,
    error: Option<String>,
) -> Result<TaskResult, OrchestratorError> {
    let best = best_of(&records);
    let result = TaskResult {
        task_id: task.task_id.clone(),
        category: task.category,
        success: best.is_some(),
        attempts_used: records.len() as u32,
        best,
        records,
        status,
        error,
    };
    write_json(&dir.join(TASK_RESULT_FILE), &result)?;
    Ok(result)
}

/// The attempt that the next refine builds on: the latest one that was
/// diagnosed.
fn last_diagnosed(records: &[IterationRecord]) -> Option<&IterationRecord> {
    records.iter().rev().find(|r| r.diagnosis.is_some())
}

fn drive(
    task: &TaskSpec,
    deps: &LoopDeps,
    opts: &RunOptions,
    mut records: Vec<IterationRecord>,
) -> Result<TaskResult, OrchestratorError> {
    let dir = opts.task_dir(&task.task_id);
    let budget = opts.max_attempts.unwrap_or(task.max_attempts);
    let mut best = best_of(&records);
    let span = tracing::info_span!("task", id = %task.task_id);
    let _enter = span.enter();

    while (records.len() as u32) < budget && !reached_target(best.as_ref(), opts.target_speedup) {
        let n = records.len() as u32 + 1;
        let iter_dir = iteration_dir(&dir, n);
        fs::create_dir_all(&iter_dir).map_err(io_err(&iter_dir))?;

        let coder_stage = iter_dir.join(CODER_STAGE_FILE);
        let output = match read_stage::<CoderOutput>(&coder_stage) {
            Some(o) => o,
            None => {
                let out = match last_diagnosed(&records) {
                    Some(prev) => agents::refine(
                        task,
                        prev.candidate.as_ref(),
                        prev.diagnosis.as_ref().expect("diagnosed"),
                        best.as_ref(),
                        &deps.hardware,
                        &deps.llm,
                        n,
                    ),
                    None => agents::generate(task, &deps.hardware, &deps.llm, n),
                };
                match out {
                    Ok(o) => o,
                    Err(e) => return abort(task, &dir, records, n, e),
                }
            }
        };
        write_json(&coder_stage, &output)?;

        let candidate = match output {
            CoderOutput::Candidate(c) => c,
            CoderOutput::NoCode { response } => {
                tracing::warn!(iteration = n, "coder reply contained no code");
                let record = IterationRecord {
                    iteration: n,
                    candidate: None,
                    generation_error: Some(format!("no code found in a {}-character reply", response.len())),
                    verification: None,
                    profile: None,
                    profile_error: None,
                    diagnosis: None,
                    promoted_to_best: false,
                };
                commit(task, opts, &iter_dir, &mut records, record)?;
                continue;
            }
        };

        let verification = match deps.verifier.verify(task, &candidate, &iter_dir) {
            Ok(v) => v,
            Err(e) => {
                tracing::error!(iteration = n, error = %e, "verifier infrastructure failure");
                let record = IterationRecord {
                    iteration: n,
                    candidate: Some(candidate),
                    generation_error: None,
                    verification: None,
                    profile: None,
                    profile_error: None,
                    diagnosis: None,
                    promoted_to_best: false,
                };
                write_json(&iter_dir.join(RECORD_FILE), &record)?;
                records.push(record);
                return finish(task, &dir, records, TaskStatus::InfrastructureFailed, Some(e.to_string()));
            }
        };
        tracing::info!(iteration = n, status = %verification.status, speedup = ?verification.speedup(), "verified");

        let (profile, profile_error) = if verification.is_correct() {
            let extra = last_diagnosed(&records).map(|r| r.diagnosis.as_ref().unwrap().extra_metrics.clone());
            match profile_candidate(task, deps, opts, &iter_dir, n, extra.as_deref().unwrap_or(&[])) {
                Ok(p) => (Some(p), None),
                Err(e) => {
                    tracing::warn!(iteration = n, error = %e, "profiling failed");
                    (None, Some(e))
                }
            }
        } else {
            (None, None)
        };

        let verdict = agents::verdict_for(&verification, best.as_ref());
        let promoted = verdict.promotes();

        let conduct_stage = iter_dir.join(CONDUCT_STAGE_FILE);
        let diagnosis = match read_stage::<Diagnosis>(&conduct_stage) {
            Some(d) => d,
            None => {
                let ctx = context(task, deps, opts, n, &candidate.source, &verification, profile.clone(), &best, &records);
                match deps.conductor.conduct(&ctx, &deps.llm) {
                    Ok(d) => d,
                    Err(e) => return abort(task, &dir, records, n, e),
                }
            }
        };
        write_json(&conduct_stage, &diagnosis)?;
        debug_assert_eq!(diagnosis.verdict, verdict);

        let record = IterationRecord {
            iteration: n,
            candidate: Some(candidate),
            generation_error: None,
            verification: Some(verification),
            profile,
            profile_error,
            diagnosis: Some(diagnosis),
            promoted_to_best: promoted,
        };
        if promoted {
            best = BestRecord::from_record(&record);
            tracing::info!(iteration = n, speedup = record.speedup(), "new best");
        }
        commit(task, opts, &iter_dir, &mut records, record)?;
    }
    finish(task, &dir, records, TaskStatus::Finished, None)
}

/// Persists a finished record before the next attempt starts.
fn commit(
    task: &TaskSpec,
    opts: &RunOptions,
    iter_dir: &Path,
    records: &mut Vec<IterationRecord>,
    record: IterationRecord,
) -> Result<(), OrchestratorError> {
    let n = record.iteration;
    write_json(&iter_dir.join(RECORD_FILE), &record)?;
    records.push(record);
    if opts.halt_after_iteration == Some(n) {
        return Err(OrchestratorError::Halted {
            task: task.task_id.clone(),
            iteration: n,
        });
    }
    Ok(())
}

fn abort(
    task: &TaskSpec,
    dir: &Path,
    records: Vec<IterationRecord>,
    iteration: u32,
    e: LlmError,
) -> Result<TaskResult, OrchestratorError> {
    tracing::error!(iteration, error = %e, "llm unavailable; aborting task");
    finish(task, dir, records, TaskStatus::Aborted, Some(format!("iteration {iteration}: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn context(
    task: &TaskSpec,
    deps: &LoopDeps,
    opts: &RunOptions,
    n: u32,
    source: &str,
    verification: &VerificationOutcome,
    profile: Option<ProfileReport>,
    best: &Option<BestRecord>,
    records: &[IterationRecord],
) -> ConductorContext {
    let mut ctx = ConductorContext {
        task_id: task.task_id.clone(),
        category: task.category,
        backend: task.backend,
        language: task.language.clone(),
        iteration: n,
        current_code: source.to_string(),
        verifier_feedback: verification.clone(),
        metric_docs: Vec::new(),
        current_profile: profile,
        best_record: best.clone(),
        hardware_spec: deps.hardware.clone(),
        history: records.iter().map(HistoryEntry::from_record).collect(),
    };
    let labels = deps.conductor.labels(&ctx);
    ctx.metric_docs = select_metric_docs(&deps.compendium, &labels, ctx.current_profile.as_ref(), opts.doc_k);
    ctx
}

/// Profiles a verified candidate with the default metrics plus whatever the
/// last diagnosis asked for and the adapter can collect.
fn profile_candidate(
    task: &TaskSpec,
    deps: &LoopDeps,
    opts: &RunOptions,
    iter_dir: &Path,
    n: u32,
    extra: &[MetricId],
) -> Result<ProfileReport, String> {
    let catalog = &deps.conductor.catalog;
    let caps = deps.profiler.capabilities();
    let defaults: Vec<MetricId> = catalog
        .default_metric_set(task.backend)
        .into_iter()
        .filter(|m| caps.contains(m))
        .collect();
    let extra: Vec<MetricId> = extra
        .iter()
        .filter(|m| {
            let ok = caps.contains(*m);
            if !ok {
                tracing::warn!(metric = %m, adapter = deps.profiler.name(), "requested metric not collectable");
            }
            ok
        })
        .cloned()
        .collect();
    let metrics = catalog.merge_metric_requests(&defaults, &extra).map_err(|e| e.to_string())?;
    let command = deps.verifier.profile_command(task, iter_dir).map_err(|e| e.to_string())?;
    let request = ProfileRequest {
        command,
        metrics,
        timeout: opts.profile_timeout,
        workdir: iter_dir.join("work"),
        raw_path: iter_dir.join("profile.raw"),
        env: task.candidate_runner.env.clone(),
        iteration: n,
    };
    let report = collect(deps.profiler.as_ref(), &request).map_err(|e| e.to_string())?;
    let relative = Path::new(&task.task_id).join(format!("iter{n}")).join("profile.raw");
    Ok(report.with_raw_artifact(relative))
}

/// Runs every task, up to `parallel` at a time. Results keep the order of
/// `tasks`; a task whose state cannot be written yields an error entry.
pub fn run_suite(
    tasks: &[TaskSpec],
    deps: &LoopDeps,
    opts: &RunOptions,
    parallel: usize,
    resume: bool,
) -> Vec<Result<TaskResult, OrchestratorError>> {
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Result<TaskResult, OrchestratorError>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut g = next.lock().unwrap();
                    let i = *g;
                    *g += 1;
                    i
                };
                let Some(task) = tasks.get(i) else { break };
                let has_state = opts.task_dir(&task.task_id).is_dir();
                let r = if resume && has_state {
                    resume_task(task, deps, opts)
                } else {
                    run_task(task, deps, opts)
                };
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every task ran"))
        .collect()
}
