//! The closed loop: generate, verify, profile, conduct, refine.
//!
//! Every attempt is written to `<state>/<task>/iter<N>/record.json` before
//! the next one starts, and the Coder's and Conductor's outputs are staged
//! in the same directory as soon as they arrive, so a killed run resumes
//! without repeating any LLM call that already completed.

mod record;
mod run;

pub use record::{best_of, BestRecord, IterationRecord, TaskResult, TaskStatus};
pub use run::{
    iteration_dir, load_records, load_task_result, resume_task, run_suite, run_task, LoopDeps, OrchestratorError,
    RunOptions, RECORD_FILE, TASK_RESULT_FILE,
};
