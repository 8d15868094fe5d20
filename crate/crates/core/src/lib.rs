//! Profile-guided kernel generation loop.
//!
//! The crate wires four roles into a closed loop:
//!
//! - a **Coder** that asks an LLM for kernel source ([`agents::generate`], [`agents::refine`]),
//! - a **Verifier** that builds, runs, checks and times candidates through a
//!   file-based runner protocol ([`verifier`]),
//! - a **Profiler** that wraps the candidate in `perf` or Nsight Compute and
//!   normalizes the output into a [`metrics::ProfileReport`] ([`profiler`]),
//! - a **Conductor** that reads all of the above plus the historically best
//!   kernel and produces the next round's directives ([`agents::conduct`]).
//!
//! [`orchestrator::run_task`] drives the loop and persists every attempt so a
//! run can be resumed; [`eval`] turns finished runs into suite-level metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod compendium;
pub mod eval;
pub mod llm;
pub mod metrics;
pub mod orchestrator;
pub mod process;
pub mod profiler;
pub mod prompt;
pub mod verifier;

pub(crate) mod fsutil;
