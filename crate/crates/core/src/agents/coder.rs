use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::conductor::Diagnosis;
use super::rules::fmt_num;
use super::HardwareSpec;
use crate::llm::{extract_code, ChatRequest, LlmClient, LlmError, PromptTag};
use crate::metrics::Backend;
use crate::orchestrator::BestRecord;
use crate::prompt::render;
use crate::verifier::{CandidateKernel, TaskSpec};

const SYSTEM_TEMPLATE: &str = include_str!("../../prompts/coder_system.txt");
const GENERATE_TEMPLATE: &str = include_str!("../../prompts/coder_generate.txt");
const REFINE_TEMPLATE: &str = include_str!("../../prompts/coder_refine.txt");
const INTERFACE_CPU: &str = include_str!("../../prompts/interface_cpu.txt");
const INTERFACE_GPU: &str = include_str!("../../prompts/interface_gpu.txt");

/// What the Coder produced for one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoderOutput {
    Candidate(CandidateKernel),
    /// The reply held no code; the attempt counts as failed.
    NoCode { response: String },
}

fn base_vars(task: &TaskSpec, hw: &HardwareSpec) -> BTreeMap<&'static str, String> {
    let interface = match task.backend {
        Backend::Cpu => INTERFACE_CPU,
        Backend::Gpu => INTERFACE_GPU,
    };
    let mut vars = BTreeMap::new();
    vars.insert("task_id", task.task_id.clone());
    vars.insert("category", task.category.as_str().to_string());
    vars.insert("description", task.description.trim().to_string());
    vars.insert("interface", interface.trim().to_string());
    vars.insert("hardware", hw.render());
    vars.insert("language", task.language.clone());
    vars
}

fn system(task: &TaskSpec) -> String {
    let mut vars = BTreeMap::new();
    vars.insert("language", task.language.clone());
    render(SYSTEM_TEMPLATE, &vars).expect("coder system template variables are bound").trim_end().to_string()
}

pub fn generate_request(task: &TaskSpec, hw: &HardwareSpec) -> ChatRequest {
    let user = render(GENERATE_TEMPLATE, &base_vars(task, hw)).expect("generate template variables are bound");
    ChatRequest::new(PromptTag::CoderGenerate, system(task), user).for_task(&task.task_id)
}

/// Refinement prompt. `previous` is absent when the last attempt produced
/// no code.
pub fn refine_request(
    task: &TaskSpec,
    previous: Option<&CandidateKernel>,
    diagnosis: &Diagnosis,
    best: Option<&BestRecord>,
    hw: &HardwareSpec,
) -> ChatRequest {
    let lang = &task.language;
    let mut vars = base_vars(task, hw);
    vars.insert(
        "previous_iteration",
        previous.map(|p| p.iteration.to_string()).unwrap_or_else(|| "-".into()),
    );
    vars.insert(
        "previous_code",
        previous
            .map(|p| format!("```{lang}\n{}\n```", p.source.trim_end()))
            .unwrap_or_else(|| "absent (the previous reply contained no code)".into()),
    );
    vars.insert("verdict", diagnosis.verdict.to_string());
    vars.insert(
        "bottlenecks",
        if diagnosis.bottlenecks.is_empty() {
            "none".into()
        } else {
            diagnosis.bottlenecks.iter().map(|b| b.label.as_str()).collect::<Vec<_>>().join(", ")
        },
    );
    vars.insert(
        "error_excerpt",
        match &diagnosis.error_excerpt {
            Some(e) => format!("```\n{}\n```", e.trim_end()),
            None => "absent".into(),
        },
    );
    let mut hints = String::new();
    for (i, h) in diagnosis.hints.iter().enumerate() {
        let _ = writeln!(hints, "{}. {h}", i + 1);
    }
    if !diagnosis.rationale.is_empty() {
        let _ = writeln!(hints, "Rationale: {}", diagnosis.rationale);
    }
    vars.insert("hints", hints.trim_end().to_string());
    vars.insert(
        "best",
        match best {
            None => "absent (no correct candidate yet)".into(),
            Some(b) => {
                let mut s = format!(
                    "Iteration {}, speedup {}x.\n```{lang}\n{}\n```\nProfile summary:",
                    b.achieved_at_iteration,
                    fmt_num(b.speedup),
                    b.candidate.source.trim_end()
                );
                match &b.profile {
                    Some(p) if !p.is_empty() => {
                        for (id, v) in p.values() {
                            let _ = write!(s, "\n  {id} = {}", fmt_num(*v));
                        }
                    }
                    _ => s.push_str(" absent"),
                }
                s
            }
        },
    );
    let user = render(REFINE_TEMPLATE, &vars).expect("refine template variables are bound");
    ChatRequest::new(PromptTag::CoderRefine, system(task), user).for_task(&task.task_id)
}

fn extract(task: &TaskSpec, text: String, iteration: u32) -> CoderOutput {
    match extract_code(&text, &task.language) {
        Ok(source) if !source.trim().is_empty() => CoderOutput::Candidate(CandidateKernel {
            iteration,
            source,
            language: task.language.clone(),
            build_flags: Vec::new(),
        }),
        _ => CoderOutput::NoCode { response: text },
    }
}

/// First attempt for a task.
pub fn generate(task: &TaskSpec, hw: &HardwareSpec, llm: &LlmClient, iteration: u32) -> Result<CoderOutput, LlmError> {
    let resp = llm.complete(&generate_request(task, hw))?;
    Ok(extract(task, resp.text, iteration))
}

/// Next attempt, guided by the last diagnosis and the best kernel so far.
pub fn refine(
    task: &TaskSpec,
    previous: Option<&CandidateKernel>,
    diagnosis: &Diagnosis,
    best: Option<&BestRecord>,
    hw: &HardwareSpec,
    llm: &LlmClient,
    iteration: u32,
) -> Result<CoderOutput, LlmError> {
    let resp = llm.complete(&refine_request(task, previous, diagnosis, best, hw))?;
    Ok(extract(task, resp.text, iteration))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::agents::{BottleneckLabel, Evidence, Label, Verdict};
    use crate::llm::{RetryPolicy, ScriptStep, ScriptedProvider};
    use crate::metrics::MetricId;
    use crate::verifier::{Category, RunnerConfig, VerificationOutcome, VerifyStatus};

    fn task() -> TaskSpec {
        let json = r#"{"task_id": "gemm", "category": "matmul", "backend": "cpu",
            "description": "C = A * B for 512x512 f32", "runner": {"argv": ["r"]},
            "candidate_runner": {"argv": ["r", "{source_path}"]}}"#;
        let t = TaskSpec::from_json(json, std::path::Path::new(".")).unwrap();
        assert_eq!(t.runner, RunnerConfig::new(["r"]));
        t
    }

    fn hw() -> HardwareSpec {
        HardwareSpec::from_lscpu("CPU(s): 8\nL2 cache: 2 MiB (8 instances)\n").unwrap()
    }

    fn client(steps: Vec<ScriptStep>) -> LlmClient {
        LlmClient::new(Arc::new(ScriptedProvider::new(steps))).with_retry(RetryPolicy::immediate(1))
    }

    fn diagnosis(verdict: Verdict, excerpt: Option<&str>) -> Diagnosis {
        Diagnosis {
            verdict,
            bottlenecks: vec![BottleneckLabel {
                label: Label::BackendCoreBound,
                severity: 0.2,
                evidence: vec![Evidence {
                    metric: MetricId::known("cpu.backend_bound"),
                    value: 60.0,
                    threshold: 50.0,
                }],
            }],
            hints: vec!["Suggest loop refactor for better vectorization".into()],
            extra_metrics: vec![],
            rationale: "r".into(),
            error_excerpt: excerpt.map(String::from),
            fallback: false,
            warnings: vec![],
        }
    }

    fn best(source: &str, iteration: u32) -> BestRecord {
        BestRecord {
            candidate: CandidateKernel {
                iteration,
                source: source.into(),
                language: "cpp".into(),
                build_flags: vec![],
            },
            verification: VerificationOutcome::failed(VerifyStatus::RuntimeError, "placeholder"),
            profile: None,
            speedup: 2.93,
            achieved_at_iteration: iteration,
        }
    }

    fn prev() -> CandidateKernel {
        CandidateKernel {
            iteration: 3,
            source: "PREVIOUS_SOURCE".into(),
            language: "cpp".into(),
            build_flags: vec![],
        }
    }

    #[test]
    fn generate_prompt_has_task_interface_and_hardware() {
        let req = generate_request(&task(), &hw());
        assert_eq!(req.tag, PromptTag::CoderGenerate);
        assert_eq!(req.task.as_deref(), Some("gemm"));
        assert!(req.user_prompt.contains("C = A * B"));
        assert!(req.user_prompt.contains("Target: CPU"));
        assert!(req.user_prompt.contains("logical cores: 8"));
        assert!(req.system_prompt.contains("```cpp"));
    }

    #[test]
    fn last_matching_fence_is_extracted() {
        let llm = client(vec![ScriptStep::Reply(
            "first:\n```cpp\nint a;\n```\nbetter:\n```cpp\nint b;\n```\n```text\nnotes\n```".into(),
        )]);
        match generate(&task(), &hw(), &llm, 1).unwrap() {
            CoderOutput::Candidate(c) => {
                assert_eq!(c.source, "int b;");
                assert_eq!(c.iteration, 1);
                assert_eq!(c.language, "cpp");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_reply_is_no_code() {
        let llm = client(vec![ScriptStep::Reply("   ".into())]);
        assert!(matches!(generate(&task(), &hw(), &llm, 1).unwrap(), CoderOutput::NoCode { .. }));
    }

    #[test]
    fn refine_after_failure_carries_error_excerpt() {
        let d = diagnosis(Verdict::CorrectnessFailure, Some("kernel.cpp:7: error: 'vec' was not declared"));
        let req = refine_request(&task(), Some(&prev()), &d, None, &hw());
        assert_eq!(req.tag, PromptTag::CoderRefine);
        assert!(req.user_prompt.contains("'vec' was not declared"));
        assert!(req.user_prompt.contains("PREVIOUS_SOURCE"));
        assert!(req.user_prompt.contains("absent (no correct candidate yet)"));
    }

    #[test]
    fn refine_after_regression_includes_best_code() {
        let d = diagnosis(Verdict::Regression, None);
        let req = refine_request(&task(), Some(&prev()), &d, Some(&best("BEST_SOURCE", 1)), &hw());
        let p = &req.user_prompt;
        let best_at = p.find("## Historically best code").unwrap();
        assert!(p[best_at..].contains("BEST_SOURCE"));
        assert!(p.contains("1. Suggest loop refactor for better vectorization"));
        assert!(p.contains("Error excerpt:\nabsent"));
    }

    #[test]
    fn refine_after_improvement_shows_promoted_candidate() {
        let d = diagnosis(Verdict::Improvement, None);
        let promoted = best("PREVIOUS_SOURCE", 3);
        let req = refine_request(&task(), Some(&prev()), &d, Some(&promoted), &hw());
        let p = &req.user_prompt;
        let best_at = p.find("## Historically best code").unwrap();
        assert!(p[best_at..].contains("Iteration 3"));
        assert!(p[best_at..].contains("PREVIOUS_SOURCE"));
    }

    #[test]
    fn gpu_tasks_get_triton_instructions() {
        let mut t = task();
        t.backend = Backend::Gpu;
        t.category = Category::Activation;
        t.language = "python".into();
        let mut h = hw();
        h.backend = Backend::Gpu;
        let req = generate_request(&t, &h);
        assert!(req.user_prompt.contains("Triton"));
        assert!(req.system_prompt.contains("```python"));
    }
}
