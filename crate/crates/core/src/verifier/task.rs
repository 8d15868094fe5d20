use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kstn::Tolerance;
use crate::metrics::{Backend, Statistic};

/// `{source_path}` value handed to the reference runner.
pub const REFERENCE_SENTINEL: &str = "@reference";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("task {task}: {reason}")]
    Invalid { task: String, reason: String },
    #[error("duplicate task id {0}")]
    Duplicate(String),
    #[error("no task files (*.json) in {0}")]
    Empty(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Matmul,
    Activation,
    Normalization,
    PoolingReduction,
    Conv,
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Matmul,
        Category::Activation,
        Category::Normalization,
        Category::PoolingReduction,
        Category::Conv,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Matmul => "matmul",
            Category::Activation => "activation",
            Category::Normalization => "normalization",
            Category::PoolingReduction => "pooling_reduction",
            Category::Conv => "conv",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerConfig {
    /// Template with `{source_path}`, `{output_path}`, `{timing_path}`, `{mode}`,
    /// `{workdir}`, `{task_dir}`, `{warmup}`, `{reps}`, `{seed}`, `{language}`
    /// and `{build_flags}` placeholders.
    pub argv: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build_argv: Option<Vec<String>>,
    #[serde(default = "RunnerConfig::default_timeout")]
    pub timeout_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
}

impl RunnerConfig {
    fn default_timeout() -> f64 {
        120.0
    }

    pub fn new<I, S>(argv: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RunnerConfig {
            argv: argv.into_iter().map(Into::into).collect(),
            build_argv: None,
            timeout_s: Self::default_timeout(),
            env: BTreeMap::new(),
        }
    }
}

fn default_max_attempts() -> u32 {
    15
}
fn default_warmup() -> u32 {
    5
}
fn default_reps() -> u32 {
    100
}
fn default_language() -> String {
    "cpp".into()
}

/// One optimization problem, stored as `tasks/<task_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub category: Category,
    pub backend: Backend,
    /// Problem statement handed to the Coder.
    pub description: String,
    /// Reference runner; invoked with `{source_path}` = `@reference`.
    pub runner: RunnerConfig,
    #[serde(alias = "candidate_runner_template")]
    pub candidate_runner: RunnerConfig,
    #[serde(default)]
    pub tolerance: Tolerance,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// Input-generation seed passed to both runners.
    #[serde(default)]
    pub seed: u64,
    /// Language the Coder writes; also the code-fence hint.
    #[serde(default = "default_language")]
    pub language: String,
    #[serde(default = "default_warmup")]
    pub warmup: u32,
    #[serde(default = "default_reps")]
    pub reps: u32,
    #[serde(default)]
    pub statistic: Statistic,
    /// Directory the spec was loaded from; `{task_dir}` in templates.
    #[serde(skip)]
    pub task_dir: PathBuf,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |reason: String| {
            Err(TaskError::Invalid {
                task: self.task_id.clone(),
                reason,
            })
        };
        if self.task_id.is_empty()
            || !self
                .task_id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
            || self.task_id.starts_with('.')
        {
            return bad("task_id must be non-empty and use only [A-Za-z0-9._-]".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if !(self.tolerance.atol >= 0.0) || !(self.tolerance.rtol >= 0.0) {
            return bad("tolerances must be non-negative".into());
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        for (name, r) in [("runner", &self.runner), ("candidate_runner", &self.candidate_runner)] {
            if r.argv.is_empty() {
                return bad(format!("{name}.argv is empty"));
            }
            if !(r.timeout_s > 0.0) || !r.timeout_s.is_finite() {
                return bad(format!("{name}.timeout_s must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, task_dir: &Path) -> Result<Self, serde_json::Error> {
        let mut spec: TaskSpec = serde_json::from_str(text)?;
        spec.task_dir = task_dir.to_path_buf();
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let dir = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
        let spec = Self::from_json(&text, &dir).map_err(|source| TaskError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Loads every `*.json` in `dir`, sorted by task id.
    pub fn load_dir(dir: &Path) -> Result<Vec<TaskSpec>, TaskError> {
        let entries = fs::read_dir(dir).map_err(|source| TaskError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut tasks = Vec::new();
        for entry in entries {
            let path = entry
                .map_err(|source| TaskError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?
                .path();
            if path.extension().is_some_and(|e| e == "json") && path.is_file() {
                tasks.push(Self::load(&path)?);
            }
        }
        if tasks.is_empty() {
            return Err(TaskError::Empty(dir.to_path_buf()));
        }
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        for pair in tasks.windows(2) {
            if pair[0].task_id == pair[1].task_id {
                return Err(TaskError::Duplicate(pair[0].task_id.clone()));
            }
        }
        Ok(tasks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "task_id": "vec_add",
        "category": "activation",
        "backend": "cpu",
        "description": "add two vectors",
        "runner": {"argv": ["run", "{mode}"]},
        "candidate_runner_template": {"argv": ["run", "{mode}", "{source_path}"]}
    }"#;

    #[test]
    fn defaults_apply() {
        let t = TaskSpec::from_json(MINIMAL, Path::new("/t")).unwrap();
        assert_eq!(t.max_attempts, 15);
        assert_eq!((t.warmup, t.reps), (5, 100));
        assert_eq!(t.tolerance, Tolerance::new(1e-4, 1e-4));
        assert_eq!(t.statistic, Statistic::Median);
        assert_eq!(t.runner.timeout_s, 120.0);
        t.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut t = TaskSpec::from_json(MINIMAL, Path::new("/t")).unwrap();
        t.max_attempts = 0;
        assert!(t.validate().is_err());
        let mut t = TaskSpec::from_json(MINIMAL, Path::new("/t")).unwrap();
        t.task_id = "../escape".into();
        assert!(t.validate().is_err());
        let mut t = TaskSpec::from_json(MINIMAL, Path::new("/t")).unwrap();
        t.tolerance.atol = -1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn category_names_roundtrip() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
    }
}
