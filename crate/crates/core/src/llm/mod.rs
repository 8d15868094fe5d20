//! Pluggable LLM access for the Coder, the Conductor and the compendium
//! builder.
//!
//! [`LlmClient`] wraps a provider with retry/backoff, a concurrency cap and an
//! append-only transcript. Three providers ship: an OpenAI-compatible HTTP
//! client, a transcript replayer for deterministic re-runs, and a scripted
//! provider for tests.

mod extract;
mod providers;
mod transcript;

pub use extract::{extract_code, parse_json_reply, ExtractError};
pub use providers::{
    FnProvider, HttpConfig, HttpProvider, ReplayProvider, ScriptStep, ScriptedProvider,
};
pub use transcript::{read_transcript, TranscriptRecord, TranscriptWriter};

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::sha256_hex;

/// Purpose of a request; also the replay key namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTag {
    CoderGenerate,
    CoderRefine,
    Conductor,
    Compendium,
}

impl PromptTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptTag::CoderGenerate => "coder_generate",
            PromptTag::CoderRefine => "coder_refine",
            PromptTag::Conductor => "conductor",
            PromptTag::Compendium => "compendium",
        }
    }

    pub fn default_temperature(self) -> f64 {
        match self {
            PromptTag::CoderGenerate | PromptTag::CoderRefine => 0.6,
            PromptTag::Conductor | PromptTag::Compendium => 0.2,
        }
    }

    pub fn is_coder(self) -> bool {
        matches!(self, PromptTag::CoderGenerate | PromptTag::CoderRefine)
    }
}

impl fmt::Display for PromptTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: PromptTag,
    /// Task the request belongs to; scopes unhashed replay records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

impl ChatRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 16_384;

    pub fn new(tag: PromptTag, system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: tag.default_temperature(),
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            tag,
            task: None,
        }
    }

    pub fn for_task(mut self, task: impl Into<String>) -> Self {
        self.task = Some(task.into());
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        let needs_prompts = self.tag.is_coder() || self.tag == PromptTag::Conductor;
        if needs_prompts
            && (self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty())
        {
            return Err(LlmError::InvalidRequest(format!(
                "{} requests need non-empty system and user prompts",
                self.tag
            )));
        }
        Ok(())
    }

    /// Stable key over the request content used for replay lookup.
    pub fn request_hash(&self) -> String {
        sha256_hex(&[
            self.tag.as_str().as_bytes(),
            self.system_prompt.as_bytes(),
            self.user_prompt.as_bytes(),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub provider: String,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_counts: Option<TokenCounts>,
}

/// Failure reported by a provider for a single send.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    /// Worth retrying (transport error, 5xx, rate limit).
    #[error("transient provider error: {0}")]
    Transient(String),
    /// Retrying cannot help (bad credentials, malformed request, missing replay record).
    #[error("provider configuration error: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider {provider} unavailable after {attempts} attempt(s): {last_error}")]
    ProviderUnavailable {
        provider: String,
        attempts: u32,
        last_error: String,
    },
    #[error("provider {provider} rejected the request: {message}")]
    Configuration { provider: String, message: String },
    #[error("transcript error: {0}")]
    Transcript(#[from] std::io::Error),
}

/// A text-completion backend.
pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total sends per request, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Default)]
pub struct ClientStats {
    completed: AtomicU64,
    sends: AtomicU64,
    retries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    /// Requests that produced a response.
    pub completed: u64,
    /// Provider sends, including retries.
    pub sends: u64,
    pub retries: u64,
}

/// Counting semaphore capping in-flight requests.
#[derive(Debug)]
struct ConcurrencyLimit {
    free: Mutex<usize>,
    cv: Condvar,
}

impl ConcurrencyLimit {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limit lock");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a ConcurrencyLimit);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limit lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Provider plus retry policy, transcript and concurrency cap. Cheap to clone.
#[derive(Clone)]
pub struct LlmClient {
    provider: Arc<dyn LlmProvider>,
    retry: RetryPolicy,
    transcript: Option<Arc<TranscriptWriter>>,
    limit: Option<Arc<ConcurrencyLimit>>,
    stats: Arc<ClientStats>,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        LlmClient {
            provider,
            retry: RetryPolicy::default(),
            transcript: None,
            limit: None,
            stats: Arc::new(ClientStats::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_transcript(mut self, writer: Arc<TranscriptWriter>) -> Self {
        self.transcript = Some(writer);
        self
    }

    /// Appends to `<path>` (created if missing).
    pub fn with_transcript_file(self, path: &Path) -> Result<Self, LlmError> {
        Ok(self.with_transcript(Arc::new(TranscriptWriter::open(path)?)))
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.limit = Some(Arc::new(ConcurrencyLimit {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }));
        self
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            completed: self.stats.completed.load(Ordering::SeqCst),
            sends: self.stats.sends.load(Ordering::SeqCst),
            retries: self.stats.retries.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let _permit = self.limit.as_ref().map(|l| l.acquire());
        let max = self.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=max {
            if attempt > 1 {
                self.stats.retries.fetch_add(1, Ordering::SeqCst);
                let delay = self.retry.delay(attempt - 1);
                tracing::warn!(
                    provider = self.provider.name(),
                    tag = %request.tag,
                    attempt,
                    error = %last_error,
                    "retrying LLM request"
                );
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            self.stats.sends.fetch_add(1, Ordering::SeqCst);
            let started = Instant::now();
            match self.provider.send(request) {
                Ok(mut response) => {
                    if response.latency_ms == 0.0 {
                        response.latency_ms = started.elapsed().as_secs_f64() * 1e3;
                    }
                    if let Some(t) = &self.transcript {
                        t.append(&TranscriptRecord::from_exchange(request, &response.text))?;
                    }
                    self.stats.completed.fetch_add(1, Ordering::SeqCst);
                    return Ok(response);
                }
                Err(ProviderError::Transient(msg)) => last_error = msg,
                Err(ProviderError::Fatal(message)) => {
                    return Err(LlmError::Configuration {
                        provider: self.provider.name().to_string(),
                        message,
                    })
                }
            }
        }
        Err(LlmError::ProviderUnavailable {
            provider: self.provider.name().to_string(),
            attempts: max,
            last_error,
        })
    }
}

/// Provider selection as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "kebab-case")]
pub enum ProviderConfig {
    HttpOpenaiCompatible(HttpConfig),
    Replay { transcript: std::path::PathBuf },
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn LlmProvider>, LlmError> {
        Ok(match self {
            ProviderConfig::HttpOpenaiCompatible(cfg) => Arc::new(HttpProvider::new(cfg.clone())),
            ProviderConfig::Replay { transcript } => Arc::new(ReplayProvider::from_file(transcript)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ChatRequest {
        ChatRequest::new(PromptTag::Conductor, "sys", "user")
    }

    #[test]
    fn retries_then_succeeds() {
        let provider = Arc::new(ScriptedProvider::new(vec![
            ScriptStep::Transient("503".into()),
            ScriptStep::Transient("503".into()),
            ScriptStep::Reply("ok".into()),
        ]));
        let client = LlmClient::new(provider).with_retry(RetryPolicy::immediate(3));
        let resp = client.complete(&req()).unwrap();
        assert_eq!(resp.text, "ok");
        let stats = client.stats();
        assert_eq!(stats.retries, 2);
        assert_eq!(stats.sends, 3);
        assert_eq!(stats.completed, 1);
    }

    #[test]
    fn exhausted_budget_is_provider_unavailable() {
        let provider = Arc::new(ScriptedProvider::new(vec![ScriptStep::Transient("down".into())]));
        let client = LlmClient::new(provider).with_retry(RetryPolicy::immediate(1));
        match client.complete(&req()) {
            Err(LlmError::ProviderUnavailable { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let provider = Arc::new(ScriptedProvider::new(vec![
            ScriptStep::Fatal("401".into()),
            ScriptStep::Reply("never".into()),
        ]));
        let client = LlmClient::new(provider).with_retry(RetryPolicy::immediate(5));
        assert!(matches!(client.complete(&req()), Err(LlmError::Configuration { .. })));
        assert_eq!(client.stats().sends, 1);
    }

    #[test]
    fn request_validation() {
        let mut r = req();
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        let empty = ChatRequest::new(PromptTag::CoderGenerate, "", "x");
        assert!(empty.validate().is_err());
        // Compendium prompts may leave the system prompt empty.
        assert!(ChatRequest::new(PromptTag::Compendium, "", "x").validate().is_ok());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(350));
        assert_eq!(p.delay(40), Duration::from_millis(350));
    }

    #[test]
    fn tag_defaults() {
        assert_eq!(ChatRequest::new(PromptTag::CoderRefine, "a", "b").temperature, 0.6);
        assert_eq!(req().temperature, 0.2);
    }

    #[test]
    fn request_hash_ignores_sampling_settings() {
        let a = req();
        let mut b = req();
        b.temperature = 0.0;
        assert_eq!(a.request_hash(), b.request_hash());
        let c = ChatRequest::new(PromptTag::CoderRefine, "sys", "user");
        assert_ne!(a.request_hash(), c.request_hash());
    }

    #[test]
    fn provider_config_json() {
        let cfg: ProviderConfig = serde_json::from_str(
            r#"{"provider":"http-openai-compatible","endpoint":"http://localhost:1/v1","model":"m","key_env":"LLM_API_KEY"}"#,
        )
        .unwrap();
        match cfg {
            ProviderConfig::HttpOpenaiCompatible(h) => assert_eq!(h.key_env.as_deref(), Some("LLM_API_KEY")),
            _ => panic!(),
        }
    }
}
