use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::transcript::{read_transcript, TranscriptRecord};
use super::{ChatRequest, ChatResponse, LlmError, LlmProvider, ProviderError, TokenCounts};

fn reply(provider: &str, text: String) -> ChatResponse {
    ChatResponse {
        text,
        provider: provider.to_string(),
        latency_ms: 0.0,
        token_counts: None,
    }
}

/// Serves responses from a recorded transcript.
///
/// Records carrying a `request_hash` are served only for an identical request.
/// Records without one are served in file order to requests with the same tag
/// (and task, when the record names one). Each record is served once.
pub struct ReplayProvider {
    records: Vec<TranscriptRecord>,
    used: Mutex<Vec<bool>>,
}

impl ReplayProvider {
    pub fn new(records: Vec<TranscriptRecord>) -> Self {
        let used = Mutex::new(vec![false; records.len()]);
        ReplayProvider { records, used }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(read_transcript(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.used.lock().expect("replay lock").iter().filter(|u| !**u).count()
    }
}

impl LlmProvider for ReplayProvider {
    fn name(&self) -> &str {
        "replay"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let hash = request.request_hash();
        let mut used = self.used.lock().expect("replay lock");
        let free = |i: &usize| !used[*i];
        let hashed = (0..self.records.len()).filter(free).find(|&i| {
            let r = &self.records[i];
            r.tag == request.tag && r.request_hash.as_deref() == Some(hash.as_str())
        });
        let idx = hashed.or_else(|| {
            (0..self.records.len()).filter(free).find(|&i| {
                let r = &self.records[i];
                r.tag == request.tag
                    && r.request_hash.is_none()
                    && (r.task.is_none() || r.task == request.task)
            })
        });
        match idx {
            Some(i) => {
                used[i] = true;
                Ok(reply("replay", self.records[i].response.clone()))
            }
            None => Err(ProviderError::Fatal(format!(
                "no recorded response for {} request {}{}",
                request.tag,
                &hash[..12],
                request.task.as_deref().map(|t| format!(" (task {t})")).unwrap_or_default()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptStep {
    Reply(String),
    Transient(String),
    Fatal(String),
}

/// Plays back a fixed sequence of outcomes and records every request.
///
/// The last step repeats once the script is exhausted.
pub struct ScriptedProvider {
    steps: Mutex<VecDeque<ScriptStep>>,
    last: Mutex<Option<ScriptStep>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedProvider {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        ScriptedProvider {
            steps: Mutex::new(steps.into()),
            last: Mutex::new(None),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn replies<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(texts.into_iter().map(|t| ScriptStep::Reply(t.into())).collect())
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("script lock").clone()
    }
}

impl LlmProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.seen.lock().expect("script lock").push(request.clone());
        let step = {
            let mut steps = self.steps.lock().expect("script lock");
            let mut last = self.last.lock().expect("script lock");
            if let Some(s) = steps.pop_front() {
                *last = Some(s.clone());
                s
            } else {
                last.clone()
                    .ok_or_else(|| ProviderError::Fatal("empty script".into()))?
            }
        };
        match step {
            ScriptStep::Reply(t) => Ok(reply("scripted", t)),
            ScriptStep::Transient(e) => Err(ProviderError::Transient(e)),
            ScriptStep::Fatal(e) => Err(ProviderError::Fatal(e)),
        }
    }
}

type ResponderFn = dyn Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync;

/// Provider backed by a closure; handy when the reply depends on the prompt.
pub struct FnProvider {
    name: String,
    f: Box<ResponderFn>,
}

impl FnProvider {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    {
        FnProvider {
            name: name.into(),
            f: Box::new(f),
        }
    }
}

impl LlmProvider for FnProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (self.f)(request).map(|t| reply(&self.name, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL; `/chat/completions` is appended unless already present.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token. Read per request, never stored.
    #[serde(default)]
    pub key_env: Option<String>,
    #[serde(default = "default_http_timeout")]
    pub timeout_s: u64,
}

fn default_http_timeout() -> u64 {
    300
}

/// OpenAI-compatible `chat/completions` client.
pub struct HttpProvider {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider { config, agent }
    }

    fn url(&self) -> String {
        let base = self.config.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

impl LlmProvider for HttpProvider {
    fn name(&self) -> &str {
        "http-openai-compatible"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": request.user_prompt}));
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });

        let mut call = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(var) = &self.config.key_env {
            let key = std::env::var(var)
                .map_err(|_| ProviderError::Fatal(format!("environment variable {var} is not set")))?;
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let started = Instant::now();
        let mut resp = call
            .send_json(&body)
            .map_err(|e| ProviderError::Transient(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;

        if status == 429 || status >= 500 {
            return Err(ProviderError::Transient(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !(200..300).contains(&status) {
            return Err(ProviderError::Fatal(format!("HTTP {status}: {}", snippet(&text))));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Transient(format!("malformed response body: {e}")))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::Transient("response has no choices[0].message.content".into()))?;
        let token_counts = value.get("usage").and_then(|u| {
            Some(TokenCounts {
                prompt: u.get("prompt_tokens")?.as_u64()?,
                completion: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(ChatResponse {
            text: content.to_string(),
            provider: self.name().to_string(),
            latency_ms,
            token_counts,
        })
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}
