//! LLM completion backend: providers, caching, replay, rate limiting,
//! retries and telemetry.

pub mod cache;
pub mod http;
pub mod json;
pub mod replay;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use cache::ResponseCache;
pub use http::{ChatCompletionProvider, ProviderConfig};
pub use json::{parse_json_object, JsonExtractError};
pub use replay::ReplayProvider;

use cache::{cache_key, CacheEntry, CachedRequest, CachedResponse};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {message}")]
    Provider { status: u16, message: String },
    #[error("no replay fixture for `{key}`")]
    MissingFixture { key: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("empty prompt for stage `{0}`")]
    EmptyPrompt(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Failure of a structured call: either the backend failed or the reply
/// could not be parsed even after the retry.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unparseable {tag} reply: {snippet}")]
    Unparseable { tag: String, snippet: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Pipeline stage name, e.g. `tf_tables`.
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(tag: impl Into<String>, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag: tag.into(),
        }
    }
}

/// Which example and which attempt a call belongs to.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub example: &'a str,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

pub trait Provider: Send + Sync {
    fn id(&self) -> &str;
    fn model(&self) -> &str;
    /// Deterministic providers report zero latency so traces stay
    /// byte-stable across runs.
    fn deterministic(&self) -> bool {
        false
    }
    fn complete(
        &self,
        req: &CompletionRequest,
        ctx: &CallContext<'_>,
    ) -> Result<ProviderReply, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

/// Token-bucket style limiter with a bucket of one: calls are spaced at
/// least `60s / rpm` apart.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn per_minute(rpm: u32) -> Self {
        RateLimiter {
            interval: Duration::from_secs(60) / rpm.max(1),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("limiter lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Per-stage counters kept in each run record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub calls: u64,
    pub errors: u64,
    pub prompt_chars: u64,
    pub response_chars: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

impl StageStats {
    fn add(&mut self, other: &StageStats) {
        self.calls += other.calls;
        self.errors += other.errors;
        self.prompt_chars += other.prompt_chars;
        self.response_chars += other.response_chars;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.latency_ms += other.latency_ms;
    }
}

/// Completion telemetry keyed by stage tag. Cache hits count as calls;
/// the provider/cache split lives in [`ClientStats`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Telemetry {
    pub stages: BTreeMap<String, StageStats>,
}

impl Telemetry {
    pub fn total_calls(&self) -> u64 {
        self.stages.values().map(|s| s.calls).sum()
    }

    pub fn calls(&self, tag: &str) -> u64 {
        self.stages.get(tag).map_or(0, |s| s.calls)
    }

    /// Calls whose tag starts with `prefix`.
    pub fn calls_with_prefix(&self, prefix: &str) -> u64 {
        self.stages
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, s)| s.calls)
            .sum()
    }

    pub fn merge(&mut self, other: &Telemetry) {
        for (tag, s) in &other.stages {
            self.stages.entry(tag.clone()).or_default().add(s);
        }
    }

    fn record(&mut self, tag: &str, prompt: &str, outcome: &Result<Completion, BackendError>) {
        let s = self.stages.entry(tag.to_string()).or_default();
        s.calls += 1;
        s.prompt_chars += prompt.chars().count() as u64;
        match outcome {
            Ok(c) => {
                s.response_chars += c.text.chars().count() as u64;
                s.prompt_tokens += c.prompt_tokens.unwrap_or(0);
                s.completion_tokens += c.completion_tokens.unwrap_or(0);
                s.latency_ms += c.latency_ms;
            }
            Err(_) => s.errors += 1,
        }
    }
}

/// Run-wide counters, including how many completions hit the provider.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub provider_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub failures: u64,
    pub telemetry: Telemetry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub cached: bool,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
}

/// One prompt/response exchange, kept in run traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub tag: String,
    pub attempt: u32,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Shared completion client. Safe to use from many worker threads.
pub struct LlmClient {
    provider: Arc<dyn Provider>,
    cache: Option<ResponseCache>,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
    temperature: f64,
    max_tokens: u32,
    stats: Mutex<ClientStats>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("provider", &self.provider.id())
            .field("model", &self.provider.model())
            .field("cache", &self.cache.as_ref().map(ResponseCache::dir))
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        LlmClient {
            provider,
            cache: None,
            limiter: None,
            retry: RetryPolicy::default(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            stats: Mutex::new(ClientStats::default()),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: Option<u32>) -> Self {
        self.limiter = requests_per_minute.map(RateLimiter::per_minute);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn model(&self) -> &str {
        self.provider.model()
    }

    pub fn stats(&self) -> ClientStats {
        self.stats.lock().expect("stats lock").clone()
    }

    /// Starts a per-example session that keeps its own telemetry and
    /// transcript.
    pub fn session(&self, example: impl Into<String>) -> Session<'_> {
        Session {
            client: self,
            example: example.into(),
            telemetry: Telemetry::default(),
            transcript: Vec::new(),
        }
    }

    /// Serves `req` from cache or the provider.
    pub fn complete(
        &self,
        req: &CompletionRequest,
        ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError> {
        let outcome = self.complete_inner(req, ctx);
        let mut stats = self.stats.lock().expect("stats lock");
        match &outcome {
            Ok(c) if c.cached => stats.cache_hits += 1,
            Ok(_) => stats.provider_calls += 1,
            Err(_) => stats.failures += 1,
        }
        stats.telemetry.record(&req.tag, &req.prompt, &outcome);
        outcome
    }

    fn complete_inner(
        &self,
        req: &CompletionRequest,
        ctx: &CallContext<'_>,
    ) -> Result<Completion, BackendError> {
        if req.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt(req.tag.clone()));
        }
        let key = cache_key(self.provider.id(), self.provider.model(), req, ctx.attempt);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(Completion {
                text: hit.response.text,
                cached: true,
                prompt_tokens: hit.response.prompt_tokens,
                completion_tokens: hit.response.completion_tokens,
                latency_ms: hit.response.latency_ms,
            });
        }

        let mut attempt = 0;
        let (reply, latency_ms) = loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let started = Instant::now();
            match self.provider.complete(req, ctx) {
                Ok(reply) => {
                    let ms = if self.provider.deterministic() {
                        0
                    } else {
                        started.elapsed().as_millis() as u64
                    };
                    break (reply, ms);
                }
                Err(e) if e.retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!(
                        "{} call for {} failed ({e}); retrying in {delay} ms",
                        req.tag,
                        ctx.example
                    );
                    self.stats.lock().expect("stats lock").retries += 1;
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };

        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                key,
                request: CachedRequest {
                    provider: self.provider.id().to_string(),
                    model: self.provider.model().to_string(),
                    temperature: req.temperature,
                    max_tokens: req.max_tokens,
                    attempt: ctx.attempt,
                    tag: req.tag.clone(),
                    prompt: req.prompt.clone(),
                },
                response: CachedResponse {
                    text: reply.text.clone(),
                    prompt_tokens: reply.prompt_tokens,
                    completion_tokens: reply.completion_tokens,
                    latency_ms,
                },
                created_at: chrono::Utc::now().to_rfc3339(),
            })?;
        }
        Ok(Completion {
            text: reply.text,
            cached: false,
            prompt_tokens: reply.prompt_tokens,
            completion_tokens: reply.completion_tokens,
            latency_ms,
        })
    }
}

/// Per-example view of the client.
#[derive(Debug)]
pub struct Session<'c> {
    client: &'c LlmClient,
    example: String,
    telemetry: Telemetry,
    transcript: Vec<Exchange>,
}

impl<'c> Session<'c> {
    pub fn example(&self) -> &str {
        &self.example
    }

    /// First attempt for a stage.
    pub fn complete(&mut self, tag: &str, prompt: &str) -> Result<Completion, BackendError> {
        self.complete_attempt(tag, prompt, 0)
    }

    pub fn complete_attempt(
        &mut self,
        tag: &str,
        prompt: &str,
        attempt: u32,
    ) -> Result<Completion, BackendError> {
        let req = CompletionRequest {
            prompt: prompt.to_string(),
            temperature: self.client.temperature,
            max_tokens: self.client.max_tokens,
            tag: tag.to_string(),
        };
        let ctx = CallContext {
            example: &self.example,
            attempt,
        };
        let outcome = self.client.complete(&req, &ctx);
        self.telemetry.record(tag, prompt, &outcome);
        self.transcript.push(Exchange {
            tag: tag.to_string(),
            attempt,
            prompt: prompt.to_string(),
            response: outcome.as_ref().ok().map(|c| c.text.clone()),
            error: outcome.as_ref().err().map(ToString::to_string),
        });
        outcome
    }

    /// Asks for a structured answer. An unparseable reply gets one retry
    /// (attempt 1, same temperature) before giving up.
    pub fn complete_parsed<T>(
        &mut self,
        tag: &str,
        prompt: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, CallError> {
        let mut last = String::new();
        for attempt in 0..2 {
            let reply = self.complete_attempt(tag, prompt, attempt)?;
            if let Some(v) = parse(&reply.text) {
                return Ok(v);
            }
            log::debug!("{tag} for {}: unparseable reply on attempt {attempt}", self.example);
            last = reply.text;
        }
        Err(CallError::Unparseable {
            tag: tag.to_string(),
            snippet: last.chars().take(80).collect(),
        })
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    pub fn transcript(&self) -> &[Exchange] {
        &self.transcript
    }

    pub fn into_parts(self) -> (Telemetry, Vec<Exchange>) {
        (self.telemetry, self.transcript)
    }
}
