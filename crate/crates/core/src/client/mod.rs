//! OpenAI-compatible chat completion client with a content-addressed cache,
//! retries with exponential backoff, request pacing and continuation scoring.

mod cache;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

use crate::digest::canonical_digest;
use crate::model::{Decoding, ModelSpec};

pub use cache::{Cache, CacheEntry, CachedResponse};

/// Environment variables consulted for the API key, in order.
pub const API_KEY_ENV: [&str; 2] = ["COTMED_API_KEY", "OPENAI_API_KEY"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: ModelSpec,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub want_logprobs: bool,
    /// Continuation to score instead of generating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_scoring: Option<String>,
    /// Distinguishes repeated samples of the same prompt.
    #[serde(default)]
    pub sample: u32,
}

impl CompletionRequest {
    pub fn new(model: ModelSpec, messages: Vec<ChatMessage>) -> Self {
        Self {
            model,
            messages,
            want_logprobs: false,
            echo_scoring: None,
            sample: 0,
        }
    }

    pub fn with_sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.messages.is_empty() {
            return Err(ClientError::InvalidRequest("messages must be non-empty".into()));
        }
        if self.echo_scoring.is_some() && !self.want_logprobs {
            return Err(ClientError::InvalidRequest(
                "echo_scoring requires want_logprobs".into(),
            ));
        }
        self.model
            .validate()
            .map_err(|e| ClientError::InvalidRequest(e.to_string()))
    }

    fn wire_seed(&self) -> Option<u64> {
        match self.model.decoding.seed {
            Some(s) => Some(s.wrapping_add(self.sample as u64)),
            None if self.model.is_deterministic() => Some(0),
            None => None,
        }
    }
}

/// The fields that identify a request for caching. The endpoint URL is left
/// out so a cache stays valid when the same model is served elsewhere.
#[derive(Serialize)]
struct CacheKeyView<'a> {
    model_id: &'a str,
    decoding: &'a Decoding,
    messages: &'a [ChatMessage],
    want_logprobs: bool,
    echo_scoring: Option<&'a str>,
    sample: u32,
}

/// SHA-256 of the canonical (sorted-key) serialization of the request.
/// Message text is hashed verbatim.
pub fn cache_key(request: &CompletionRequest) -> String {
    canonical_digest(&CacheKeyView {
        model_id: &request.model.model_id,
        decoding: &request.model.decoding,
        messages: &request.messages,
        want_logprobs: request.want_logprobs,
        echo_scoring: request.echo_scoring.as_deref(),
        sample: request.sample,
    })
    .expect("request serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_logprob: Option<f64>,
    pub usage: Usage,
    pub cache_hit: bool,
    pub request_digest: String,
    /// HTTP attempts spent on this call; 0 for cache hits.
    pub attempts: u32,
}

impl Completion {
    fn from_cached(entry: CacheEntry) -> Self {
        Completion {
            text: entry.response.text,
            token_logprobs: entry.response.token_logprobs,
            total_logprob: entry.response.total_logprob,
            usage: entry.response.usage,
            cache_hit: true,
            request_digest: entry.digest,
            attempts: 0,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint cannot score continuations: {0}")]
    UnsupportedCapability(String),
    #[error("offline mode: no cached response for request {0}")]
    Offline(String),
    #[error("cache write failed: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub cache_dir: Option<PathBuf>,
    /// Serve from the cache only; a miss is an error.
    pub offline: bool,
    /// Request pacing shared by all callers of one client.
    pub requests_per_second: Option<f64>,
    /// Separate endpoint for continuation scoring; defaults to the model's.
    pub scoring_url: Option<String>,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            backoff_base_ms: 500,
            backoff_factor: 2.0,
            max_retries: 5,
            timeout_secs: 120,
            cache_dir: None,
            offline: false,
            requests_per_second: None,
            scoring_url: None,
            api_key: None,
        }
    }
}

impl ClientConfig {
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.backoff_base_ms as f64 * self.backoff_factor.powi(retry as i32);
        Duration::from_millis(ms.min(3_600_000.0) as u64)
    }
}

/// Minimum-interval pacer: one request per `interval`, shared across tasks.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_second: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / per_second.max(1e-6)),
            next: Mutex::new(Instant::now()),
        }
    }

    async fn acquire(&self) {
        let wait_until = {
            let mut next = self.next.lock().await;
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot
        };
        tokio::time::sleep_until(wait_until).await;
    }
}

#[derive(Debug, Default)]
struct Counters {
    network_attempts: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub network_attempts: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    config: ClientConfig,
    cache: Option<Cache>,
    limiter: Option<Arc<RateLimiter>>,
    /// Bounds outstanding HTTP requests across every caller of this client.
    in_flight: Arc<Semaphore>,
    counters: Arc<Counters>,
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fail(ClientError),
}

fn is_local(endpoint: &str) -> bool {
    reqwest::Url::parse(endpoint)
        .ok()
        .and_then(|u| u.host_str().map(str::to_string))
        .is_some_and(|h| h == "localhost" || h == "127.0.0.1" || h == "[::1]" || h == "::1")
}

impl Client {
    pub fn new(mut config: ClientConfig) -> Result<Self, ClientError> {
        if config.api_key.is_none() {
            config.api_key = API_KEY_ENV
                .iter()
                .find_map(|k| std::env::var(k).ok().filter(|v| !v.is_empty()));
        }
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| ClientError::InvalidRequest(e.to_string()))?;
        let cache = config.cache_dir.clone().map(Cache::new);
        let limiter = config
            .requests_per_second
            .map(|r| Arc::new(RateLimiter::new(r)));
        let in_flight = Arc::new(Semaphore::new(config.max_in_flight.max(1)));
        Ok(Self {
            http,
            config,
            cache,
            limiter,
            in_flight,
            counters: Arc::default(),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&Cache> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            network_attempts: self.counters.network_attempts.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.counters.cache_misses.load(Ordering::SeqCst),
        }
    }

    /// Returns the cached completion when present, otherwise calls the
    /// endpoint (retrying 429/5xx/transport failures) and stores the result.
    pub async fn complete(&self, request: &CompletionRequest) -> Result<Completion, ClientError> {
        request.validate()?;
        let digest = cache_key(request);
        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&digest)) {
            self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(Completion::from_cached(entry));
        }
        self.counters.cache_misses.fetch_add(1, Ordering::SeqCst);
        if self.config.offline {
            return Err(ClientError::Offline(digest));
        }
        let (url, body) = match &request.echo_scoring {
            Some(continuation) => (
                self.scoring_url(&request.model),
                json!({
                    "model": request.model.model_id,
                    "messages": request.messages,
                    "continuation": continuation,
                }),
            ),
            None => (
                format!("{}/chat/completions", request.model.endpoint.trim_end_matches('/')),
                self.chat_body(request),
            ),
        };
        let key = self.api_key_for(&request.model.endpoint)?;
        let (value, attempts) = self
            .send_with_retries(&url, &body, key.as_deref(), request.echo_scoring.is_some())
            .await?;
        let response = match &request.echo_scoring {
            Some(_) => parse_score_response(&value)?,
            None => parse_chat_response(&value, request.want_logprobs)?,
        };
        let response = match &request.echo_scoring {
            Some(continuation) => CachedResponse {
                text: continuation.clone(),
                ..response
            },
            None => response,
        };
        if let Some(cache) = &self.cache {
            cache
                .put(&CacheEntry {
                    digest: digest.clone(),
                    request: request.clone(),
                    response: response.clone(),
                })
                .map_err(|e| ClientError::Cache(e.to_string()))?;
        }
        Ok(Completion {
            text: response.text,
            token_logprobs: response.token_logprobs,
            total_logprob: response.total_logprob,
            usage: response.usage,
            cache_hit: false,
            request_digest: digest,
            attempts,
        })
    }

    /// Sum of the continuation's token log-probabilities given `context`.
    pub async fn score_continuation(
        &self,
        context: Vec<ChatMessage>,
        continuation: &str,
        model: &ModelSpec,
    ) -> Result<f64, ClientError> {
        Ok(self.score_tokens(context, continuation, model).await?.iter().sum())
    }

    /// Per-token log-probabilities of `continuation`; empty for an empty
    /// continuation.
    pub async fn score_tokens(
        &self,
        context: Vec<ChatMessage>,
        continuation: &str,
        model: &ModelSpec,
    ) -> Result<Vec<f64>, ClientError> {
        if continuation.is_empty() {
            return Ok(Vec::new());
        }
        let request = CompletionRequest {
            model: model.clone(),
            messages: context,
            want_logprobs: true,
            echo_scoring: Some(continuation.to_string()),
            sample: 0,
        };
        let completion = self.complete(&request).await?;
        completion
            .token_logprobs
            .map(|toks| toks.iter().map(|t| t.logprob).collect())
            .ok_or_else(|| ClientError::Malformed("scoring response without log-probabilities".into()))
    }

    /// Runs requests with at most `max_in_flight` outstanding (and never more
    /// than the client-wide bound); results keep input order and failures
    /// stay in place.
    pub async fn batch_complete(
        &self,
        requests: &[CompletionRequest],
        max_in_flight: usize,
    ) -> Vec<Result<Completion, ClientError>> {
        stream::iter(requests.iter().map(|r| self.complete(r)))
            .buffered(max_in_flight.max(1))
            .collect()
            .await
    }

    fn scoring_url(&self, model: &ModelSpec) -> String {
        let base = self
            .config
            .scoring_url
            .as_deref()
            .unwrap_or(&model.endpoint)
            .trim_end_matches('/');
        format!("{base}/score")
    }

    fn chat_body(&self, request: &CompletionRequest) -> Value {
        let d = &request.model.decoding;
        let mut body = json!({
            "model": request.model.model_id,
            "messages": request.messages,
            "temperature": d.temperature,
            "max_tokens": d.max_tokens,
            "top_p": d.top_p,
            "n": 1,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
        }
        if let Some(seed) = request.wire_seed() {
            body["seed"] = json!(seed);
        }
        body
    }

    fn api_key_for(&self, endpoint: &str) -> Result<Option<String>, ClientError> {
        match &self.config.api_key {
            Some(k) => Ok(Some(k.clone())),
            None if is_local(endpoint) => Ok(None),
            None => Err(ClientError::Auth(format!(
                "no API key for {endpoint}; set {}",
                API_KEY_ENV[0]
            ))),
        }
    }

    async fn send_with_retries(
        &self,
        url: &str,
        body: &Value,
        key: Option<&str>,
        scoring: bool,
    ) -> Result<(Value, u32), ClientError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            if let Some(l) = &self.limiter {
                l.acquire().await;
            }
            let outcome = {
                let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
                self.counters.network_attempts.fetch_add(1, Ordering::SeqCst);
                self.attempt(url, body, key, scoring).await
            };
            match outcome {
                Attempt::Done(v) => return Ok((v, attempts)),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(reason) => {
                    let retry = attempts - 1;
                    if retry >= self.config.max_retries {
                        return Err(ClientError::Exhausted {
                            attempts,
                            last: reason,
                        });
                    }
                    log::debug!("attempt {attempts} on {url} failed: {reason}; retrying");
                    tokio::time::sleep(self.config.backoff(retry)).await;
                }
            }
        }
    }

    async fn attempt(&self, url: &str, body: &Value, key: Option<&str>, scoring: bool) -> Attempt {
        let mut req = self.http.post(url).json(body);
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                return Attempt::Retry(e.to_string())
            }
            Err(e) => return Attempt::Fail(ClientError::Malformed(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(ClientError::Malformed(e.to_string())),
            },
            401 | 403 => Attempt::Fail(ClientError::Auth(format!("HTTP {status}: {text}"))),
            404 | 405 | 501 if scoring => {
                Attempt::Fail(ClientError::UnsupportedCapability(format!("HTTP {status} from {url}")))
            }
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fail(ClientError::Endpoint { status, body: text }),
        }
    }
}

fn parse_logprob_list(items: &[Value]) -> Result<Vec<TokenLogprob>, ClientError> {
    items
        .iter()
        .map(|t| {
            Ok(TokenLogprob {
                token: t["token"].as_str().unwrap_or_default().to_string(),
                logprob: t["logprob"]
                    .as_f64()
                    .ok_or_else(|| ClientError::Malformed("token without logprob".into()))?,
            })
        })
        .collect()
}

fn with_total(tokens: Option<Vec<TokenLogprob>>) -> (Option<Vec<TokenLogprob>>, Option<f64>) {
    let total = tokens.as_ref().map(|ts| ts.iter().map(|t| t.logprob).sum());
    (tokens, total)
}

fn parse_usage(v: &Value) -> Usage {
    Usage {
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    }
}

fn parse_chat_response(v: &Value, want_logprobs: bool) -> Result<CachedResponse, ClientError> {
    let choice = v["choices"]
        .get(0)
        .ok_or_else(|| ClientError::Malformed("response has no choices".into()))?;
    let text = choice["message"]["content"]
        .as_str()
        .ok_or_else(|| ClientError::Malformed("choice has no message content".into()))?
        .to_string();
    let tokens = match choice["logprobs"]["content"].as_array() {
        Some(items) if want_logprobs => Some(parse_logprob_list(items)?),
        _ => None,
    };
    let (token_logprobs, total_logprob) = with_total(tokens);
    Ok(CachedResponse {
        text,
        token_logprobs,
        total_logprob,
        usage: parse_usage(v),
    })
}

fn parse_score_response(v: &Value) -> Result<CachedResponse, ClientError> {
    let items = v["token_logprobs"]
        .as_array()
        .ok_or_else(|| ClientError::Malformed("score response has no token_logprobs".into()))?;
    let (token_logprobs, total_logprob) = with_total(Some(parse_logprob_list(items)?));
    Ok(CachedResponse {
        text: String::new(),
        token_logprobs,
        total_logprob,
        usage: parse_usage(v),
    })
}
