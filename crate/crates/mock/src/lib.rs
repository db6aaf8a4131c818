//! A scripted, deterministic stand-in for an OpenAI-compatible endpoint.
//!
//! The server answers `POST {base}/chat/completions` and `POST {base}/score`
//! where `base` is [`MockServer::base_url`]. Replies are chosen by a
//! [`Responder`], optionally overridden by canned replies keyed on the
//! SHA-256 of the canonical request body. Failures, latency and auth checks
//! are scripted, and the server counts requests and the peak number of
//! requests in flight so tests can assert on client behaviour.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

/// SHA-256 of the request body with object keys sorted.
pub fn body_digest(body: &Value) -> String {
    let canonical = serde_json::to_string(body).expect("value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockReply {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<(String, f64)>>,
}

impl MockReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
        }
    }
}

/// Substring rule: the first rule whose `contains` occurs in the last user
/// message supplies the reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub contains: String,
    pub reply: String,
}

pub type CustomFn = Arc<dyn Fn(&Value) -> MockReply + Send + Sync>;

#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Responder {
    Fixed { text: String },
    Rules { rules: Vec<Rule>, fallback: String },
    /// Content-derived replies for the harness prompt shapes; see
    /// [`synthetic_reply`].
    Synthetic,
    #[serde(skip)]
    Custom(CustomFn),
}

impl std::fmt::Debug for Responder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Responder::Fixed { text } => f.debug_struct("Fixed").field("text", text).finish(),
            Responder::Rules { rules, fallback } => f
                .debug_struct("Rules")
                .field("rules", rules)
                .field("fallback", fallback)
                .finish(),
            Responder::Synthetic => f.write_str("Synthetic"),
            Responder::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScoringScript {
    /// Always returns these per-token log-probabilities.
    Fixed { logprobs: Vec<f64> },
    /// Whitespace tokens, each scored `-rate * chars`.
    PerChar { rate: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    pub responder: Responder,
    /// Canned replies keyed by [`body_digest`] of the chat request.
    #[serde(default)]
    pub canned: BTreeMap<String, MockReply>,
    /// HTTP statuses returned, in arrival order, before normal service.
    #[serde(default)]
    pub fail_first: Vec<u16>,
    /// Per-request latency drawn deterministically from `[lo, hi]` ms.
    #[serde(default)]
    pub latency_ms: (u64, u64),
    /// `None` makes `/score` answer 501.
    #[serde(default)]
    pub scoring: Option<ScoringScript>,
    /// When set, requests must carry `Authorization: Bearer <key>`.
    #[serde(default)]
    pub require_key: Option<String>,
}

impl MockScript {
    pub fn new(responder: Responder) -> Self {
        Self {
            responder,
            canned: BTreeMap::new(),
            fail_first: Vec::new(),
            latency_ms: (0, 0),
            scoring: None,
            require_key: None,
        }
    }

    pub fn synthetic() -> Self {
        Self::new(Responder::Synthetic)
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        Self::new(Responder::Fixed { text: text.into() })
    }

    pub fn with_failures(mut self, statuses: Vec<u16>) -> Self {
        self.fail_first = statuses;
        self
    }

    pub fn with_latency(mut self, lo: u64, hi: u64) -> Self {
        self.latency_ms = (lo, hi);
        self
    }

    pub fn with_scoring(mut self, scoring: ScoringScript) -> Self {
        self.scoring = Some(scoring);
        self
    }

    pub fn with_canned(mut self, digest: String, reply: MockReply) -> Self {
        self.canned.insert(digest, reply);
        self
    }
}

#[derive(Debug, Default)]
struct Counters {
    arrivals: AtomicUsize,
    chat: AtomicUsize,
    score: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

struct Shared {
    script: MockScript,
    counters: Counters,
    log: Mutex<Vec<Value>>,
}

struct InFlight<'a>(&'a Counters);

impl<'a> InFlight<'a> {
    fn enter(c: &'a Counters) -> Self {
        let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        c.peak.fetch_max(now, Ordering::SeqCst);
        InFlight(c)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    /// Binds an ephemeral localhost port and serves `script`.
    pub async fn start(script: MockScript) -> std::io::Result<Self> {
        Self::bind(script, "127.0.0.1:0").await
    }

    pub async fn bind(script: MockScript, addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            script,
            counters: Counters::default(),
            log: Mutex::new(Vec::new()),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/v1/score", post(score))
            .with_state(shared.clone());
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to configure as the model endpoint.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Every request that reached the server, including scripted failures.
    pub fn request_count(&self) -> usize {
        self.shared.counters.arrivals.load(Ordering::SeqCst)
    }

    pub fn chat_count(&self) -> usize {
        self.shared.counters.chat.load(Ordering::SeqCst)
    }

    pub fn score_count(&self) -> usize {
        self.shared.counters.score.load(Ordering::SeqCst)
    }

    /// Highest number of requests being handled at the same instant.
    pub fn peak_in_flight(&self) -> usize {
        self.shared.counters.peak.load(Ordering::SeqCst)
    }

    pub fn request_log(&self) -> Vec<Value> {
        self.shared.log.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({"error": {"message": message}}))).into_response()
}

/// Shared prologue: counting, logging, auth, scripted failures, latency.
async fn admit(shared: &Shared, headers: &HeaderMap, body: &Value) -> Option<Response> {
    let n = shared.counters.arrivals.fetch_add(1, Ordering::SeqCst);
    shared.log.lock().unwrap().push(body.clone());
    if let Some(key) = &shared.script.require_key {
        let ok = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == format!("Bearer {key}"));
        if !ok {
            return Some(error(StatusCode::UNAUTHORIZED, "invalid api key"));
        }
    }
    if let Some(&status) = shared.script.fail_first.get(n) {
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return Some(error(status, "scripted failure"));
    }
    let (lo, hi) = shared.script.latency_ms;
    if hi > 0 {
        let h = u64::from_str_radix(&body_digest(body)[..12], 16).unwrap_or(0);
        let ms = lo + h % (hi.saturating_sub(lo) + 1);
        tokio::time::sleep(Duration::from_millis(ms)).await;
    }
    None
}

fn last_user_message(body: &Value) -> String {
    body["messages"]
        .as_array()
        .and_then(|ms| {
            ms.iter()
                .rev()
                .find(|m| m["role"] == "user")
                .and_then(|m| m["content"].as_str())
        })
        .unwrap_or("")
        .to_string()
}

fn synthetic_logprobs(text: &str) -> Vec<(String, f64)> {
    text.split_whitespace()
        .map(|t| (t.to_string(), -0.05 * t.chars().count() as f64))
        .collect()
}

async fn chat(State(shared): State<Arc<Shared>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&shared.counters);
    if let Some(resp) = admit(&shared, &headers, &body).await {
        return resp;
    }
    shared.counters.chat.fetch_add(1, Ordering::SeqCst);
    let digest = body_digest(&body);
    let reply = match shared.script.canned.get(&digest) {
        Some(r) => r.clone(),
        None => match &shared.script.responder {
            Responder::Fixed { text } => MockReply::text(text.clone()),
            Responder::Rules { rules, fallback } => {
                let msg = last_user_message(&body);
                let text = rules
                    .iter()
                    .find(|r| msg.contains(&r.contains))
                    .map(|r| r.reply.clone())
                    .unwrap_or_else(|| fallback.clone());
                MockReply::text(text)
            }
            Responder::Synthetic => MockReply::text(synthetic_reply(&last_user_message(&body))),
            Responder::Custom(f) => f(&body),
        },
    };
    let want_logprobs = body["logprobs"].as_bool().unwrap_or(false);
    let logprobs = want_logprobs.then(|| {
        let toks = reply
            .token_logprobs
            .clone()
            .unwrap_or_else(|| synthetic_logprobs(&reply.text));
        json!({"content": toks.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect::<Vec<_>>()})
    });
    let prompt_tokens = last_user_message(&body).split_whitespace().count();
    let completion_tokens = reply.text.split_whitespace().count();
    Json(json!({
        "id": format!("mock-{}", &digest[..12]),
        "object": "chat.completion",
        "model": body["model"],
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": reply.text},
            "logprobs": logprobs,
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": prompt_tokens + completion_tokens
        }
    }))
    .into_response()
}

async fn score(State(shared): State<Arc<Shared>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&shared.counters);
    if let Some(resp) = admit(&shared, &headers, &body).await {
        return resp;
    }
    let Some(script) = &shared.script.scoring else {
        return error(StatusCode::NOT_IMPLEMENTED, "scoring is not supported");
    };
    shared.counters.score.fetch_add(1, Ordering::SeqCst);
    let continuation = body["continuation"].as_str().unwrap_or("");
    let toks: Vec<(String, f64)> = match script {
        ScoringScript::Fixed { logprobs } => logprobs
            .iter()
            .enumerate()
            .map(|(i, lp)| (format!("t{i}"), *lp))
            .collect(),
        ScoringScript::PerChar { rate } => continuation
            .split_whitespace()
            .map(|t| (t.to_string(), -rate * t.chars().count() as f64))
            .collect(),
    };
    Json(json!({
        "model": body["model"],
        "token_logprobs": toks.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect::<Vec<_>>()
    }))
    .into_response()
}

fn hash_u64(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

fn target_question(prompt: &str) -> String {
    prompt
        .rsplit_once("Question:")
        .map(|(_, rest)| rest.lines().next().unwrap_or("").trim().to_string())
        .unwrap_or_default()
}

fn answer_token(prompt: &str, h: u64) -> String {
    let labels: Vec<String> = prompt
        .match_indices('(')
        .filter_map(|(i, _)| {
            let rest = &prompt[i + 1..];
            let close = rest.find(')')?;
            let label = &rest[..close];
            (label.len() == 1 && label.chars().all(|c| c.is_ascii_lowercase())).then(|| label.to_string())
        })
        .collect();
    if !labels.is_empty() {
        return format!("({})", labels[(h % labels.len() as u64) as usize]);
    }
    let question = target_question(prompt);
    if question.chars().any(|c| c.is_ascii_digit()) {
        return (h % 100).to_string();
    }
    if h.is_multiple_of(2) { "yes" } else { "no" }.to_string()
}

/// Deterministic replies shaped after the harness prompts:
///
/// * prompts ending in `Intervened question:` get a rewritten question;
/// * prompts ending in `Let's think step by step` get a short chain that
///   closes with `So the answer is …`;
/// * anything else gets an answer sentence. A `the answer is X` phrase
///   already present in the prompt is echoed, otherwise the answer is derived
///   from a hash of the prompt.
pub fn synthetic_reply(prompt: &str) -> String {
    let h = hash_u64(prompt);
    let trimmed = prompt.trim_end();
    if trimmed.ends_with("Intervened question:") {
        let q = target_question(trimmed.trim_end_matches("Intervened question:").trim_end());
        let q = q.trim_end_matches('?');
        return format!("Intervened question: In a counterfactual world, {q}?");
    }
    if trimmed.ends_with("Let's think step by step") || trimmed.ends_with("Let's think step by step.") {
        let ans = answer_token(prompt, h);
        return format!(
            "First, recall the facts relevant to case {:04x}. Next, combine them carefully. So the answer is {ans}.",
            h & 0xffff
        );
    }
    let lower = prompt.to_lowercase();
    if let Some(pos) = lower.rfind("the answer is ") {
        let tail = &prompt[pos + "the answer is ".len()..];
        let tok: String = tail
            .chars()
            .take_while(|c| c.is_alphanumeric() || matches!(c, '(' | ')' | '.' | '-'))
            .collect();
        let tok = tok.trim_end_matches('.');
        if !tok.is_empty() {
            return format!("So the answer is {tok}.");
        }
    }
    format!("So the answer is {}.", answer_token(prompt, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shapes() {
        let r = synthetic_reply("Rewrite it.\n\nQuestion: Is ice cold?\nAnswer: yes\nIntervened question:");
        assert_eq!(r, "Intervened question: In a counterfactual world, Is ice cold?");
        let r = synthetic_reply("Question: Is ice cold? Let's think step by step");
        assert!(r.ends_with("So the answer is yes.") || r.ends_with("So the answer is no."), "{r}");
        let r = synthetic_reply("Question: x\nExplanation: clearly the answer is (b).\nAnswer:");
        assert_eq!(r, "So the answer is (b).");
        assert_eq!(synthetic_reply("same"), synthetic_reply("same"));
    }

    #[test]
    fn digest_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":[1,2]}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        assert_eq!(body_digest(&a), body_digest(&b));
    }

    #[test]
    fn script_serde_roundtrip() {
        let s = MockScript::synthetic()
            .with_failures(vec![500])
            .with_scoring(ScoringScript::Fixed { logprobs: vec![-1.0] });
        let text = serde_json::to_string(&s).unwrap();
        let back: MockScript = serde_json::from_str(&text).unwrap();
        assert_eq!(back.fail_first, vec![500]);
        assert!(matches!(back.responder, Responder::Synthetic));
    }
}
