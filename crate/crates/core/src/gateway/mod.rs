//! Clients for the captioner, ASR, and reasoning-LLM roles.
//!
//! Every backend speaks JSON over HTTP POST (`docs/protocol.md`):
//!
//! | role       | path                | response                          |
//! |------------|---------------------|-----------------------------------|
//! | captioner  | `/captions`         | `{"caption": "..."}`              |
//! | asr        | `/transcriptions`   | `{"segments": [{start,end,text}]}`|
//! | llm, judge | `/chat/completions` | chat-completions `choices[0]`     |
//!
//! A `base_url` of the form `mock:<profile>` routes requests to an in-process
//! deterministic mock instead (see [`mock`]). Responses are cached on disk by
//! content digest; retries use exponential backoff with jitter and only fire
//! on timeouts, connection errors, HTTP 429, and HTTP 5xx.

pub mod batch;
pub mod cache;
pub mod mock;
pub mod transport;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::manifest::{normalize_subtitles, ClipCaption, SubtitleSegment, VideoManifest};

pub use batch::{execute_batch, BatchRequest};
pub use cache::{CacheKey, ResponseCache};
pub use mock::{MockRegistry, MockStats};
pub use transport::{HttpTransport, Transport, TransportError, WireRequest, WireResponse};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 64;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

pub const GENERAL_CAPTION_PROMPT: &str = "Briefly describe the video within 40 words";
pub const GENERAL_CAPTION_MAX_NEW_TOKENS: u32 = 200;
pub const NVILA_CAPTION_PROMPT: &str = "generate caption";
pub const NVILA_CAPTION_MAX_NEW_TOKENS: u32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Captioner,
    Asr,
    Llm,
    Judge,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Captioner => "captioner",
            Role::Asr => "asr",
            Role::Llm => "llm",
            Role::Judge => "judge",
        }
    }

    pub fn default_model(self) -> &'static str {
        match self {
            Role::Captioner => "NVILA-8B-Video",
            Role::Asr => "whisper-large-v3",
            Role::Llm | Role::Judge => "deepseek-r1",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEndpoint {
    pub role: Role,
    /// `http(s)://...` or `mock:<profile>`.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

impl BackendEndpoint {
    pub fn new(role: Role, base_url: impl Into<String>) -> Self {
        Self {
            role,
            base_url: base_url.into(),
            model_name: role.default_model().to_string(),
            auth_token_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
        }
    }

    pub fn mock(role: Role, profile: &str) -> Self {
        Self::new(role, format!("mock:{profile}"))
    }

    pub fn mock_profile(&self) -> Option<&str> {
        self.base_url.strip_prefix("mock:")
    }

    pub fn auth_token(&self) -> Option<String> {
        self.auth_token_env.as_deref().and_then(|var| std::env::var(var).ok())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!("{} endpoint: timeout must be positive", self.role));
        }
        if self.base_url.is_empty() {
            return Err(format!("{} endpoint: base_url is empty", self.role));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("{role} backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { role: Role, attempts: u32, last: String },
    #[error("{role} backend timed out after {attempts} attempt(s)")]
    Timeout { role: Role, attempts: u32 },
    #[error("malformed {role} response: {reason}")]
    MalformedResponse { role: Role, reason: String },
    #[error("context length exceeded: {0}")]
    ContextLengthExceeded(String),
    #[error("{role} backend rejected the request with HTTP {status}: {body}")]
    BackendRejected { role: Role, status: u16, body: String },
    #[error("{actual} endpoint cannot serve a {expected} request")]
    WrongRole { expected: Role, actual: Role },
    #[error("unknown mock profile `{0}`")]
    UnknownMockProfile(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub video_id: String,
    pub media_uri: String,
    pub interval: (f64, f64),
    pub prompt: String,
    pub max_new_tokens: u32,
    pub decode: Decode,
}

impl CaptionRequest {
    pub fn request_id(&self) -> String {
        format!("{}@{}-{}", self.video_id, self.interval.0, self.interval.1)
    }

    fn decode_params(&self) -> Value {
        json!({"decode": self.decode, "max_new_tokens": self.max_new_tokens})
    }
}

/// Captioner prompt and token cap matching the model family.
pub fn caption_defaults(model_name: &str) -> (&'static str, u32) {
    if model_name.to_ascii_lowercase().contains("nvila") {
        (NVILA_CAPTION_PROMPT, NVILA_CAPTION_MAX_NEW_TOKENS)
    } else {
        (GENERAL_CAPTION_PROMPT, GENERAL_CAPTION_MAX_NEW_TOKENS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub request_id: String,
}

impl LlmRequest {
    pub fn new(prompt: impl Into<String>, request_id: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), temperature: DEFAULT_TEMPERATURE, max_output_tokens: None, request_id: request_id.into() }
    }

    /// Request id for one attempt at one question.
    pub fn id_for(video_id: &str, question_id: &str, attempt: u32) -> String {
        format!("{video_id}/{question_id}#{attempt}")
    }

    fn decode_params(&self) -> Value {
        json!({"temperature": self.temperature, "max_tokens": self.max_output_tokens})
    }
}

/// Text returned by an LLM call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Answer text with any reasoning segment removed.
    pub text: String,
    /// Message content exactly as returned.
    pub raw: String,
    /// Reasoning trace, from the markers or a separate response field.
    pub reasoning: Option<String>,
    pub attempts: u32,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self { base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    /// Delay before retry number `retry` (1-based): half the exponential
    /// step plus a uniformly random share of the other half.
    pub fn delay(&self, retry: u32) -> Duration {
        let step = self.base_delay.saturating_mul(1u32 << retry.saturating_sub(1).min(20)).min(self.max_delay);
        if step.is_zero() {
            return step;
        }
        let half = step / 2;
        half + half.mul_f64(rand::rng().random_range(0.0..=1.0))
    }
}

/// Counting semaphore bounding concurrent network calls across all batches
/// sharing it.
#[derive(Debug)]
pub struct InFlightLimiter {
    capacity: usize,
    state: Mutex<(usize, usize)>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), state: Mutex::new((0, 0)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.0 >= self.capacity {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        Permit(self)
    }

    /// Highest number of permits ever held at once.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).1
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        st.0 -= 1;
        self.0.cv.notify_one();
    }
}

/// Strip reasoning delimited by `open`/`close`. Returns (answer, reasoning).
///
/// A closing marker without an opening one (some servers drop the opening
/// tag) discards everything before the last closing marker.
pub fn strip_reasoning(text: &str, open: &str, close: &str) -> (String, Option<String>) {
    let mut answer = String::new();
    let mut trace = Vec::new();
    let mut rest = text;
    if !text.contains(open) {
        if let Some(pos) = text.rfind(close) {
            let trace = text[..pos].trim().to_string();
            return (text[pos + close.len()..].trim().to_string(), Some(trace).filter(|t| !t.is_empty()));
        }
    }
    while let Some(start) = rest.find(open) {
        answer.push_str(&rest[..start]);
        let after = &rest[start + open.len()..];
        match after.find(close) {
            Some(end) => {
                trace.push(after[..end].trim().to_string());
                rest = &after[end + close.len()..];
            }
            None => {
                // unterminated: the remainder is all reasoning
                trace.push(after.trim().to_string());
                rest = "";
            }
        }
    }
    answer.push_str(rest);
    let trace = trace.join("\n");
    (answer.trim().to_string(), (!trace.is_empty()).then_some(trace))
}

pub struct ModelClient {
    endpoint: BackendEndpoint,
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: Option<Arc<InFlightLimiter>>,
    reasoning_markers: Option<(String, String)>,
    sent: AtomicUsize,
    cache_hits: AtomicUsize,
}

struct CallResult<T> {
    value: T,
    attempts: u32,
    cached: bool,
}

impl ModelClient {
    pub fn new(endpoint: BackendEndpoint, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint,
            transport,
            cache: None,
            retry: RetryPolicy::default(),
            limiter: None,
            reasoning_markers: Some(("<think>".into(), "</think>".into())),
            sent: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<InFlightLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_reasoning_markers(mut self, markers: Option<(String, String)>) -> Self {
        self.reasoning_markers = markers;
        self
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    /// Requests handed to the transport so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.sent.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    fn require_role(&self, allowed: &[Role]) -> Result<(), GatewayError> {
        if allowed.contains(&self.endpoint.role) {
            Ok(())
        } else {
            Err(GatewayError::WrongRole { expected: allowed[0], actual: self.endpoint.role })
        }
    }

    fn call<T>(
        &self,
        key: &CacheKey,
        request: WireRequest,
        summary: Value,
        decode: impl Fn(&str) -> Result<T, GatewayError>,
    ) -> Result<CallResult<T>, GatewayError> {
        let role = self.endpoint.role;
        if let Some(cache) = &self.cache {
            if let Some(body) = cache.get(role, key) {
                match decode(&body) {
                    Ok(value) => {
                        self.cache_hits.fetch_add(1, Ordering::Relaxed);
                        return Ok(CallResult { value, attempts: 0, cached: true });
                    }
                    Err(e) => log::warn!("cached {role} response no longer decodes ({e}); refetching"),
                }
            }
        }

        let max_attempts = self.endpoint.max_retries + 1;
        let mut last = GatewayError::BackendUnavailable { role, attempts: 0, last: "no attempt made".into() };
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            let started = Instant::now();
            self.sent.fetch_add(1, Ordering::Relaxed);
            let sent = {
                let _permit = self.limiter.as_ref().map(|l| l.acquire());
                self.transport.send(&self.endpoint, &request)
            };
            let elapsed_ms = started.elapsed().as_millis() as u64;
            log::debug!("{role} attempt {attempt}/{max_attempts} took {elapsed_ms} ms");
            match sent {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    let value = decode(&resp.body)?;
                    if let Some(cache) = &self.cache {
                        if let Err(e) = cache.put(role, key, summary, &resp.body, elapsed_ms) {
                            log::warn!("cannot write {role} cache entry: {e}");
                        }
                    }
                    return Ok(CallResult { value, attempts: attempt, cached: false });
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    log::info!("{role} attempt {attempt} got HTTP {}", resp.status);
                    last = GatewayError::BackendUnavailable { role, attempts: attempt, last: format!("HTTP {}", resp.status) };
                }
                Ok(resp) if is_context_overflow(&resp) => {
                    return Err(GatewayError::ContextLengthExceeded(truncate(&resp.body, 300)));
                }
                Ok(resp) => {
                    return Err(GatewayError::BackendRejected { role, status: resp.status, body: truncate(&resp.body, 300) });
                }
                Err(TransportError::Timeout) => {
                    log::info!("{role} attempt {attempt} timed out");
                    last = GatewayError::Timeout { role, attempts: attempt };
                }
                Err(TransportError::Connect(e)) => {
                    log::info!("{role} attempt {attempt} failed: {e}");
                    last = GatewayError::BackendUnavailable { role, attempts: attempt, last: e };
                }
            }
        }
        Err(last)
    }

    pub fn caption(&self, req: &CaptionRequest) -> Result<ClipCaption, GatewayError> {
        self.require_role(&[Role::Captioner])?;
        let (start, end) = req.interval;
        if !(start.is_finite() && end.is_finite() && 0.0 <= start && start < end) {
            return Err(GatewayError::InvalidRequest(format!("bad caption interval [{start}, {end}]")));
        }
        if req.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("caption prompt is empty".into()));
        }
        let ep = &self.endpoint;
        let key = CacheKey::new(ep.role, &ep.model_name, &req.prompt, Some(&req.media_uri), Some(req.interval), &req.decode_params());
        let body = json!({
            "model": ep.model_name,
            "video_id": req.video_id,
            "media_uri": req.media_uri,
            "start": start,
            "end": end,
            "prompt": req.prompt,
            "max_new_tokens": req.max_new_tokens,
            "decoding": req.decode,
        });
        let summary = body.clone();
        let wire = WireRequest { role: ep.role, path: "/captions", body };
        let out = self.call(&key, wire, summary, decode_caption)?;
        Ok(ClipCaption::new(start, end, out.value))
    }

    pub fn transcribe(&self, video: &VideoManifest) -> Result<Vec<SubtitleSegment>, GatewayError> {
        self.require_role(&[Role::Asr])?;
        let ep = &self.endpoint;
        let key = CacheKey::new(ep.role, &ep.model_name, "", Some(&video.media_uri), None, &json!({}));
        let body = json!({
            "model": ep.model_name,
            "video_id": video.video_id,
            "media_uri": video.media_uri,
            "duration": video.duration,
        });
        let summary = body.clone();
        let wire = WireRequest { role: ep.role, path: "/transcriptions", body };
        let out = self.call(&key, wire, summary, decode_segments)?;
        Ok(normalize_subtitles(&out.value))
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<Completion, GatewayError> {
        self.require_role(&[Role::Llm, Role::Judge])?;
        let ep = &self.endpoint;
        let key = CacheKey::new(ep.role, &ep.model_name, &req.prompt, None, None, &req.decode_params());
        let mut body = json!({
            "model": ep.model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
        });
        if let Some(max) = req.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        let summary = json!({"model": ep.model_name, "request_id": req.request_id, "temperature": req.temperature});
        let wire = WireRequest { role: ep.role, path: "/chat/completions", body };
        let out = self.call(&key, wire, summary, |b| decode_chat(ep.role, b))?;
        let (content, side_reasoning) = out.value;
        let (text, marked) = match &self.reasoning_markers {
            Some((open, close)) => strip_reasoning(&content, open, close),
            None => (content.trim().to_string(), None),
        };
        let reasoning = match (side_reasoning, marked) {
            (Some(a), Some(b)) => Some(format!("{a}\n{b}")),
            (a, b) => a.or(b),
        };
        log::debug!("{} {} served in {} attempt(s), cached={}", ep.role, req.request_id, out.attempts, out.cached);
        Ok(Completion { text, raw: content, reasoning, attempts: out.attempts, cached: out.cached })
    }
}

fn is_context_overflow(resp: &WireResponse) -> bool {
    matches!(resp.status, 400 | 413) && {
        let b = resp.body.to_ascii_lowercase();
        b.contains("context_length_exceeded") || b.contains("maximum context length")
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

fn parse_json(role: Role, body: &str) -> Result<Value, GatewayError> {
    if body.trim().is_empty() {
        return Err(GatewayError::MalformedResponse { role, reason: "empty body".into() });
    }
    serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse { role, reason: e.to_string() })
}

fn decode_caption(body: &str) -> Result<String, GatewayError> {
    let role = Role::Captioner;
    let v = parse_json(role, body)?;
    match v.get("caption").and_then(Value::as_str) {
        Some(c) if !c.trim().is_empty() => Ok(c.trim().to_string()),
        Some(_) => Err(GatewayError::MalformedResponse { role, reason: "caption is empty".into() }),
        None => Err(GatewayError::MalformedResponse { role, reason: "missing `caption` string".into() }),
    }
}

fn decode_segments(body: &str) -> Result<Vec<SubtitleSegment>, GatewayError> {
    let role = Role::Asr;
    #[derive(Deserialize)]
    struct Segments {
        segments: Vec<SubtitleSegment>,
    }
    let v = parse_json(role, body)?;
    serde_json::from_value::<Segments>(v)
        .map(|s| s.segments)
        .map_err(|e| GatewayError::MalformedResponse { role, reason: e.to_string() })
}

fn decode_chat(role: Role, body: &str) -> Result<(String, Option<String>), GatewayError> {
    let v = parse_json(role, body)?;
    let message = &v["choices"][0]["message"];
    let content = message["content"]
        .as_str()
        .ok_or_else(|| GatewayError::MalformedResponse { role, reason: "missing choices[0].message.content".into() })?;
    let reasoning = message["reasoning_content"].as_str().map(str::to_string).filter(|s| !s.trim().is_empty());
    Ok((content.to_string(), reasoning))
}

/// Chat-completions response body carrying `content`.
pub fn chat_response_body(content: &str) -> String {
    json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
    .to_string()
}
