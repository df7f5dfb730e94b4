//! Deterministic in-process backends, selected with `mock:<profile>`.
//!
//! | profile        | roles         | behaviour                                               |
//! |----------------|---------------|---------------------------------------------------------|
//! | `echo`         | captioner     | caption `mock-caption[<start>,<end>]`                   |
//! | `echo`         | llm, judge    | `echo: <prompt>`                                        |
//! | `empty`        | any           | HTTP 200 with an empty body                             |
//! | `scene`        | captioner, asr| reads the scene file named by `media_uri` (see below)   |
//! | `silent`       | asr           | no segments                                             |
//! | `scripted`     | asr           | two segments, out of order                              |
//! | `overlap`      | asr           | two overlapping segments                                |
//! | `always-<X>`   | llm, judge    | the single letter `X`                                   |
//! | `think`        | llm, judge    | `<think>…</think>The answer is: C`                      |
//! | `flaky-429`    | llm, judge    | HTTP 429 twice per distinct prompt, then `B`            |
//! | `poison`       | llm, judge    | HTTP 500 if the prompt contains `POISON`, else `A`      |
//! | `overflow`     | llm, judge    | HTTP 400 `context_length_exceeded`                      |
//! | `down`         | any           | HTTP 503                                                |
//! | `always-gold`  | llm           | the answer key entry for the prompt's question          |
//! | `reader`       | llm           | answers only from what the prompt's transcript states   |
//!
//! A scene file is JSON: `{"speech": [{start,end,text}], "visual": [{start,end,text}]}`.
//! The scene captioner describes, for each clip, the single visual event with
//! the largest overlap, so coarse clips lose detail the way real captioners do.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::transport::{Transport, TransportError, WireRequest, WireResponse};
use super::{chat_response_body, BackendEndpoint, GatewayError, HttpTransport, Role};
use crate::manifest::{GroundTruth, SubtitleSegment, VideoManifest};

/// Call counters shared by every transport a registry hands out.
#[derive(Debug, Default)]
pub struct MockStats {
    calls: [AtomicUsize; 4],
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

fn role_index(role: Role) -> usize {
    match role {
        Role::Captioner => 0,
        Role::Asr => 1,
        Role::Llm => 2,
        Role::Judge => 3,
    }
}

impl MockStats {
    pub fn calls(&self, role: Role) -> usize {
        self.calls[role_index(role)].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn enter(&self, role: Role) {
        self.calls[role_index(role)].fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// What a profile sees of a request.
pub struct MockCall<'a> {
    pub role: Role,
    pub body: &'a Value,
    pub ctx: &'a MockContext,
}

impl MockCall<'_> {
    fn prompt(&self) -> &str {
        self.body["messages"][0]["content"].as_str().unwrap_or_default()
    }
}

pub trait MockProfile: Send + Sync {
    fn respond(&self, call: &MockCall<'_>) -> WireResponse;
}

impl<F> MockProfile for F
where
    F: Fn(&MockCall<'_>) -> WireResponse + Send + Sync,
{
    fn respond(&self, call: &MockCall<'_>) -> WireResponse {
        self(call)
    }
}

#[derive(Default)]
pub struct MockContext {
    base_dir: PathBuf,
    answer_key: HashMap<String, GroundTruth>,
    scenes: Mutex<HashMap<PathBuf, Arc<Scene>>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    #[serde(default)]
    pub speech: Vec<SubtitleSegment>,
    #[serde(default)]
    pub visual: Vec<SubtitleSegment>,
}

impl MockContext {
    fn scene(&self, media_uri: &str) -> Result<Arc<Scene>, String> {
        let path = media_uri.strip_prefix("file://").unwrap_or(media_uri);
        let path = if Path::new(path).is_absolute() { PathBuf::from(path) } else { self.base_dir.join(path) };
        let mut scenes = self.scenes.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(s) = scenes.get(&path) {
            return Ok(s.clone());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let scene: Scene = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let scene = Arc::new(scene);
        scenes.insert(path, scene.clone());
        Ok(scene)
    }
}

struct MockTransport {
    profile: Arc<dyn MockProfile>,
    ctx: Arc<MockContext>,
    stats: Arc<MockStats>,
    latency: Duration,
}

impl Transport for MockTransport {
    fn send(&self, _endpoint: &BackendEndpoint, request: &WireRequest) -> Result<WireResponse, TransportError> {
        self.stats.enter(request.role);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let resp = self.profile.respond(&MockCall { role: request.role, body: &request.body, ctx: &self.ctx });
        self.stats.leave();
        Ok(resp)
    }
}

/// Resolves endpoints to transports: `mock:<profile>` to a registered mock,
/// anything else to HTTP.
pub struct MockRegistry {
    profiles: HashMap<String, Arc<dyn MockProfile>>,
    ctx: Arc<MockContext>,
    stats: Arc<MockStats>,
    latency: Duration,
    http: Arc<HttpTransport>,
}

impl Default for MockRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl MockRegistry {
    pub fn new() -> Self {
        let mut reg = Self {
            profiles: HashMap::new(),
            ctx: Arc::new(MockContext::default()),
            stats: Arc::new(MockStats::default()),
            latency: Duration::ZERO,
            http: Arc::new(HttpTransport::default()),
        };
        reg.register("echo", echo);
        reg.register("empty", |_: &MockCall<'_>| WireResponse::ok(""));
        reg.register("down", |_: &MockCall<'_>| WireResponse::status(503, "service unavailable"));
        reg.register("scene", scene);
        reg.register("silent", |c: &MockCall<'_>| asr_only(c, vec![]));
        reg.register("scripted", |c: &MockCall<'_>| {
            asr_only(c, vec![SubtitleSegment::new(5.0, 6.0, "world"), SubtitleSegment::new(0.0, 1.0, "hello")])
        });
        reg.register("overlap", |c: &MockCall<'_>| {
            asr_only(c, vec![SubtitleSegment::new(0.0, 2.0, "a"), SubtitleSegment::new(1.0, 3.0, "b")])
        });
        reg.register("think", |c: &MockCall<'_>| {
            llm_only(c, || "<think>Options B and C both look plausible; C matches the captions.</think>The answer is: C".into())
        });
        reg.register("poison", |c: &MockCall<'_>| {
            if c.prompt().contains("POISON") {
                WireResponse::status(500, "internal error")
            } else {
                llm_only(c, || "A".into())
            }
        });
        reg.register("overflow", |_: &MockCall<'_>| {
            WireResponse::status(400, r#"{"error": {"code": "context_length_exceeded", "message": "too long"}}"#)
        });
        let seen: Mutex<HashMap<String, u32>> = Mutex::new(HashMap::new());
        reg.register("flaky-429", move |c: &MockCall<'_>| {
            let mut seen = seen.lock().unwrap_or_else(|e| e.into_inner());
            let n = seen.entry(c.prompt().to_string()).or_insert(0);
            *n += 1;
            if *n <= 2 {
                WireResponse::status(429, "rate limited")
            } else {
                llm_only(c, || "B".into())
            }
        });
        reg.register("always-gold", |c: &MockCall<'_>| llm_only(c, || always_gold(c)));
        reg.register("reader", |c: &MockCall<'_>| llm_only(c, || reader::answer(c.prompt())));
        reg
    }

    pub fn register(&mut self, name: &str, profile: impl MockProfile + 'static) {
        self.profiles.insert(name.to_string(), Arc::new(profile));
    }

    /// Sleep this long inside every mock call (makes concurrency observable).
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Directory relative scene paths are resolved against.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.ctx_mut().base_dir = dir.into();
        self
    }

    /// Answer key used by `always-gold`, keyed by question text.
    pub fn with_answer_key(mut self, videos: &[VideoManifest]) -> Self {
        let key = videos
            .iter()
            .flat_map(|v| v.questions.iter())
            .map(|q| (q.text.trim().to_string(), q.ground_truth.clone()))
            .collect();
        self.ctx_mut().answer_key = key;
        self
    }

    fn ctx_mut(&mut self) -> &mut MockContext {
        // Only reachable before any transport shares the context.
        if Arc::get_mut(&mut self.ctx).is_none() {
            let fresh = MockContext {
                base_dir: self.ctx.base_dir.clone(),
                answer_key: self.ctx.answer_key.clone(),
                scenes: Mutex::new(HashMap::new()),
            };
            self.ctx = Arc::new(fresh);
        }
        Arc::get_mut(&mut self.ctx).expect("context uniquely owned")
    }

    pub fn stats(&self) -> &Arc<MockStats> {
        &self.stats
    }

    pub fn transport(&self, endpoint: &BackendEndpoint) -> Result<Arc<dyn Transport>, GatewayError> {
        let Some(name) = endpoint.mock_profile() else {
            return Ok(self.http.clone());
        };
        let profile = match self.profiles.get(name) {
            Some(p) => p.clone(),
            None => match name.strip_prefix("always-") {
                Some(l) if l.len() == 1 && l.chars().all(|c| c.is_ascii_uppercase()) => {
                    let letter = l.to_string();
                    Arc::new(move |c: &MockCall<'_>| llm_only(c, || letter.clone())) as Arc<dyn MockProfile>
                }
                _ => return Err(GatewayError::UnknownMockProfile(name.to_string())),
            },
        };
        Ok(Arc::new(MockTransport {
            profile,
            ctx: self.ctx.clone(),
            stats: self.stats.clone(),
            latency: self.latency,
        }))
    }
}

fn wrong_role(role: Role) -> WireResponse {
    WireResponse::status(400, format!("mock profile does not serve the {role} role"))
}

fn llm_only(c: &MockCall<'_>, content: impl FnOnce() -> String) -> WireResponse {
    match c.role {
        Role::Llm | Role::Judge => WireResponse::ok(chat_response_body(&content())),
        other => wrong_role(other),
    }
}

fn asr_only(c: &MockCall<'_>, segments: Vec<SubtitleSegment>) -> WireResponse {
    match c.role {
        Role::Asr => WireResponse::ok(json!({ "segments": segments }).to_string()),
        other => wrong_role(other),
    }
}

fn echo(c: &MockCall<'_>) -> WireResponse {
    match c.role {
        Role::Captioner => {
            let s = c.body["start"].as_f64().unwrap_or_default();
            let e = c.body["end"].as_f64().unwrap_or_default();
            WireResponse::ok(json!({ "caption": format!("mock-caption[{s},{e}]") }).to_string())
        }
        Role::Llm | Role::Judge => WireResponse::ok(chat_response_body(&format!("echo: {}", c.prompt()))),
        Role::Asr => wrong_role(Role::Asr),
    }
}

fn scene(c: &MockCall<'_>) -> WireResponse {
    let uri = c.body["media_uri"].as_str().unwrap_or_default();
    let scene = match c.ctx.scene(uri) {
        Ok(s) => s,
        Err(e) => return WireResponse::status(404, e),
    };
    match c.role {
        Role::Asr => asr_only(c, scene.speech.clone()),
        Role::Captioner => {
            let s = c.body["start"].as_f64().unwrap_or_default();
            let e = c.body["end"].as_f64().unwrap_or_default();
            let best = scene
                .visual
                .iter()
                .map(|ev| (ev.end.min(e) - ev.start.max(s), ev))
                .filter(|(overlap, _)| *overlap > 0.0)
                .fold(None::<(f64, &SubtitleSegment)>, |best, (o, ev)| match best {
                    Some((bo, _)) if bo >= o => best,
                    _ => Some((o, ev)),
                });
            let caption = best.map(|(_, ev)| ev.text.clone()).unwrap_or_else(|| "An empty scene with nothing notable.".into());
            WireResponse::ok(json!({ "caption": caption }).to_string())
        }
        other => wrong_role(other),
    }
}

fn always_gold(c: &MockCall<'_>) -> String {
    let Some(question) = reader::question_text(c.prompt()) else {
        return "no question found".into();
    };
    match c.ctx.answer_key.get(question.trim()) {
        Some(GroundTruth::Letter(l)) => l.to_string(),
        Some(GroundTruth::Text(t)) => t.clone(),
        Some(GroundTruth::Intervals(ivs)) => {
            let parts: Vec<String> =
                ivs.iter().map(|iv| format!("[{}, {}]", iv.start.floor() as u64, iv.end.ceil() as u64)).collect();
            format!("[{}]", parts.join(", "))
        }
        None => "unknown question".into(),
    }
}

/// A reader that only knows what the prompt's transcript says.
mod reader {
    const MCQ_MARK: &str = "Select the best answer";
    const OPEN_MARK: &str = "Please directly respond with the short answer";
    const GROUNDED_MARK: &str = "Your task is to determine";

    pub(super) fn question_text(prompt: &str) -> Option<&str> {
        let line = prompt.lines().find_map(|l| l.strip_prefix("Question: "))?;
        Some(line.strip_suffix('.').unwrap_or(line))
    }

    fn transcript(prompt: &str) -> &str {
        let end = [MCQ_MARK, "Based on the video and the subtitles.", GROUNDED_MARK]
            .iter()
            .filter_map(|m| prompt.find(m))
            .min()
            .unwrap_or(prompt.len());
        &prompt[..end]
    }

    fn options(prompt: &str) -> Vec<(char, String)> {
        let mut out = Vec::new();
        let mut in_options = false;
        for line in prompt.lines() {
            let line = if let Some(rest) = line.strip_prefix("Options: ") {
                in_options = true;
                rest
            } else if in_options && line.trim().is_empty() {
                break;
            } else {
                line
            };
            if !in_options {
                continue;
            }
            let mut chars = line.chars();
            if let (Some(l), Some('.')) = (chars.next(), chars.next()) {
                let text = chars.as_str().trim();
                let text = text.strip_suffix('.').unwrap_or(text);
                out.push((l, text.to_string()));
            }
        }
        out
    }

    fn quoted(question: &str) -> Option<&str> {
        let start = question.find('"')? + 1;
        let len = question[start..].find('"')?;
        Some(&question[start..start + len]).filter(|q| !q.is_empty())
    }

    fn parse_stamp(s: &str) -> Option<u64> {
        let mut parts = s.split(':');
        let h: u64 = parts.next()?.parse().ok()?;
        let m: u64 = parts.next()?.parse().ok()?;
        let sec: u64 = parts.next()?.parse().ok()?;
        parts.next().is_none().then_some(h * 3600 + m * 60 + sec)
    }

    /// `(start, end, text)` of time-stamped transcript lines.
    fn stamped_lines(t: &str) -> Vec<(u64, u64, &str)> {
        t.lines()
            .filter_map(|l| {
                let (span, text) = l.split_once(": ")?;
                let (a, b) = span.split_once(" --> ")?;
                Some((parse_stamp(a)?, parse_stamp(b)?, text))
            })
            .collect()
    }

    pub(super) fn answer(prompt: &str) -> String {
        let t = transcript(prompt).to_lowercase();
        let question = question_text(prompt).unwrap_or_default();
        if prompt.contains(MCQ_MARK) {
            let hits: Vec<char> = options(prompt)
                .into_iter()
                .filter(|(_, text)| !text.is_empty() && t.contains(&text.to_lowercase()))
                .map(|(l, _)| l)
                .collect();
            return match hits.as_slice() {
                [one] => format!("<think>The transcript mentions option {one}.</think>The answer is: {one}"),
                _ => "<think>Nothing in the transcript settles this.</think>I cannot tell.".into(),
            };
        }
        let Some(phrase) = quoted(question).map(str::to_lowercase) else {
            return "I cannot tell.".into();
        };
        let lines = stamped_lines(&t);
        let matching: Vec<&(u64, u64, &str)> = lines.iter().filter(|(_, _, text)| text.contains(&phrase)).collect();
        if prompt.contains(GROUNDED_MARK) {
            let mut spans: Vec<(u64, u64)> = matching.iter().map(|(s, e, _)| (*s, (*e).max(s + 1))).collect();
            spans.sort_unstable();
            let mut merged: Vec<(u64, u64)> = Vec::new();
            for (s, e) in spans {
                match merged.last_mut() {
                    Some(last) if s <= last.1 => last.1 = last.1.max(e),
                    _ => merged.push((s, e)),
                }
            }
            if merged.is_empty() {
                return "No relevant interval.".into();
            }
            merged.truncate(5);
            let parts: Vec<String> = merged.iter().map(|(s, e)| format!("[{s}, {e}]")).collect();
            return format!("[{}]", parts.join(", "));
        }
        if prompt.contains(OPEN_MARK) {
            if let Some((_, _, text)) = matching.first() {
                return text.trim().to_string();
            }
        }
        "I cannot tell.".into()
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CaptionRequest, Decode, LlmRequest, ModelClient, ResponseCache, RetryPolicy};

    fn client(reg: &MockRegistry, role: Role, profile: &str) -> ModelClient {
        let ep = BackendEndpoint::mock(role, profile);
        ModelClient::new(ep.clone(), reg.transport(&ep).unwrap()).with_retry(RetryPolicy::immediate())
    }

    fn caption_req(s: f64, e: f64) -> CaptionRequest {
        CaptionRequest {
            video_id: "v".into(),
            media_uri: "v.mp4".into(),
            interval: (s, e),
            prompt: "generate caption".into(),
            max_new_tokens: 128,
            decode: Decode::Greedy,
        }
    }

    fn video() -> VideoManifest {
        VideoManifest {
            video_id: "v".into(),
            media_uri: "v.mp4".into(),
            duration: 10.0,
            questions: vec![],
            category_labels: Default::default(),
        }
    }

    #[test]
    fn echo_caption_and_cache_hit() {
        let dir = tempfile::tempdir().unwrap();
        let reg = MockRegistry::new();
        let c = client(&reg, Role::Captioner, "echo").with_cache(Some(ResponseCache::new(dir.path())));
        let cap = c.caption(&caption_req(0.0, 8.0)).unwrap();
        assert_eq!(cap.text, "mock-caption[0,8]");
        assert_eq!(reg.stats().calls(Role::Captioner), 1);
        let again = c.caption(&caption_req(0.0, 8.0)).unwrap();
        assert_eq!(again, cap);
        assert_eq!(reg.stats().calls(Role::Captioner), 1);
    }

    #[test]
    fn empty_body_is_malformed() {
        let reg = MockRegistry::new();
        let c = client(&reg, Role::Captioner, "empty");
        assert!(matches!(c.caption(&caption_req(0.0, 8.0)), Err(GatewayError::MalformedResponse { .. })));
    }

    #[test]
    fn asr_profiles() {
        let reg = MockRegistry::new();
        let segs = client(&reg, Role::Asr, "scripted").transcribe(&video()).unwrap();
        assert_eq!(segs, vec![SubtitleSegment::new(0.0, 1.0, "hello"), SubtitleSegment::new(5.0, 6.0, "world")]);
        assert!(client(&reg, Role::Asr, "silent").transcribe(&video()).unwrap().is_empty());
        let merged = client(&reg, Role::Asr, "overlap").transcribe(&video()).unwrap();
        assert_eq!(merged, vec![SubtitleSegment::new(0.0, 3.0, "a b")]);
    }

    #[test]
    fn llm_profiles() {
        let reg = MockRegistry::new();
        let req = LlmRequest::new("Question: q.", "r1");
        assert_eq!(client(&reg, Role::Llm, "always-B").complete(&req).unwrap().text, "B");
        let think = client(&reg, Role::Llm, "think").complete(&req).unwrap();
        assert_eq!(think.text, "The answer is: C");
        assert!(think.raw.starts_with("<think>"));
        assert!(think.reasoning.is_some());
        let flaky = client(&reg, Role::Llm, "flaky-429").complete(&req).unwrap();
        assert_eq!((flaky.text.as_str(), flaky.attempts), ("B", 3));
        assert!(matches!(
            client(&reg, Role::Llm, "overflow").complete(&req),
            Err(GatewayError::ContextLengthExceeded(_))
        ));
    }

    #[test]
    fn retries_are_bounded() {
        let reg = MockRegistry::new();
        let mut ep = BackendEndpoint::mock(Role::Llm, "down");
        ep.max_retries = 2;
        let c = ModelClient::new(ep.clone(), reg.transport(&ep).unwrap()).with_retry(RetryPolicy::immediate());
        let err = c.complete(&LlmRequest::new("x", "r")).unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnavailable { attempts: 3, .. }), "{err}");
        assert_eq!(reg.stats().calls(Role::Llm), 3);

        let mut ep = BackendEndpoint::mock(Role::Llm, "flaky-429");
        ep.max_retries = 1;
        let c = ModelClient::new(ep.clone(), reg.transport(&ep).unwrap()).with_retry(RetryPolicy::immediate());
        assert!(c.complete(&LlmRequest::new("y", "r")).is_err());
    }

    #[test]
    fn roles_are_enforced_and_profiles_resolved() {
        let reg = MockRegistry::new();
        let c = client(&reg, Role::Asr, "silent");
        assert!(matches!(c.complete(&LlmRequest::new("x", "r")), Err(GatewayError::WrongRole { .. })));
        assert!(matches!(
            reg.transport(&BackendEndpoint::mock(Role::Llm, "no-such-profile")),
            Err(GatewayError::UnknownMockProfile(_))
        ));
        assert!(reg.transport(&BackendEndpoint::new(Role::Llm, "http://localhost:1")).is_ok());
    }

    #[test]
    fn scene_profile_reads_media_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("scene.json"),
            r#"{"speech":[{"start":1,"end":2,"text":"hi"}],"visual":[{"start":0,"end":1,"text":"a cat"},{"start":1,"end":4,"text":"a dog"}]}"#,
        )
        .unwrap();
        let reg = MockRegistry::new().with_base_dir(dir.path());
        let mut v = video();
        v.media_uri = "scene.json".into();
        let segs = client(&reg, Role::Asr, "scene").transcribe(&v).unwrap();
        assert_eq!(segs.len(), 1);
        let cap = client(&reg, Role::Captioner, "scene");
        let mut req = caption_req(0.0, 1.0);
        req.media_uri = "scene.json".into();
        assert_eq!(cap.caption(&req).unwrap().text, "a cat");
        req.interval = (0.0, 8.0);
        assert_eq!(cap.caption(&req).unwrap().text, "a dog");
    }
}
