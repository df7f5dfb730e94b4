//! The HTTP transport against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use vidlang::gateway::{
    chat_response_body, BackendEndpoint, CaptionRequest, Decode, GatewayError, HttpTransport, LlmRequest,
    ModelClient, RetryPolicy, Role,
};
use vidlang::VideoManifest;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serve one scripted `(status, body, delay)` reply per connection.
fn serve(replies: Vec<(u16, String, Duration)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body, delay) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                let (name, value) = h.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { path, auth, body: serde_json::from_slice(&buf).unwrap() });
            thread::sleep(delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, seen)
}

fn client(role: Role, url: &str) -> ModelClient {
    let ep = BackendEndpoint::new(role, url);
    ModelClient::new(ep, Arc::new(HttpTransport::default())).with_retry(RetryPolicy::immediate())
}

fn ok(body: String) -> (u16, String, Duration) {
    (200, body, Duration::ZERO)
}

#[test]
fn chat_completion_with_retry_on_429_and_auth() {
    let (url, seen) = serve(vec![
        (429, "{}".into(), Duration::ZERO),
        (503, "{}".into(), Duration::ZERO),
        ok(chat_response_body("<think>B looks right</think>The answer is: B")),
    ]);
    std::env::set_var("VIDLANG_TEST_TOKEN", "sekret");
    let mut ep = BackendEndpoint::new(Role::Llm, &url);
    ep.auth_token_env = Some("VIDLANG_TEST_TOKEN".into());
    let c = ModelClient::new(ep, Arc::new(HttpTransport::default())).with_retry(RetryPolicy::immediate());
    let out = c.complete(&LlmRequest::new("Question?", "r1")).unwrap();
    assert_eq!(out.text, "The answer is: B");
    assert_eq!(out.reasoning.as_deref(), Some("B looks right"));
    assert_eq!(out.attempts, 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].path, "/chat/completions");
    assert_eq!(seen[2].auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(seen[2].body["messages"][0]["content"], "Question?");
    assert_eq!(seen[2].body["temperature"], 1.0);
    assert_eq!(seen[2].body["model"], "deepseek-r1");
}

#[test]
fn caption_and_transcription_wire_format() {
    let (url, seen) = serve(vec![
        ok(r#"{"caption": "  A dog runs. "}"#.into()),
        ok(r#"{"segments": [{"start": 3.0, "end": 4.0, "text": "b"}, {"start": 0.5, "end": 2.0, "text": " a "}]}"#.into()),
    ]);
    let req = CaptionRequest {
        video_id: "v".into(),
        media_uri: "file:///v.mp4".into(),
        interval: (24.0, 32.0),
        prompt: "generate caption".into(),
        max_new_tokens: 128,
        decode: Decode::Greedy,
    };
    let cap = client(Role::Captioner, &url).caption(&req).unwrap();
    assert_eq!((cap.start, cap.end, cap.text.as_str()), (24.0, 32.0, "A dog runs."));
    let video = VideoManifest {
        video_id: "v".into(),
        media_uri: "file:///v.mp4".into(),
        duration: 10.0,
        questions: vec![],
        category_labels: Default::default(),
    };
    let segs = client(Role::Asr, &url).transcribe(&video).unwrap();
    assert_eq!(segs.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/captions");
    assert_eq!(seen[0].body["start"], 24.0);
    assert_eq!(seen[0].body["decoding"], "greedy");
    assert_eq!(seen[1].path, "/transcriptions");
    assert_eq!(seen[1].body["duration"], 10.0);
}

#[test]
fn rejections_are_not_retried() {
    let (url, seen) = serve(vec![
        (400, r#"{"error": {"code": "context_length_exceeded"}}"#.into(), Duration::ZERO),
        (401, "unauthorized".into(), Duration::ZERO),
        ok("not json".into()),
    ]);
    let c = client(Role::Llm, &url);
    let req = LlmRequest::new("p", "r");
    assert!(matches!(c.complete(&req), Err(GatewayError::ContextLengthExceeded(_))));
    assert!(matches!(c.complete(&req), Err(GatewayError::BackendRejected { status: 401, .. })));
    assert!(matches!(c.complete(&req), Err(GatewayError::MalformedResponse { .. })));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn slow_server_times_out() {
    let (url, _) = serve(vec![(200, chat_response_body("A"), Duration::from_secs(3))]);
    let mut ep = BackendEndpoint::new(Role::Llm, &url);
    ep.timeout_secs = 0.3;
    ep.max_retries = 0;
    let c = ModelClient::new(ep, Arc::new(HttpTransport::default()));
    assert!(matches!(c.complete(&LlmRequest::new("p", "r")), Err(GatewayError::Timeout { attempts: 1, .. })));
}

#[test]
fn refused_connection_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut ep = BackendEndpoint::new(Role::Llm, format!("http://127.0.0.1:{port}"));
    ep.max_retries = 1;
    let c = ModelClient::new(ep, Arc::new(HttpTransport::default())).with_retry(RetryPolicy::immediate());
    assert!(matches!(
        c.complete(&LlmRequest::new("p", "r")),
        Err(GatewayError::BackendUnavailable { attempts: 2, .. })
    ));
}
