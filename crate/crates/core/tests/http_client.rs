use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use marginsel::llm::LlmError;
use marginsel::{BackendConfig, CachedBackend, ChatBackend, ChatExchange, HttpBackend};

struct Captured {
    headers: String,
    body: serde_json::Value,
}

/// Serve one scripted `(status, body)` per connection, recording requests.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push_str(&line);
            }
            let mut raw = vec![0u8; length];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Captured {
                headers,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn completion(content: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

fn config(base_url: String) -> BackendConfig {
    BackendConfig {
        base_url,
        model_name: "test-model".into(),
        backoff_ms: 1,
        max_retries: 3,
        timeout_secs: 5.0,
        ..BackendConfig::default()
    }
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (200, completion("<label>positive</label>")),
    ]);
    let backend = HttpBackend::new(config(url)).unwrap();
    let out = backend.chat(ChatExchange::new("sys", "usr")).unwrap();
    assert_eq!(out.reply, "<label>positive</label>");
    assert_eq!(out.attempt_count, 3);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "sys");
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "usr");
    assert!(seen[0].headers.starts_with("POST /v1/chat/completions "));
    assert!(!seen[0].headers.to_ascii_lowercase().contains("authorization"));
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, completion("x"))]);
    let backend = HttpBackend::new(config(url)).unwrap();
    match backend.chat(ChatExchange::new("s", "u")) {
        Err(LlmError::Transport { status: Some(400), .. }) => {}
        other => panic!("expected a 400 transport error, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn gives_up_after_max_retries() {
    let (url, seen) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let mut cfg = config(url);
    cfg.max_retries = 2;
    let backend = HttpBackend::new(cfg).unwrap();
    assert!(matches!(
        backend.chat(ChatExchange::new("s", "u")),
        Err(LlmError::Transport { status: Some(500), .. })
    ));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_body_is_reported() {
    let (url, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    let backend = HttpBackend::new(config(url)).unwrap();
    assert!(matches!(backend.chat(ChatExchange::new("s", "u")), Err(LlmError::MalformedResponse(_))));
}

#[test]
fn bearer_token_from_environment() {
    let var = "MARGINSEL_HTTP_TEST_KEY";
    std::env::set_var(var, "secret-token");
    let (url, seen) = serve(vec![(200, completion("ok"))]);
    let mut cfg = config(url);
    cfg.api_key_env = Some(var.into());
    HttpBackend::new(cfg).unwrap().chat(ChatExchange::new("s", "u")).unwrap();
    let headers = seen.lock().unwrap()[0].headers.to_ascii_lowercase();
    assert!(headers.contains("authorization: bearer secret-token"));

    let mut cfg = config("http://127.0.0.1:1".into());
    cfg.api_key_env = Some("MARGINSEL_DEFINITELY_UNSET_VAR".into());
    assert!(matches!(HttpBackend::new(cfg), Err(LlmError::AuthMissing(_))));
}

#[test]
fn timeout_is_distinguished() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (_stream, _) = listener.accept().unwrap();
        thread::sleep(std::time::Duration::from_secs(3));
    });
    let mut cfg = config(format!("http://{addr}/v1"));
    cfg.timeout_secs = 0.3;
    cfg.max_retries = 0;
    let backend = HttpBackend::new(cfg).unwrap();
    assert!(matches!(backend.chat(ChatExchange::new("s", "u")), Err(LlmError::Timeout(_))));
}

#[test]
fn embeddings_endpoint() {
    let body = serde_json::json!({ "data": [{ "embedding": [0.5, -1.0, 2.0] }] }).to_string();
    let (url, seen) = serve(vec![(200, body)]);
    let mut cfg = config(url);
    cfg.embedding_model = Some("embedder".into());
    let v = HttpBackend::new(cfg).unwrap().embed("hello").unwrap();
    assert_eq!(v, vec![0.5, -1.0, 2.0]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body["model"], "embedder");
    assert_eq!(seen[0].body["input"], "hello");
}

#[test]
fn cache_serves_repeats_without_network() {
    let (url, seen) = serve(vec![(200, completion("<label>a</label>"))]);
    let dir = tempfile::tempdir().unwrap();
    let cached = CachedBackend::new(HttpBackend::new(config(url)).unwrap(), dir.path()).unwrap();
    let first = cached.chat(ChatExchange::new("s", "u")).unwrap();
    let second = cached.chat(ChatExchange::new("s", "u")).unwrap();
    assert_eq!(first.reply, second.reply);
    assert_eq!(second.attempt_count, 0);
    assert_eq!(cached.backend_calls(), 1);
    assert_eq!(seen.lock().unwrap().len(), 1);
}
