//! HttpBackend against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ctxpipe::backend::http::HttpBackend;
use ctxpipe::backend::ResponseFormat;
use ctxpipe::{BackendConfig, CompletionRequest, EmbeddingBackend, Error, LlmBackend};
use serde_json::{json, Value};

const KEY: &str = "sk-test-7f3a91c2e5";

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Seen) -> (u16, String) + Send + Sync;

struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0;
    let mut authorization = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => len = value.trim().parse().ok()?,
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen { path, authorization, body: serde_json::from_slice(&body).unwrap_or(Value::Null) })
}

fn serve(handler: Box<Handler>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handler: Arc<Handler> = Arc::from(handler);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (log, handler) = (log.clone(), handler.clone());
            std::thread::spawn(move || {
                let Some(req) = read_request(&mut stream) else { return };
                let n = {
                    let mut log = log.lock().unwrap();
                    log.push(req.clone());
                    log.len() - 1
                };
                let (status, body) = handler(n, &req);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            });
        }
    });
    Stub { url, seen }
}

fn backend(stub: &Stub, max_retries: u32) -> HttpBackend {
    let mut cfg = BackendConfig::new(stub.url.clone(), "test-model");
    cfg.max_retries = max_retries;
    cfg.timeout_secs = 5.0;
    HttpBackend::with_key(cfg, KEY).unwrap().with_backoff(Duration::from_millis(1))
}

fn chat_reply(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn request() -> CompletionRequest {
    CompletionRequest::new("system", "Prompt: hello").unwrap()
}

#[test]
fn server_errors_are_retried_then_surface() {
    let stub = serve(Box::new(|_, _| (500, r#"{"error":"boom"}"#.into())));
    let err = backend(&stub, 2).complete(&request()).unwrap_err();
    assert!(matches!(err, Error::Backend { status: Some(500), .. }), "{err:?}");
    assert_eq!(stub.seen.lock().unwrap().len(), 3);
}

#[test]
fn rate_limit_then_success() {
    let stub = serve(Box::new(|n, _| if n == 0 { (429, "{}".into()) } else { (200, chat_reply("fine")) }));
    assert_eq!(backend(&stub, 3).complete(&request()).unwrap(), "fine");
    assert_eq!(stub.seen.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = serve(Box::new(|_, _| (400, r#"{"error":"bad"}"#.into())));
    let err = backend(&stub, 3).complete(&request()).unwrap_err();
    assert!(matches!(err, Error::Backend { status: Some(400), .. }));
    assert_eq!(stub.seen.lock().unwrap().len(), 1);
}

#[test]
fn transport_failures_are_backend_errors() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = BackendConfig::new(url, "m");
    cfg.max_retries = 1;
    let b = HttpBackend::with_key(cfg, KEY).unwrap().with_backoff(Duration::from_millis(1));
    let err = b.complete(&request()).unwrap_err();
    assert!(matches!(err, Error::Backend { status: None, .. }), "{err:?}");
    assert!(!err.to_string().contains(KEY));
}

#[test]
fn chat_request_shape_and_auth() {
    let stub = serve(Box::new(|_, _| (200, chat_reply(r#"{"input_type":"a"}"#))));
    let format = ResponseFormat {
        name: "decomposition_level".into(),
        schema: json!({"type": "object", "properties": {"input_type": {"type": "string", "enum": ["a"]},
            "note": {"type": ["string", "null"]}}, "required": ["input_type"], "additionalProperties": false}),
    };
    let req = request().with_format(format).with_temperature(0.0);
    backend(&stub, 0).complete(&req).unwrap();
    let seen = stub.seen.lock().unwrap()[0].clone();
    assert_eq!(seen.path, "/v1/chat/completions");
    assert_eq!(seen.authorization.as_deref(), Some(format!("Bearer {KEY}").as_str()));
    assert_eq!(seen.body["model"], "test-model");
    assert_eq!(seen.body["messages"][1]["content"], "Prompt: hello");
    let rf = &seen.body["response_format"];
    assert_eq!(rf["type"], "json_schema");
    assert_eq!(rf["json_schema"]["strict"], true);
    assert_eq!(rf["json_schema"]["schema"]["required"], json!(["input_type", "note"]));
}

#[test]
fn embeddings_are_reordered_by_index() {
    // Each vector encodes its text length; the stub answers in reverse order.
    let stub = serve(Box::new(|_, req| {
        let inputs = req.body["input"].as_array().cloned().unwrap_or_default();
        let mut data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| json!({"index": i, "embedding": [t.as_str().unwrap().len() as f64, 1.0]}))
            .collect();
        data.reverse();
        (200, json!({"data": data}).to_string())
    }));
    let mut cfg = BackendConfig::new(stub.url.clone(), "e");
    cfg.embed_batch_size = 2;
    let b = HttpBackend::with_key(cfg, KEY).unwrap();
    let texts: Vec<String> = (1..=5).map(|n| "x".repeat(n)).collect();
    let vecs = b.embed(&texts).unwrap();
    let firsts: Vec<f64> = vecs.iter().map(|v| v.values()[0]).collect();
    assert_eq!(firsts, [1.0, 2.0, 3.0, 4.0, 5.0]);
    let seen = stub.seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|s| s.path == "/v1/embeddings"));
}

#[test]
fn embedding_count_mismatch_is_an_error() {
    let stub = serve(Box::new(|_, _| (200, json!({"data": [{"index": 0, "embedding": [1.0]}]}).to_string())));
    let b = backend(&stub, 0);
    let err = b.embed(&["a".to_string(), "b".to_string()]).unwrap_err();
    assert!(matches!(err, Error::Backend { .. }));
}

#[test]
fn key_never_appears_in_debug_or_errors() {
    let stub = serve(Box::new(|_, _| (503, "unavailable".into())));
    let b = backend(&stub, 0);
    assert!(!format!("{b:?}").contains(KEY));
    assert!(!format!("{:?}", b.config()).contains(KEY));
    let err = b.complete(&request()).unwrap_err();
    assert!(!err.to_string().contains(KEY));
    assert!(!format!("{err:?}").contains(KEY));
}

#[test]
fn missing_key_variable_is_a_config_error() {
    let mut cfg = BackendConfig::new("http://127.0.0.1:9", "m");
    cfg.api_key_env = "CTXPIPE_TEST_UNSET_KEY_VARIABLE".into();
    assert!(matches!(HttpBackend::from_env(cfg), Err(Error::Config(_))));
}
