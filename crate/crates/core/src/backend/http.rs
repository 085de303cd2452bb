//! Blocking client for OpenAI-compatible `/chat/completions` and
//! `/embeddings` endpoints.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendConfig, CompletionRequest, EmbeddingBackend, LlmBackend};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(500);

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
pub struct InFlightGate {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct GatePermit<'a>(&'a InFlightGate);

impl InFlightGate {
    pub fn new(limit: usize) -> Self {
        InFlightGate { limit: limit.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    cfg: BackendConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
    backoff: Duration,
    id: String,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("id", &self.id)
            .field("cfg", &self.cfg)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
    index: usize,
}

enum Attempt {
    Retry(Error),
    Fatal(Error),
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in `cfg`.
    pub fn from_env(cfg: BackendConfig) -> Result<Self> {
        let key = std::env::var(&cfg.api_key_env)
            .map_err(|_| Error::Config(format!("environment variable {} is not set", cfg.api_key_env)))?;
        Self::with_key(cfg, key)
    }

    pub fn with_key(cfg: BackendConfig, api_key: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .pool_max_idle_per_host(cfg.max_in_flight)
            .build()
            .map_err(|e| Error::backend(e.to_string()))?;
        Ok(HttpBackend {
            id: format!("http:{}", cfg.model_id),
            gate: InFlightGate::new(cfg.max_in_flight),
            api_key: api_key.into(),
            backoff: DEFAULT_BACKOFF,
            client,
            cfg,
        })
    }

    /// Overrides the first retry delay (500 ms by default; doubles per retry).
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &Value) -> std::result::Result<Value, Attempt> {
        let _permit = self.gate.acquire();
        let resp = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| Attempt::Retry(Error::backend(format!("transport: {}", e.without_url()))))?;
        let status = resp.status();
        if status.is_success() {
            return resp
                .json::<Value>()
                .map_err(|e| Attempt::Fatal(Error::backend(format!("invalid response body: {e}"))));
        }
        let text = resp.text().unwrap_or_default();
        let err = Error::Backend { status: Some(status.as_u16()), cause: truncate(&text, 300) };
        if status.as_u16() == 429 || status.is_server_error() {
            Err(Attempt::Retry(err))
        } else {
            Err(Attempt::Fatal(err))
        }
    }

    fn post_json(&self, path: &str, body: &Value) -> Result<Value> {
        let url = self.endpoint(path);
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    if attempt >= self.cfg.max_retries {
                        return Err(e);
                    }
                    log::warn!("{path}: attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    pub fn chat_body(&self, req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.cfg.model_id,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
        });
        if let Some(format) = &req.response_format {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {"name": format.name, "schema": format.strict_schema(), "strict": true},
            });
        }
        body
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = json!({"model": self.cfg.model_id, "input": texts});
        let value = self.post_json("embeddings", &body)?;
        let mut resp: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| Error::backend(format!("invalid embeddings response: {e}")))?;
        if resp.data.len() != texts.len() {
            return Err(Error::backend(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data.sort_by_key(|d| d.index);
        if resp.data.iter().enumerate().any(|(i, d)| d.index != i) {
            return Err(Error::backend("embedding indices are not a permutation of the inputs"));
        }
        resp.data
            .into_iter()
            .map(|d| EmbeddingVector::new(d.embedding).map_err(|e| Error::backend(e.to_string())))
            .collect()
    }
}

fn truncate(s: &str, n: usize) -> String {
    match s.char_indices().nth(n) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        let value = self.post_json("chat/completions", &self.chat_body(req))?;
        let resp: ChatResponse = serde_json::from_value(value)
            .map_err(|e| Error::backend(format!("invalid chat response: {e}")))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::backend("response has no message content"))
    }
}

impl EmbeddingBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    /// Splits `texts` into batches dispatched concurrently (bounded by the
    /// in-flight gate) and reassembles them in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(Error::Domain("embed needs non-empty texts".into()));
        }
        let batches: Vec<&[String]> = texts.chunks(self.cfg.embed_batch_size).collect();
        let results: Vec<Result<Vec<EmbeddingVector>>> = std::thread::scope(|scope| {
            let handles: Vec<_> =
                batches.iter().map(|b| scope.spawn(move || self.embed_batch(b))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::backend("embedding worker panicked"))))
                .collect()
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        if let Some(first) = out.first() {
            let dim = first.dim();
            if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
                return Err(Error::DimensionMismatch { expected: dim, actual: bad.dim() });
            }
        }
        Ok(out)
    }
}
