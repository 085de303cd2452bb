//! Model providers: chat completion and text embedding.
//!
//! Two implementations of each interface ship here: an HTTP client for
//! OpenAI-compatible services ([`http`]) and deterministic offline mocks
//! ([`mock`]). Every backend is `Send + Sync` and may be shared across
//! worker threads.

pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

pub use http::{HttpBackend, InFlightGate};
pub use mock::{mock_embed, ChaosLlm, MockEmbedder, MockRule, MockScript, SamplingLlm, ScriptedLlm};

pub const DEFAULT_API_KEY_ENV: &str = "CTXPIPE_API_KEY";
pub const MAX_RETRIES_LIMIT: u32 = 5;

/// A named JSON Schema constraining the model's reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFormat {
    pub name: String,
    pub schema: serde_json::Value,
}

impl ResponseFormat {
    /// Copy of the schema with every object property listed as required,
    /// as strict server-side decoding demands. Optional properties are
    /// already nullable, so the accepted replies only narrow.
    pub fn strict_schema(&self) -> serde_json::Value {
        fn strictify(v: &mut serde_json::Value) {
            if let Some(obj) = v.as_object_mut() {
                if let Some(props) = obj.get("properties").and_then(|p| p.as_object()) {
                    let names: Vec<serde_json::Value> = props.keys().cloned().map(Into::into).collect();
                    obj.insert("required".into(), serde_json::Value::Array(names));
                }
                for child in obj.values_mut() {
                    strictify(child);
                }
            } else if let Some(arr) = v.as_array_mut() {
                arr.iter_mut().for_each(strictify);
            }
        }
        let mut schema = self.schema.clone();
        strictify(&mut schema);
        schema
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_format: Option<ResponseFormat>,
    #[serde(default)]
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Result<Self> {
        let user_text = user_text.into();
        if user_text.trim().is_empty() {
            return Err(Error::Domain("completion request needs non-empty user text".into()));
        }
        Ok(CompletionRequest {
            system_text: system_text.into(),
            user_text,
            response_format: None,
            temperature: 0.0,
        })
    }

    pub fn with_format(mut self, format: ResponseFormat) -> Self {
        self.response_format = Some(format);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// The text mock matchers see: system text, a blank line, user text.
    pub fn match_text(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.user_text)
    }
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Returns the content of the first choice.
    fn complete(&self, req: &CompletionRequest) -> Result<String>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;

    /// One vector per input, order preserved, uniform dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for &T {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed(texts)
    }
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed(texts)
    }
}

/// Connection settings for an OpenAI-compatible service.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_batch_size")]
    pub embed_batch_size: usize,
}

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_timeout() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_in_flight() -> usize {
    4
}
fn default_batch_size() -> usize {
    64
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        BackendConfig {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key_env: default_api_key_env(),
            timeout_secs: default_timeout(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            max_in_flight: default_max_in_flight(),
            embed_batch_size: default_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        reqwest::Url::parse(&self.base_url)
            .map_err(|e| Error::Config(format!("base_url `{}`: {e}", self.base_url)))?;
        if self.model_id.trim().is_empty() {
            return Err(Error::Config("model_id is empty".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(Error::Config(format!("max_retries must be at most {MAX_RETRIES_LIMIT}")));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if self.max_in_flight == 0 || self.embed_batch_size == 0 {
            return Err(Error::Config("max_in_flight and embed_batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl std::fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendConfig")
            .field("base_url", &self.base_url)
            .field("model_id", &self.model_id)
            .field("api_key_env", &self.api_key_env)
            .field("timeout_secs", &self.timeout_secs)
            .field("max_retries", &self.max_retries)
            .field("temperature", &self.temperature)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}
