//! Deterministic offline backends.
//!
//! * [`ScriptedLlm`] answers from an ordered rule list (first match wins).
//! * [`SamplingLlm`] answers any structured request with a conforming
//!   instance of its response format, chosen by hashing the request.
//! * [`MockEmbedder`] projects a bag of tokens onto fixed pseudo-random unit
//!   vectors, so texts sharing words have high cosine similarity.
//!
//! All three are pure functions of their inputs.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{CompletionRequest, EmbeddingBackend, LlmBackend};
use crate::decomp::CATEGORY_FIELD;
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::hash;

pub const MIN_MOCK_DIM: usize = 8;

#[derive(Debug, Clone)]
pub enum MockRule {
    /// Matches when every needle occurs in the request text.
    Contains(Vec<String>),
    Regex(Regex),
}

impl MockRule {
    pub fn matches(&self, text: &str) -> bool {
        match self {
            MockRule::Contains(needles) => needles.iter().all(|n| text.contains(n.as_str())),
            MockRule::Regex(re) => re.is_match(text),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockScript {
    pub id: String,
    pub rules: Vec<(MockRule, String)>,
    pub default_response: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(default)]
    contains: Vec<String>,
    #[serde(default)]
    regex: Option<String>,
    response: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    rules: Vec<RawRule>,
    default: Value,
}

/// Responses may be written as JSON values for readability; non-strings are
/// re-serialized compactly.
fn response_text(v: Value) -> String {
    match v {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

impl MockScript {
    pub fn new(default_response: impl Into<String>) -> Self {
        MockScript { id: "mock-script".into(), rules: Vec::new(), default_response: default_response.into() }
    }

    pub fn rule(mut self, rule: MockRule, response: impl Into<String>) -> Self {
        self.rules.push((rule, response.into()));
        self
    }

    pub fn when_contains(self, needles: &[&str], response: impl Into<String>) -> Self {
        let rule = MockRule::Contains(needles.iter().map(|s| s.to_string()).collect());
        self.rule(rule, response)
    }

    /// Parses a `.mock` script document.
    pub fn parse(document: &str) -> Result<Self> {
        let raw: RawScript =
            serde_json::from_str(document).map_err(|e| Error::Parse(format!("mock script: {e}")))?;
        let mut rules = Vec::with_capacity(raw.rules.len());
        for (i, r) in raw.rules.into_iter().enumerate() {
            let rule = match (r.regex, r.contains.is_empty()) {
                (Some(_), false) => {
                    return Err(Error::Parse(format!("mock rule #{i}: use either `contains` or `regex`")))
                }
                (Some(re), true) => MockRule::Regex(
                    Regex::new(&re).map_err(|e| Error::Parse(format!("mock rule #{i}: {e}")))?,
                ),
                (None, false) => MockRule::Contains(r.contains),
                (None, true) => return Err(Error::Parse(format!("mock rule #{i} has no matcher"))),
            };
            rules.push((rule, response_text(r.response)));
        }
        Ok(MockScript {
            id: raw.id.unwrap_or_else(|| "mock-script".into()),
            rules,
            default_response: response_text(raw.default),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn respond(&self, text: &str) -> &str {
        self.rules
            .iter()
            .find(|(rule, _)| rule.matches(text))
            .map(|(_, response)| response.as_str())
            .unwrap_or(&self.default_response)
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedLlm {
    script: MockScript,
    id: String,
}

impl ScriptedLlm {
    pub fn new(script: MockScript) -> Self {
        let id = format!("mock:{}", script.id);
        ScriptedLlm { script, id }
    }
}

impl LlmBackend for ScriptedLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        Ok(self.script.respond(&req.match_text()).to_string())
    }
}

/// Answers structured requests with a hash-chosen instance of the requested
/// format. Identical requests always get identical answers.
#[derive(Debug, Clone)]
pub struct SamplingLlm {
    seed: u64,
    id: String,
}

impl SamplingLlm {
    pub fn new(seed: u64) -> Self {
        SamplingLlm { seed, id: format!("mock:sampling:{seed}") }
    }
}

struct Draws {
    key: u64,
    counter: u64,
}

impl Draws {
    fn next(&mut self) -> u64 {
        self.counter += 1;
        hash::counter_u64(self.key, self.counter)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n.max(1)
    }
}

/// The prompt portion of a request: text after the last `Prompt:` marker.
fn prompt_portion(user_text: &str) -> &str {
    user_text.rsplit_once("Prompt:").map(|(_, p)| p).unwrap_or(user_text).trim()
}

fn first_sentence(text: &str) -> String {
    let end = text.find(['.', '?', '!']).map(|i| i + 1).unwrap_or(text.len());
    text[..end].trim().to_string()
}

fn sample_value(schema: &Value, draws: &mut Draws, words: &[&str]) -> Value {
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if options.is_empty() {
            return Value::Null;
        }
        return options[draws.below(options.len() as u64) as usize].clone();
    }
    let types: Vec<&str> = match schema.get("type") {
        Some(Value::String(t)) => vec![t.as_str()],
        Some(Value::Array(ts)) => ts.iter().filter_map(Value::as_str).collect(),
        _ => vec!["string"],
    };
    let nullable = types.contains(&"null");
    let concrete: Vec<&str> = types.iter().copied().filter(|t| *t != "null").collect();
    if nullable && (concrete.is_empty() || draws.below(3) == 0) {
        return Value::Null;
    }
    match concrete.first().copied().unwrap_or("string") {
        "object" => sample_object(schema, draws, words),
        "array" => {
            let items = schema.get("items").cloned().unwrap_or(json!({"type": "string"}));
            let lo = items.get("minimum").and_then(Value::as_i64);
            let hi = items.get("maximum").and_then(Value::as_i64);
            match (lo, hi) {
                (Some(lo), Some(hi)) if hi >= lo => {
                    Value::Array((lo..=hi).filter(|_| draws.below(2) == 0).map(Value::from).collect())
                }
                _ => {
                    let n = draws.below(3);
                    Value::Array((0..n).map(|_| sample_value(&items, draws, words)).collect())
                }
            }
        }
        "integer" => {
            let lo = schema.get("minimum").and_then(Value::as_i64).unwrap_or(0);
            let hi = schema.get("maximum").and_then(Value::as_i64).unwrap_or(lo + 9).max(lo);
            Value::from(lo + draws.below((hi - lo + 1) as u64) as i64)
        }
        "number" => Value::from(draws.below(1000) as f64 / 1000.0),
        "boolean" => Value::Bool(draws.below(2) == 0),
        _ => {
            if words.is_empty() {
                return Value::String("unspecified".into());
            }
            let start = draws.below(words.len() as u64) as usize;
            let len = 1 + draws.below(6) as usize;
            let end = (start + len).min(words.len());
            Value::String(words[start..end].join(" "))
        }
    }
}

fn sample_object(schema: &Value, draws: &mut Draws, words: &[&str]) -> Value {
    let mut out = serde_json::Map::new();
    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        for (name, prop) in props {
            out.insert(name.clone(), sample_value(prop, draws, words));
        }
    }
    Value::Object(out)
}

impl LlmBackend for SamplingLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        let prompt = prompt_portion(&req.user_text);
        let Some(format) = &req.response_format else {
            return Ok(first_sentence(prompt));
        };
        let mut material = req.match_text();
        material.push_str(&format.schema.to_string());
        let mut draws = Draws { key: hash::seeded(self.seed, material.as_bytes()), counter: 0 };
        let words: Vec<&str> = prompt.split_whitespace().collect();
        Ok(sample_object(&format.schema, &mut draws, &words).to_string())
    }
}

/// Like [`SamplingLlm`], but a share of replies is broken: garbage text, an
/// unknown category, a code-fenced object, an extra property, a non-string
/// category or a truncated object. Fault choice is a pure function of the
/// request, so repeated requests fail the same way.
#[derive(Debug, Clone)]
pub struct ChaosLlm {
    inner: SamplingLlm,
    fault_per_mille: u64,
    id: String,
}

impl ChaosLlm {
    /// `fault_rate` is clamped to [0, 1].
    pub fn new(seed: u64, fault_rate: f64) -> Self {
        let fault_per_mille = (fault_rate.clamp(0.0, 1.0) * 1000.0).round() as u64;
        ChaosLlm { inner: SamplingLlm::new(seed), fault_per_mille, id: format!("mock:chaos:{seed}:{fault_per_mille}") }
    }
}

impl LlmBackend for ChaosLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        let good = self.inner.complete(req)?;
        let mut draws = Draws { key: hash::seeded(self.inner.seed ^ 0x9e37, req.match_text().as_bytes()), counter: 0 };
        if draws.below(1000) >= self.fault_per_mille {
            return Ok(good);
        }
        let obj = serde_json::from_str::<Value>(&good).ok().and_then(|v| v.as_object().cloned());
        let reply = match (draws.below(6), obj) {
            (1, Some(mut o)) => {
                o.insert(CATEGORY_FIELD.into(), Value::from("no_such_category"));
                Value::Object(o).to_string()
            }
            (2, _) => format!("Sure! Here you go:\n```json\n{good}\n```"),
            (3, Some(mut o)) => {
                o.insert("unexpected_extra".into(), Value::from(true));
                Value::Object(o).to_string()
            }
            (4, Some(mut o)) => {
                o.insert(CATEGORY_FIELD.into(), Value::from(7));
                Value::Object(o).to_string()
            }
            (5, _) => good.chars().take(good.chars().count() / 2).collect(),
            _ => "I am not sure what you mean.".to_string(),
        };
        Ok(reply)
    }
}

fn tokenize(text: &str) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        *counts.entry(token.to_lowercase()).or_insert(0) += 1;
    }
    counts
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let key = hash::seeded(seed, token.as_bytes());
    let raw: Vec<f64> = (0..dim as u64).map(|i| hash::counter_unit_interval(key, i)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.into_iter().map(|x| x / norm).collect()
}

/// Unnormalized bag-of-tokens projection. Text without tokens maps to the
/// zero vector, which similarity scoring rejects.
///
/// Panics if `dim < 8`.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> EmbeddingVector {
    assert!(dim >= MIN_MOCK_DIM, "mock embedding dimension must be at least {MIN_MOCK_DIM}");
    let mut acc = vec![0.0f64; dim];
    // Sorted token order makes the sum independent of word order.
    for (token, count) in tokenize(text) {
        let w = f64::from(count);
        for (a, t) in acc.iter_mut().zip(token_vector(&token, dim, seed)) {
            *a += w * t;
        }
    }
    EmbeddingVector::new(acc).expect("mock embedding components are finite")
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    id: String,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < MIN_MOCK_DIM {
            return Err(Error::Config(format!("mock embedding dim must be >= {MIN_MOCK_DIM}")));
        }
        Ok(MockEmbedder { dim, seed, id: format!("mock:embed:{dim}:{seed}") })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::Domain("embed needs at least one text".into()));
        }
        Ok(texts.iter().map(|t| mock_embed(t, self.dim, self.seed)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;

    #[test]
    fn script_first_match_then_default() {
        let script = MockScript::new("fallback")
            .when_contains(&["Exercises"], "listing2")
            .when_contains(&["Exercises", "never"], "unreachable");
        let llm = ScriptedLlm::new(script);
        let req = CompletionRequest::new("", "Create a document named 'Exercises'").unwrap();
        assert_eq!(llm.complete(&req).unwrap(), "listing2");
        let other = CompletionRequest::new("", "hello").unwrap();
        assert_eq!(llm.complete(&other).unwrap(), "fallback");
    }

    #[test]
    fn parse_script_document() {
        let doc = r#"{"id":"t","rules":[{"regex":"^sys","response":{"a":1}},{"contains":["x"],"response":"plain"}],"default":"d"}"#;
        let s = MockScript::parse(doc).unwrap();
        assert_eq!(s.respond("system"), r#"{"a":1}"#);
        assert_eq!(s.respond("zzx"), "plain");
        assert_eq!(s.respond("zz"), "d");
        assert!(MockScript::parse(r#"{"rules":[]}"#).is_err());
        assert!(MockScript::parse(r#"{"rules":[{"response":"r"}],"default":""}"#).is_err());
    }

    #[test]
    fn empty_text_embeds_to_zero() {
        assert!(mock_embed("", 64, 3).is_zero());
        assert!(mock_embed("  ,.; ", 64, 3).is_zero());
    }

    #[test]
    fn repeated_token_is_linear() {
        let one = mock_embed("cat", 32, 9);
        let two = mock_embed("cat cat", 32, 9);
        assert_eq!(two, one.scaled(2.0));
    }

    #[test]
    fn word_order_and_case_do_not_matter() {
        let a = mock_embed("alpha beta gamma", 64, 1);
        let b = mock_embed("Gamma, BETA alpha", 64, 1);
        assert_eq!(a, b);
        assert_eq!(cosine(&mock_embed("alpha beta", 64, 1), &mock_embed("beta alpha", 64, 1)).unwrap(), 1.0);
    }

    #[test]
    fn shared_words_raise_similarity() {
        let base = mock_embed("create document", 256, 0);
        let near = cosine(&base, &mock_embed("create a document", 256, 0)).unwrap();
        let far = cosine(&base, &mock_embed("delete account", 256, 0)).unwrap();
        assert!(far < near, "far={far} near={near}");
    }

    #[test]
    #[should_panic]
    fn tiny_dim_panics() {
        mock_embed("x", 4, 0);
    }

    #[test]
    fn sampling_llm_is_deterministic_and_conforming() {
        let llm = SamplingLlm::new(5);
        let schema = json!({
            "type": "object",
            "properties": {
                "input_type": {"type": "string", "enum": ["a", "b", "c"]},
                "note": {"type": ["string", "null"]},
                "indices": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 4}}
            }
        });
        let req = CompletionRequest::new("sys", "Prompt: some words here")
            .unwrap()
            .with_format(super::super::ResponseFormat { name: "x".into(), schema });
        let a = llm.complete(&req).unwrap();
        assert_eq!(a, llm.complete(&req).unwrap());
        let v: Value = serde_json::from_str(&a).unwrap();
        assert!(["a", "b", "c"].contains(&v["input_type"].as_str().unwrap()));
        for i in v["indices"].as_array().unwrap() {
            assert!((0..=4).contains(&i.as_i64().unwrap()));
        }
    }

    #[test]
    fn sampling_llm_restates_first_sentence_without_format() {
        let llm = SamplingLlm::new(0);
        let req = CompletionRequest::new("s", "Restate.\nPrompt: Do this now. Then that.").unwrap();
        assert_eq!(llm.complete(&req).unwrap(), "Do this now.");
    }

    #[test]
    fn chaos_fault_rate() {
        let format = super::super::ResponseFormat {
            name: "t".into(),
            schema: json!({"type": "object", "properties": {"input_type": {"type": "string", "enum": ["a", "b"]}},
                "required": ["input_type"], "additionalProperties": false}),
        };
        let valid = |raw: &str| {
            serde_json::from_str::<Value>(raw)
                .ok()
                .and_then(|v| v.as_object().cloned())
                .is_some_and(|o| o.len() == 1 && matches!(o.get("input_type").and_then(Value::as_str), Some("a" | "b")))
        };
        for (rate, lo, hi) in [(0.0, 400, 400), (1.0, 0, 0), (0.5, 140, 260)] {
            let llm = ChaosLlm::new(3, rate);
            let ok = (0..400)
                .filter(|i| {
                    let req = CompletionRequest::new("s", format!("Prompt: item {i}")).unwrap().with_format(format.clone());
                    let a = llm.complete(&req).unwrap();
                    assert_eq!(a, llm.complete(&req).unwrap());
                    valid(&a)
                })
                .count();
            assert!((lo..=hi).contains(&ok), "rate {rate}: {ok} valid");
        }
    }
}
