//! Selective context filtering.
//!
//! Each conversation segment is scored against the reference prompt and
//! irrelevant segments are dropped. Scoring is either cosine similarity of
//! embeddings (threshold or top-k) or a structured LLM request that returns
//! the indices worth keeping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{CompletionRequest, EmbeddingBackend, LlmBackend, ResponseFormat};
use crate::decomp::{extract_object, DecomposeOptions};
use crate::embedding::{cosine, EmbeddingVector};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.35;
pub const INDICES_FIELD: &str = "indices";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSegment {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    #[serde(rename = "topic", default)]
    pub topic_label: Option<String>,
    #[serde(default)]
    pub divergent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTree {
    pub segments: Vec<ContextSegment>,
    pub reference_prompt: String,
    #[serde(default)]
    pub main_topic: Option<String>,
}

impl ConversationTree {
    pub fn validate(&self) -> Result<()> {
        if self.reference_prompt.trim().is_empty() {
            return Err(Error::Domain("reference prompt is empty".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.index != i {
                return Err(Error::Domain(format!("segment at position {i} has index {}", seg.index)));
            }
            if seg.text.trim().is_empty() {
                return Err(Error::Domain(format!("segment {i} has empty text")));
            }
        }
        Ok(())
    }

    /// Synthesized trees alternate user/assistant starting with the user.
    pub fn validate_alternation(&self) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Assistant };
            if seg.speaker != expected {
                return Err(Error::Domain(format!("segment {i} should be spoken by {expected:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    VectorThreshold,
    VectorTopk,
    LlmSelect,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub always_keep_last_n: usize,
    #[serde(default)]
    pub backend_id: String,
    /// Set when an LLM selection was rejected and every segment was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_open: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    #[serde(rename = "kept")]
    pub kept_indices: Vec<usize>,
    pub scores: Option<BTreeMap<usize, f64>>,
    pub method: FilterMethod,
    pub params: FilterParams,
}

impl FilterResult {
    pub fn kept_set(&self) -> BTreeSet<usize> {
        self.kept_indices.iter().copied().collect()
    }
}

/// Embeds every segment, then the reference prompt (last).
pub fn embed_segments(tree: &ConversationTree, backend: &dyn EmbeddingBackend) -> Result<Vec<EmbeddingVector>> {
    tree.validate()?;
    let mut texts: Vec<String> = tree.segments.iter().map(|s| s.text.clone()).collect();
    texts.push(tree.reference_prompt.clone());
    let vecs = backend.embed(&texts)?;
    if vecs.len() != texts.len() {
        return Err(Error::backend(format!("expected {} embeddings, got {}", texts.len(), vecs.len())));
    }
    let dim = vecs[0].dim();
    if let Some(bad) = vecs.iter().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: bad.dim() });
    }
    Ok(vecs)
}

/// Cosine similarity of each segment vector to the query vector.
pub fn relevance_scores(
    segment_vecs: &[EmbeddingVector],
    query_vec: &EmbeddingVector,
) -> Result<BTreeMap<usize, f64>> {
    if query_vec.is_zero() {
        return Err(Error::ZeroVector(segment_vecs.len()));
    }
    segment_vecs
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.dim() != query_vec.dim() {
                return Err(Error::DimensionMismatch { expected: query_vec.dim(), actual: v.dim() });
            }
            if v.is_zero() {
                return Err(Error::ZeroVector(i));
            }
            cosine(v, query_vec).map(|s| (i, s))
        })
        .collect()
}

fn check_keep_last(n: usize, universe: usize) -> Result<()> {
    if n > universe {
        return Err(Error::Domain(format!("always_keep_last_n {n} exceeds segment count {universe}")));
    }
    Ok(())
}

/// Indices with score >= `threshold`, plus the last `keep_last` indices.
pub fn threshold_kept(scores: &BTreeMap<usize, f64>, threshold: f64, keep_last: usize) -> Vec<usize> {
    let universe = scores.len();
    scores
        .iter()
        .filter(|(i, s)| **s >= threshold || **i + keep_last >= universe)
        .map(|(i, _)| *i)
        .collect()
}

pub fn filter_vector(
    tree: &ConversationTree,
    backend: &dyn EmbeddingBackend,
    threshold: f64,
    always_keep_last_n: usize,
) -> Result<FilterResult> {
    check_keep_last(always_keep_last_n, tree.len())?;
    let vecs = embed_segments(tree, backend)?;
    filter_vector_embedded(&vecs, threshold, always_keep_last_n, backend.id())
}

/// Threshold filtering over precomputed embeddings (segments then query).
pub fn filter_vector_embedded(
    vecs: &[EmbeddingVector],
    threshold: f64,
    always_keep_last_n: usize,
    backend_id: &str,
) -> Result<FilterResult> {
    let (query, segments) = vecs.split_last().ok_or_else(|| Error::Domain("no query embedding".into()))?;
    check_keep_last(always_keep_last_n, segments.len())?;
    let scores = relevance_scores(segments, query)?;
    Ok(FilterResult {
        kept_indices: threshold_kept(&scores, threshold, always_keep_last_n),
        scores: Some(scores),
        method: FilterMethod::VectorThreshold,
        params: FilterParams {
            threshold: Some(threshold),
            always_keep_last_n,
            backend_id: backend_id.to_string(),
            ..Default::default()
        },
    })
}

/// Keeps the `k` best-scoring segments (ties toward the lower index), plus
/// the last `always_keep_last_n`.
pub fn filter_topk(
    tree: &ConversationTree,
    backend: &dyn EmbeddingBackend,
    k: usize,
    always_keep_last_n: usize,
) -> Result<FilterResult> {
    check_keep_last(always_keep_last_n, tree.len())?;
    let vecs = embed_segments(tree, backend)?;
    let (query, segments) = vecs.split_last().expect("embed_segments returns the query vector");
    let scores = relevance_scores(segments, query)?;
    let mut ranked: Vec<(usize, f64)> = scores.iter().map(|(i, s)| (*i, *s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: BTreeSet<usize> = ranked.iter().take(k).map(|(i, _)| *i).collect();
    kept.extend(tree.len() - always_keep_last_n..tree.len());
    Ok(FilterResult {
        kept_indices: kept.into_iter().collect(),
        scores: Some(scores),
        method: FilterMethod::VectorTopk,
        params: FilterParams {
            top_k: Some(k),
            always_keep_last_n,
            backend_id: backend.id().to_string(),
            ..Default::default()
        },
    })
}

pub fn selection_format(universe: usize) -> ResponseFormat {
    ResponseFormat {
        name: "context_selection".into(),
        schema: json!({
            "type": "object",
            "properties": {
                INDICES_FIELD: {
                    "type": "array",
                    "description": "Indices of the context segments relevant to the prompt.",
                    "items": {"type": "integer", "minimum": 0, "maximum": universe.saturating_sub(1)}
                }
            },
            "required": [INDICES_FIELD],
            "additionalProperties": false,
        }),
    }
}

pub fn selection_request(
    tree: &ConversationTree,
    context: Option<&str>,
    temperature: f64,
) -> Result<CompletionRequest> {
    let system = "You are given numbered segments of a conversation and the user's latest prompt. \
                  Select the segments that are relevant to the latest prompt and reply with their indices \
                  as a JSON object that follows the response format.";
    let mut user = String::new();
    if let Some(ctx) = context.map(str::trim).filter(|c| !c.is_empty()) {
        user.push_str(&format!("Context:\n<<<\n{ctx}\n>>>\n\n"));
    }
    user.push_str("Segments:\n");
    for seg in &tree.segments {
        let who = match seg.speaker {
            Speaker::User => "user",
            Speaker::Assistant => "assistant",
        };
        user.push_str(&format!("[{}] {who}: {}\n", seg.index, seg.text));
    }
    user.push_str(&format!("\nPrompt: {}", tree.reference_prompt));
    Ok(CompletionRequest::new(system, user)?
        .with_format(selection_format(tree.len()))
        .with_temperature(temperature))
}

/// Parses an index selection, deduplicated and sorted.
pub fn parse_selection(raw: &str, universe: usize) -> Result<Vec<usize>> {
    let value: Value = match serde_json::from_str(raw.trim()) {
        Ok(v) => v,
        Err(_) => {
            let obj = extract_object(raw).ok_or(Error::Unrepairable)?;
            serde_json::from_str(obj).map_err(|e| Error::MalformedOutput(e.to_string()))?
        }
    };
    let obj = value.as_object().ok_or_else(|| Error::MalformedOutput("reply is not an object".into()))?;
    if let Some(extra) = obj.keys().find(|k| k.as_str() != INDICES_FIELD) {
        return Err(Error::SchemaViolation(format!("unexpected property `{extra}`")));
    }
    let items = obj
        .get(INDICES_FIELD)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::SchemaViolation(format!("`{INDICES_FIELD}` must be an array")))?;
    let mut kept = BTreeSet::new();
    for item in items {
        match item.as_u64() {
            Some(i) if (i as usize) < universe => {
                kept.insert(i as usize);
            }
            _ => return Err(Error::SchemaViolation(format!("index {item} is out of range 0..{universe}"))),
        }
    }
    Ok(kept.into_iter().collect())
}

/// Asks the LLM which segments to keep. Invalid selections (after the
/// retry budget in `opts.max_repairs`) keep every segment.
pub fn filter_llm(
    tree: &ConversationTree,
    backend: &dyn LlmBackend,
    opts: &DecomposeOptions,
    context: Option<&str>,
) -> Result<FilterResult> {
    tree.validate()?;
    opts.validate()?;
    let mut params = FilterParams { backend_id: backend.id().to_string(), ..Default::default() };
    if tree.is_empty() {
        return Ok(FilterResult { kept_indices: vec![], scores: None, method: FilterMethod::LlmSelect, params });
    }
    let req = selection_request(tree, context, opts.temperature)?;
    let mut last_err = None;
    for _ in 0..=opts.max_repairs {
        let raw = backend.complete(&req)?;
        match parse_selection(&raw, tree.len()) {
            Ok(kept) => {
                return Ok(FilterResult { kept_indices: kept, scores: None, method: FilterMethod::LlmSelect, params })
            }
            Err(e) => last_err = Some(e),
        }
    }
    params.fail_open = last_err.map(|e| e.to_string());
    Ok(FilterResult {
        kept_indices: (0..tree.len()).collect(),
        scores: None,
        method: FilterMethod::LlmSelect,
        params,
    })
}
