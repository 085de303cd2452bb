//! Top-down semantic decomposition of a prompt through a schema.
//!
//! At every level the backend is asked to pick one of the current node's
//! children under a JSON Schema response format, plus any fields the node
//! declares. Replies are validated client side; malformed replies are
//! repaired or re-requested a bounded number of times and otherwise resolve
//! to the level's fallback category.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backend::{CompletionRequest, LlmBackend, ResponseFormat};
use crate::error::{Error, Result};
use crate::schema::{CategoryId, DecompositionSchema, FieldSpec};

/// Property carrying the chosen category in every level's reply.
pub const CATEGORY_FIELD: &str = "input_type";

pub const RESPONSE_FORMAT_NAME: &str = "decomposition_level";

pub const DEFAULT_RESUMMARIZE_TEMPLATE: &str = include_str!("../../../prompts/resummarize.txt");

pub const MAX_REPAIRS_LIMIT: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelConstraint {
    pub allowed_categories: Vec<(CategoryId, String)>,
    pub fields: Vec<FieldSpec>,
    pub fallback: CategoryId,
}

impl LevelConstraint {
    pub fn allows(&self, id: &str) -> bool {
        self.allowed_categories.iter().any(|(c, _)| c == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLevelOutput {
    pub category: CategoryId,
    #[serde(rename = "fields")]
    pub field_values: IndexMap<String, Option<String>>,
}

impl ParsedLevelOutput {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.field_values.get(name).and_then(|v| v.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub attempt: u32,
    pub request: String,
    pub response: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    #[serde(rename = "prompt")]
    pub original_prompt: String,
    pub path: Vec<CategoryId>,
    pub levels: Vec<ParsedLevelOutput>,
    pub summaries: Vec<Option<String>>,
    pub backend_id: String,
    /// Set when some level fell back after exhausting its repair budget.
    #[serde(skip)]
    pub degraded: bool,
    #[serde(skip)]
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeOptions {
    pub resummarize: bool,
    pub max_repairs: u32,
    pub temperature: f64,
    /// Instruction for restating the prompt between levels; `{path}` is
    /// replaced by the categories chosen so far.
    pub resummarize_template: Arc<str>,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions {
            resummarize: false,
            max_repairs: 2,
            temperature: 0.0,
            resummarize_template: Arc::from(DEFAULT_RESUMMARIZE_TEMPLATE.trim()),
        }
    }
}

impl DecomposeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_repairs > MAX_REPAIRS_LIMIT {
            return Err(Error::Config(format!("max_repairs must be at most {MAX_REPAIRS_LIMIT}")));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn build_level_constraint(
    schema: &DecompositionSchema,
    path_prefix: &[CategoryId],
) -> Result<LevelConstraint> {
    let children = schema.children_at(path_prefix)?;
    let fields = schema.fields_at(path_prefix)?.to_vec();
    let fallback = schema.fallback_child(path_prefix)?.clone();
    Ok(LevelConstraint {
        allowed_categories: children.iter().map(|n| (n.id.clone(), n.description.clone())).collect(),
        fields,
        fallback,
    })
}

/// JSON Schema for one level's reply: the category as an enumeration of
/// the allowed ids, then one string property per declared field (nullable
/// unless required). No other properties are permitted.
pub fn render_constraint_document(constraint: &LevelConstraint) -> ResponseFormat {
    let mut properties = Map::new();
    let ids: Vec<&str> = constraint.allowed_categories.iter().map(|(c, _)| c.as_str()).collect();
    properties.insert(
        CATEGORY_FIELD.to_string(),
        json!({"type": "string", "enum": ids, "description": "The category that best fits the prompt."}),
    );
    let mut required = vec![Value::from(CATEGORY_FIELD)];
    for f in &constraint.fields {
        let ty = if f.required { json!("string") } else { json!(["string", "null"]) };
        properties.insert(f.name.clone(), json!({"type": ty, "description": f.description}));
        if f.required {
            required.push(Value::from(f.name.clone()));
        }
    }
    ResponseFormat {
        name: RESPONSE_FORMAT_NAME.to_string(),
        schema: json!({
            "type": "object",
            "properties": Value::Object(properties),
            "required": required,
            "additionalProperties": false,
        }),
    }
}

pub fn validate_output(raw: &str, constraint: &LevelConstraint) -> Result<ParsedLevelOutput> {
    let value: Value =
        serde_json::from_str(raw.trim()).map_err(|e| Error::MalformedOutput(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(Error::MalformedOutput("reply is not an object".into()));
    };
    for key in obj.keys() {
        if key != CATEGORY_FIELD && !constraint.fields.iter().any(|f| &f.name == key) {
            return Err(Error::SchemaViolation(format!("unexpected property `{key}`")));
        }
    }
    let category = match obj.get(CATEGORY_FIELD) {
        Some(Value::String(s)) if constraint.allows(s) => CategoryId::new(s.as_str())?,
        Some(Value::String(s)) => {
            return Err(Error::SchemaViolation(format!("category `{s}` is not allowed here")))
        }
        Some(other) => return Err(Error::SchemaViolation(format!("category must be a string, got {other}"))),
        None => return Err(Error::SchemaViolation(format!("missing `{CATEGORY_FIELD}`"))),
    };
    let mut field_values = IndexMap::new();
    for f in &constraint.fields {
        let v = match obj.get(&f.name) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => {
                return Err(Error::SchemaViolation(format!("field `{}` must be a string, got {other}", f.name)))
            }
        };
        if f.required && v.is_none() {
            return Err(Error::SchemaViolation(format!("missing required field `{}`", f.name)));
        }
        field_values.insert(f.name.clone(), v);
    }
    Ok(ParsedLevelOutput { category, field_values })
}

fn strip_fences(raw: &str) -> &str {
    let Some(open) = raw.find("```") else { return raw };
    let after = &raw[open + 3..];
    // Skip the info string (e.g. `json`) up to the end of the fence line.
    let body = match after.find('\n') {
        Some(nl) => &after[nl + 1..],
        None => after,
    };
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

/// First `{ ... }` with balanced braces, ignoring braces inside strings.
fn first_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// The first balanced object literal in `raw`, after stripping code fences.
pub fn extract_object(raw: &str) -> Option<&str> {
    first_object(strip_fences(raw))
}

/// Best-effort cleanup of a reply that failed validation: strip code
/// fences, cut out the first balanced object, lowercase the category.
pub fn repair_output(raw: &str, constraint: &LevelConstraint) -> Result<String> {
    let object = extract_object(raw).ok_or(Error::Unrepairable)?;
    if let Ok(Value::Object(mut obj)) = serde_json::from_str::<Value>(object) {
        if let Some(Value::String(cat)) = obj.get(CATEGORY_FIELD) {
            let lowered = cat.trim().to_lowercase();
            if &lowered != cat {
                let canonical = constraint
                    .allowed_categories
                    .iter()
                    .find(|(c, _)| c.as_str() == lowered)
                    .map(|(c, _)| c.to_string())
                    .unwrap_or(lowered);
                obj.insert(CATEGORY_FIELD.to_string(), Value::String(canonical));
                return Ok(Value::Object(obj).to_string());
            }
        }
    }
    Ok(object.to_string())
}

fn excerpt(s: &str) -> String {
    const LIMIT: usize = 240;
    match s.char_indices().nth(LIMIT) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

fn path_label(path: &[CategoryId]) -> String {
    if path.is_empty() {
        "(none)".to_string()
    } else {
        path.iter().map(CategoryId::as_str).collect::<Vec<_>>().join(" > ")
    }
}

/// Formats the user message: optional delimited context block, then the prompt.
pub fn compose_user_text(input: &str, context: Option<&str>) -> String {
    match context.map(str::trim).filter(|c| !c.is_empty()) {
        Some(ctx) => format!("Context:\n<<<\n{ctx}\n>>>\n\nPrompt: {input}"),
        None => format!("Prompt: {input}"),
    }
}

pub fn level_request(
    input: &str,
    context: Option<&str>,
    prefix: &[CategoryId],
    constraint: &LevelConstraint,
    temperature: f64,
) -> Result<CompletionRequest> {
    let mut system = String::from(
        "Classify the user's prompt into exactly one of the allowed categories and extract the requested fields. \
         Reply with a single JSON object that follows the response format.\n",
    );
    system.push_str(&format!("Classified so far: {}\n", path_label(prefix)));
    system.push_str("Allowed categories:\n");
    for (id, description) in &constraint.allowed_categories {
        system.push_str(&format!("- {id}: {description}\n"));
    }
    if !constraint.fields.is_empty() {
        system.push_str("Fields (use null when not applicable):\n");
        for f in &constraint.fields {
            system.push_str(&format!("- {}: {}\n", f.name, f.description));
        }
    }
    Ok(CompletionRequest::new(system, compose_user_text(input, context))?
        .with_format(render_constraint_document(constraint))
        .with_temperature(temperature))
}

fn fallback_output(constraint: &LevelConstraint) -> ParsedLevelOutput {
    ParsedLevelOutput {
        category: constraint.fallback.clone(),
        field_values: constraint.fields.iter().map(|f| (f.name.clone(), None)).collect(),
    }
}

/// Classifies `prompt` level by level. Only backend failures escape as
/// errors; invalid replies degrade to the level's fallback category.
pub fn decompose(
    prompt: &str,
    context: Option<&str>,
    schema: &DecompositionSchema,
    backend: &dyn LlmBackend,
    opts: &DecomposeOptions,
) -> Result<DecompositionRecord> {
    opts.validate()?;
    let prompt = prompt.trim();
    if prompt.is_empty() {
        return Err(Error::Domain("prompt is empty".into()));
    }
    let mut record = DecompositionRecord {
        original_prompt: prompt.to_string(),
        path: Vec::new(),
        levels: Vec::new(),
        summaries: Vec::new(),
        backend_id: backend.id().to_string(),
        degraded: false,
        trace: Vec::new(),
    };
    let mut input = prompt.to_string();
    loop {
        let level = record.levels.len();
        let constraint = build_level_constraint(schema, &record.path)?;
        let req = level_request(&input, context, &record.path, &constraint, opts.temperature)?;
        let parsed = classify_level(backend, &req, &constraint, opts.max_repairs, level, &mut record.trace)?;
        let (output, failed) = match parsed {
            Some(p) => (p, false),
            None => (fallback_output(&constraint), true),
        };
        let is_fallback = output.category == constraint.fallback;
        record.path.push(output.category.clone());
        record.levels.push(output);
        let descend = !failed
            && !is_fallback
            && schema.node_at(&record.path).is_some_and(|n| !n.is_leaf())
            && record.levels.len() < schema.max_depth;
        if failed {
            record.degraded = true;
        }
        if !descend {
            record.summaries.push(None);
            break;
        }
        if opts.resummarize {
            let summary = resummarize(backend, &input, &record.path, opts)?;
            record.trace.push(TraceEntry {
                level,
                attempt: 0,
                request: "resummarize".into(),
                response: excerpt(&summary),
                outcome: "summary".into(),
            });
            if !summary.trim().is_empty() {
                input = summary.trim().to_string();
            }
            record.summaries.push(Some(input.clone()));
        } else {
            record.summaries.push(None);
        }
    }
    Ok(record)
}

/// `Ok(None)` when every attempt failed validation.
fn classify_level(
    backend: &dyn LlmBackend,
    req: &CompletionRequest,
    constraint: &LevelConstraint,
    max_repairs: u32,
    level: usize,
    trace: &mut Vec<TraceEntry>,
) -> Result<Option<ParsedLevelOutput>> {
    for attempt in 0..=max_repairs {
        let raw = backend.complete(req)?;
        let mut entry = TraceEntry {
            level,
            attempt,
            request: excerpt(&req.user_text),
            response: excerpt(&raw),
            outcome: String::new(),
        };
        let result = match validate_output(&raw, constraint) {
            Ok(p) => Ok(p),
            Err(first) if max_repairs > 0 => repair_output(&raw, constraint)
                .and_then(|fixed| validate_output(&fixed, constraint))
                .map_err(|_| first),
            Err(e) => Err(e),
        };
        match result {
            Ok(p) => {
                entry.outcome = "ok".into();
                trace.push(entry);
                return Ok(Some(p));
            }
            Err(e) => {
                log::debug!("level {level} attempt {attempt}: {e}");
                entry.outcome = e.to_string();
                trace.push(entry);
            }
        }
    }
    Ok(None)
}

fn resummarize(
    backend: &dyn LlmBackend,
    input: &str,
    path: &[CategoryId],
    opts: &DecomposeOptions,
) -> Result<String> {
    let system = opts.resummarize_template.replace("{path}", &path_label(path));
    let req = CompletionRequest::new(system, compose_user_text(input, None))?.with_temperature(opts.temperature);
    backend.complete(&req)
}
