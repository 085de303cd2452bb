use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{CategoryId, DecompositionSchema};

pub const TOPIC_SLOT: &str = "{topic}";

/// Key of a leaf path in template files: ids joined with `/`.
pub fn path_key(path: &[CategoryId]) -> String {
    path.iter().map(CategoryId::as_str).collect::<Vec<_>>().join("/")
}

/// Per-leaf single-sentence templates for synthetic prompts.
///
/// The first sentence of a prompt comes from `leaves[path]`; any further
/// sentences come from `elaborations[path]`, or `elaborations["*"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub leaves: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub elaborations: BTreeMap<String, Vec<String>>,
}

impl PromptTemplates {
    pub fn parse(document: &str) -> Result<Self> {
        serde_json::from_str(document).map_err(|e| Error::Parse(format!("prompt templates: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn fig2() -> Self {
        Self::parse(include_str!("../../../../templates/fig2.json")).expect("shipped fig2 templates parse")
    }

    pub fn fig4() -> Self {
        Self::parse(include_str!("../../../../templates/fig4.json")).expect("shipped fig4 templates parse")
    }

    fn elaborations_for(&self, key: &str) -> Option<&[String]> {
        self.elaborations.get(key).or_else(|| self.elaborations.get("*")).map(Vec::as_slice)
    }

    /// Checks that every leaf of `schema` can be rendered at every length.
    pub fn check_covers(&self, schema: &DecompositionSchema, max_sentences: usize) -> Result<()> {
        for path in schema.enumerate_paths() {
            let key = path_key(&path);
            if self.leaves.get(&key).map_or(true, Vec::is_empty) {
                return Err(Error::Config(format!("no templates for category `{key}`")));
            }
            if max_sentences > 1 && self.elaborations_for(&key).map_or(true, <[String]>::is_empty) {
                return Err(Error::Config(format!("no elaboration templates for category `{key}`")));
            }
        }
        Ok(())
    }

    /// `sentences` sentences for the leaf `path`, about `topic`.
    pub fn render<R: Rng>(&self, path: &[CategoryId], topic: &str, sentences: usize, rng: &mut R) -> Result<String> {
        let key = path_key(path);
        let first = self
            .leaves
            .get(&key)
            .and_then(|t| t.choose(rng))
            .ok_or_else(|| Error::Config(format!("no templates for category `{key}`")))?;
        let mut parts = vec![fill(first, topic)];
        if sentences > 1 {
            let pool = self
                .elaborations_for(&key)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::Config(format!("no elaboration templates for category `{key}`")))?;
            // Distinct elaborations while the pool lasts.
            let mut order: Vec<&String> = pool.iter().collect();
            order.shuffle(rng);
            for i in 0..sentences - 1 {
                let t = if i < order.len() { order[i] } else { pool.choose(rng).expect("non-empty pool") };
                parts.push(fill(t, topic));
            }
        }
        Ok(parts.join(" "))
    }
}

/// Templates for synthetic conversations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTemplates {
    pub user_turns: Vec<String>,
    pub assistant_replies: Vec<String>,
    pub reference_prompts: Vec<String>,
}

impl ConversationTemplates {
    pub fn parse(document: &str) -> Result<Self> {
        let t: Self =
            serde_json::from_str(document).map_err(|e| Error::Parse(format!("conversation templates: {e}")))?;
        if t.user_turns.is_empty() || t.assistant_replies.is_empty() || t.reference_prompts.is_empty() {
            return Err(Error::Config("conversation templates need every section non-empty".into()));
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn shipped() -> Self {
        Self::parse(include_str!("../../../../templates/conversation.json"))
            .expect("shipped conversation templates parse")
    }
}

pub fn fill(template: &str, topic: &str) -> String {
    template.replace(TOPIC_SLOT, topic)
}

/// Number of sentences: runs of `.`, `?` or `!` that end the text or are
/// followed by whitespace.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    let mut count = 0;
    for (i, c) in chars.iter().enumerate() {
        if matches!(c, '.' | '?' | '!') {
            match chars.get(i + 1) {
                None => count += 1,
                Some(n) if n.is_whitespace() => count += 1,
                _ => {}
            }
        }
    }
    count
}
