//! Seeded synthetic datasets.
//!
//! Prompt entries carry the leaf path they were generated for; conversation
//! entries mark which user turns wandered off the main topic. Every
//! generator is a pure function of its arguments: entry `i` of a batch
//! draws from a ChaCha8 stream seeded with `derive_seed(seed, i)`.

pub mod oasst;
pub mod templates;

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{CompletionRequest, LlmBackend};
use crate::error::{Error, Result};
use crate::filter::{ContextSegment, ConversationTree, Speaker};
use crate::hash;
use crate::schema::{CategoryId, DecompositionSchema};

pub use templates::{count_sentences, path_key, ConversationTemplates, PromptTemplates};

pub const MAX_SENTENCES: usize = 5;
pub const PAIR_COUNTS: [usize; 2] = [5, 10];

const DEFAULT_TOPICS: &str = include_str!("../../../../topics/google_2024.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicList {
    pub name: String,
    pub topics: Vec<String>,
}

impl TopicList {
    pub fn new(name: impl Into<String>, topics: Vec<String>) -> Result<Self> {
        let list = TopicList { name: name.into(), topics };
        list.validate()?;
        Ok(list)
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics.len() < 2 {
            return Err(Error::Config("topic list needs at least two topics".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.topics {
            if t.trim().is_empty() {
                return Err(Error::Config("topic list contains an empty topic".into()));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate topic `{t}`")));
            }
        }
        Ok(())
    }

    /// One topic per line; blank lines and `#` comments are skipped.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let topics = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Self::new(name, topics)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(name, &std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }
}

/// The shipped 135-topic list (a reconstruction; see `topics/`).
pub fn default_topics() -> TopicList {
    TopicList::parse("google_2024", DEFAULT_TOPICS).expect("shipped topic list is valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynPromptEntry {
    pub text: String,
    #[serde(rename = "sentences")]
    pub sentence_count: usize,
    pub gold_path: Vec<CategoryId>,
    pub topic: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynAsstEntry {
    #[serde(flatten)]
    pub tree: ConversationTree,
    pub pair_count: usize,
    #[serde(rename = "p_diverge")]
    pub divergence_prob: f64,
    #[serde(rename = "gold_relevant")]
    pub gold_relevant_indices: Vec<usize>,
    pub seed: u64,
}

/// Where generated text comes from.
#[derive(Clone, Copy)]
pub enum PromptSource<'a> {
    Templates(&'a PromptTemplates),
    Llm(&'a dyn LlmBackend),
}

#[derive(Clone, Copy)]
pub enum ConversationSource<'a> {
    Templates(&'a ConversationTemplates),
    Llm(&'a dyn LlmBackend),
}

/// How topic divergence is drawn within a conversation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Every user turn after the first diverges independently.
    #[default]
    PerTurn,
    /// The conversation derails at most once; every later turn stays on
    /// the new topic.
    SingleDerail,
}

fn text_rng(entry_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash::seeded(entry_seed, b"text"))
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() || lengths.iter().any(|l| !(1..=MAX_SENTENCES).contains(l)) {
        return Err(Error::Config(format!("sentence lengths must be non-empty and within 1..={MAX_SENTENCES}")));
    }
    Ok(())
}

fn describe_path(schema: &DecompositionSchema, path: &[CategoryId]) -> String {
    (1..=path.len())
        .filter_map(|i| schema.node_at(&path[..i]).map(|n| format!("{} ({})", n.id, n.description)))
        .collect::<Vec<_>>()
        .join(" > ")
}

/// Renders the text of one prompt entry from its recorded label.
pub fn render_prompt(
    schema: &DecompositionSchema,
    path: &[CategoryId],
    topic: &str,
    sentences: usize,
    entry_seed: u64,
    source: PromptSource<'_>,
) -> Result<String> {
    match source {
        PromptSource::Templates(t) => t.render(path, topic, sentences, &mut text_rng(entry_seed)),
        PromptSource::Llm(llm) => {
            let plural = if sentences == 1 { "sentence" } else { "sentences" };
            let system = format!(
                "Write one realistic message that a user might send to a digital assistant. \
                 It must be exactly {sentences} {plural} long, concern the topic \"{topic}\", and its intent must \
                 match this category path: {}. Reply with the message only.",
                describe_path(schema, path)
            );
            let req = CompletionRequest::new(system, "Prompt: write the message.")?.with_temperature(1.0);
            Ok(llm.complete(&req)?.trim().to_string())
        }
    }
}

fn gen_prompt_entry(
    schema: &DecompositionSchema,
    leaves: &[Vec<CategoryId>],
    topics: &TopicList,
    lengths: &[usize],
    entry_seed: u64,
    source: PromptSource<'_>,
) -> Result<SynPromptEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry_seed);
    let gold_path = leaves[rng.gen_range(0..leaves.len())].clone();
    let topic = topics.topics[rng.gen_range(0..topics.len())].clone();
    let sentence_count = lengths[rng.gen_range(0..lengths.len())];
    let text = render_prompt(schema, &gold_path, &topic, sentence_count, entry_seed, source)?;
    Ok(SynPromptEntry { text, sentence_count, gold_path, topic, seed: entry_seed })
}

/// `n` labeled prompts with leaf paths drawn uniformly.
pub fn gen_prompts(
    schema: &DecompositionSchema,
    topics: &TopicList,
    n: usize,
    lengths: &[usize],
    seed: u64,
    source: PromptSource<'_>,
) -> Result<Vec<SynPromptEntry>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    check_lengths(lengths)?;
    topics.validate()?;
    if let PromptSource::Templates(t) = source {
        t.check_covers(schema, lengths.iter().copied().max().unwrap_or(1))?;
    }
    let leaves = schema.enumerate_paths();
    (0..n as u64)
        .map(|i| gen_prompt_entry(schema, &leaves, topics, lengths, hash::derive_seed(seed, i), source))
        .collect()
}

fn draw_other_topic<'t, R: Rng>(topics: &'t TopicList, main: usize, rng: &mut R) -> (usize, &'t str) {
    let mut j = rng.gen_range(0..topics.len() - 1);
    if j >= main {
        j += 1;
    }
    (j, &topics.topics[j])
}

fn turn_text(source: ConversationSource<'_>, speaker: Speaker, topic: &str, rng: &mut ChaCha8Rng) -> Result<String> {
    use rand::seq::SliceRandom;
    match source {
        ConversationSource::Templates(t) => {
            let pool = match speaker {
                Speaker::User => &t.user_turns,
                Speaker::Assistant => &t.assistant_replies,
            };
            Ok(templates::fill(pool.choose(rng).expect("validated non-empty"), topic))
        }
        ConversationSource::Llm(llm) => {
            let system = match speaker {
                Speaker::User => format!(
                    "Write one message a user might send to an assistant while chatting about \"{topic}\". \
                     Reply with the message only."
                ),
                Speaker::Assistant => format!(
                    "Write a one-sentence reply an assistant might give while chatting about \"{topic}\". \
                     Reply with the sentence only."
                ),
            };
            let nonce: u32 = rng.gen();
            let req = CompletionRequest::new(system, format!("Prompt: variation {nonce}."))?.with_temperature(1.0);
            Ok(llm.complete(&req)?.trim().to_string())
        }
    }
}

/// One conversation of `pair_count` user/assistant pairs plus a reference
/// prompt on the main topic.
pub fn gen_conversation(
    topics: &TopicList,
    pair_count: usize,
    p_diverge: f64,
    seed: u64,
    mode: DivergenceMode,
    source: ConversationSource<'_>,
) -> Result<SynAsstEntry> {
    if !(0.0..=1.0).contains(&p_diverge) {
        return Err(Error::Config(format!("p_diverge {p_diverge} is outside [0, 1]")));
    }
    if pair_count == 0 {
        return Err(Error::Config("pair_count must be positive".into()));
    }
    topics.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let main_idx = rng.gen_range(0..topics.len());
    let main = topics.topics[main_idx].as_str();

    let mut pair_topics: Vec<(bool, &str)> = Vec::with_capacity(pair_count);
    match mode {
        DivergenceMode::PerTurn => {
            for j in 0..pair_count {
                if j > 0 && rng.gen_bool(p_diverge) {
                    pair_topics.push((true, draw_other_topic(topics, main_idx, &mut rng).1));
                } else {
                    pair_topics.push((false, main));
                }
            }
        }
        DivergenceMode::SingleDerail => {
            let derail = pair_count > 1 && rng.gen_bool(p_diverge);
            let point = if derail { rng.gen_range(1..pair_count) } else { pair_count };
            let other = draw_other_topic(topics, main_idx, &mut rng).1;
            for j in 0..pair_count {
                pair_topics.push(if j >= point { (true, other) } else { (false, main) });
            }
        }
    }

    let mut text_rng = text_rng(seed);
    let mut segments = Vec::with_capacity(2 * pair_count);
    for (divergent, topic) in &pair_topics {
        for speaker in [Speaker::User, Speaker::Assistant] {
            segments.push(ContextSegment {
                index: segments.len(),
                speaker,
                text: turn_text(source, speaker, topic, &mut text_rng)?,
                topic_label: Some(topic.to_string()),
                divergent: Some(*divergent),
            });
        }
    }
    let reference_prompt = match source {
        ConversationSource::Templates(t) => {
            use rand::seq::SliceRandom;
            templates::fill(t.reference_prompts.choose(&mut text_rng).expect("validated non-empty"), main)
        }
        ConversationSource::Llm(_) => turn_text(source, Speaker::User, main, &mut text_rng)?,
    };
    let tree = ConversationTree { segments, reference_prompt, main_topic: Some(main.to_string()) };
    let gold_relevant_indices = gold_relevant(&tree);
    Ok(SynAsstEntry { tree, pair_count, divergence_prob: p_diverge, gold_relevant_indices, seed })
}

/// Indices of non-divergent segments on the main topic.
pub fn gold_relevant(tree: &ConversationTree) -> Vec<usize> {
    tree.segments
        .iter()
        .filter(|s| s.divergent != Some(true) && s.topic_label.as_deref() == tree.main_topic.as_deref())
        .map(|s| s.index)
        .collect()
}

pub fn gen_conversations(
    topics: &TopicList,
    pair_count: usize,
    p_diverge: f64,
    n: usize,
    seed: u64,
    mode: DivergenceMode,
    source: ConversationSource<'_>,
) -> Result<Vec<SynAsstEntry>> {
    (0..n as u64)
        .map(|i| gen_conversation(topics, pair_count, p_diverge, hash::derive_seed(seed, i), mode, source))
        .collect()
}
