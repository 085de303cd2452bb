//! Import adapter for OpenAssistant message-tree exports (one tree per line).
//!
//! Each tree is linearized by following, at every message, the best-ranked
//! reply (`rank` 0 first; unranked replies keep file order). The last
//! prompter message on that thread becomes the reference prompt and the
//! messages before it become the context segments. No gold labels exist.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{ContextSegment, ConversationTree, Speaker};

#[derive(Debug, Clone, Deserialize)]
pub struct OasstMessage {
    #[serde(default)]
    pub message_id: Option<String>,
    pub text: String,
    pub role: String,
    #[serde(default)]
    pub rank: Option<u32>,
    #[serde(default)]
    pub replies: Vec<OasstMessage>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct OasstTree {
    pub message_tree_id: String,
    pub prompt: OasstMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OasstConversation {
    pub id: String,
    /// First prompter message of the thread.
    pub root_prompt: String,
    pub tree: ConversationTree,
}

fn speaker(role: &str) -> Result<Speaker> {
    match role {
        "prompter" | "user" => Ok(Speaker::User),
        "assistant" => Ok(Speaker::Assistant),
        other => Err(Error::Parse(format!("unknown OASST role `{other}`"))),
    }
}

fn best_reply(replies: &[OasstMessage]) -> Option<&OasstMessage> {
    replies
        .iter()
        .enumerate()
        .min_by_key(|(i, m)| (m.rank.unwrap_or(u32::MAX), *i))
        .map(|(_, m)| m)
}

pub fn linearize(tree: &OasstTree) -> Result<OasstConversation> {
    let mut thread = vec![&tree.prompt];
    while let Some(next) = best_reply(&thread.last().expect("non-empty").replies) {
        thread.push(next);
    }
    let mut messages = Vec::with_capacity(thread.len());
    for m in &thread {
        let text = m.text.trim();
        if !text.is_empty() {
            messages.push((speaker(&m.role)?, text.to_string()));
        }
    }
    let last_user = messages
        .iter()
        .rposition(|(s, _)| *s == Speaker::User)
        .ok_or_else(|| Error::Parse(format!("tree {} has no prompter message", tree.message_tree_id)))?;
    let root_prompt = messages.iter().find(|(s, _)| *s == Speaker::User).map(|(_, t)| t.clone()).unwrap_or_default();
    let reference_prompt = messages[last_user].1.clone();
    let segments = messages[..last_user]
        .iter()
        .enumerate()
        .map(|(index, (speaker, text))| ContextSegment {
            index,
            speaker: *speaker,
            text: text.clone(),
            topic_label: None,
            divergent: None,
        })
        .collect();
    Ok(OasstConversation {
        id: tree.message_tree_id.clone(),
        root_prompt,
        tree: ConversationTree { segments, reference_prompt, main_topic: None },
    })
}

pub fn read_trees<R: BufRead>(reader: R) -> Result<Vec<OasstConversation>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tree: OasstTree = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("OASST line {}: {e}", lineno + 1)))?;
        out.push(linearize(&tree)?);
    }
    Ok(out)
}
