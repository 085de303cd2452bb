//! Dataset loading and output files.
//!
//! Outputs go to `<path>.partial` first and are renamed once complete, so
//! a file without the suffix is always whole.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ctxpipe::eval::{ConversationItem, Dataset, PromptItem};
use ctxpipe::synth::oasst::{linearize, OasstTree};
use ctxpipe::synth::{SynAsstEntry, SynPromptEntry};
use ctxpipe::ConversationTree;
use serde_json::Value;

use crate::exit::{Failure, Outcome};

pub fn read_input(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::no_input(path, e))
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome<()> {
    let tmp = partial_path(path);
    fs::write(&tmp, bytes).map_err(|e| Failure::write(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Failure::write(path, e))
}

/// Line-oriented output to stdout or to a file via its `.partial` twin.
pub struct Sink {
    target: Option<PathBuf>,
    out: Box<dyn Write>,
}

impl Sink {
    pub fn open(target: Option<&Path>) -> Outcome<Self> {
        let out: Box<dyn Write> = match target {
            Some(path) => {
                let tmp = partial_path(path);
                Box::new(BufWriter::new(File::create(&tmp).map_err(|e| Failure::write(&tmp, e))?))
            }
            None => Box::new(BufWriter::new(std::io::stdout().lock())),
        };
        Ok(Sink { target: target.map(Path::to_path_buf), out })
    }

    fn err(&self, e: std::io::Error) -> Failure {
        let shown = self.target.as_deref().map(partial_path).unwrap_or_else(|| PathBuf::from("<stdout>"));
        Failure::write(&shown, e)
    }

    pub fn line(&mut self, text: &str) -> Outcome<()> {
        writeln!(self.out, "{text}").map_err(|e| self.err(e))
    }

    pub fn json<T: serde::Serialize>(&mut self, value: &T) -> Outcome<()> {
        let text = serde_json::to_string(value).map_err(|e| Failure::new(crate::exit::IO, e.to_string()))?;
        self.line(&text)
    }

    /// Flushes and, for files, drops the `.partial` suffix.
    pub fn finish(mut self) -> Outcome<()> {
        self.out.flush().map_err(|e| self.err(e))?;
        drop(self.out);
        if let Some(path) = &self.target {
            let tmp = partial_path(path);
            fs::rename(&tmp, path).map_err(|e| Failure::write(path, e))?;
        }
        Ok(())
    }
}

pub fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn id(i: usize) -> String {
    format!("{i:06}")
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Failure {
    Failure::new(crate::exit::DATA, format!("{}:{line}: {msg}", path.display()))
}

fn lines(path: &Path) -> Outcome<Vec<(usize, String)>> {
    Ok(read_input(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Prompts from plain text (one per line) or JSONL: generated prompt
/// entries, OASST trees (their root prompt) or objects with a `text` key.
pub fn load_prompts(path: &Path) -> Outcome<Dataset> {
    let mut items = Vec::new();
    for (n, line) in lines(path)? {
        let i = items.len();
        let item = if line.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(&line).map_err(|e| data_err(path, n, e))?;
            if v.get("message_tree_id").is_some() {
                let tree: OasstTree = serde_json::from_value(v).map_err(|e| data_err(path, n, e))?;
                let conv = linearize(&tree).map_err(|e| data_err(path, n, e))?;
                PromptItem { id: conv.id, text: conv.root_prompt, gold_path: None }
            } else if v.get("gold_path").is_some() {
                let e: SynPromptEntry = serde_json::from_value(v).map_err(|e| data_err(path, n, e))?;
                PromptItem { id: id(i), text: e.text, gold_path: Some(e.gold_path) }
            } else if let Some(text) = v.get("text").and_then(Value::as_str) {
                PromptItem { id: id(i), text: text.to_string(), gold_path: None }
            } else {
                return Err(data_err(path, n, "expected a prompt object with a `text` field"));
            }
        } else {
            PromptItem { id: id(i), text: line.trim().to_string(), gold_path: None }
        };
        items.push(item);
    }
    Ok(Dataset::Prompts { name: dataset_name(path), items })
}

/// Conversations from JSONL: generated conversation entries, OASST trees
/// or bare conversation trees.
pub fn load_conversations(path: &Path) -> Outcome<Dataset> {
    let mut items = Vec::new();
    for (n, line) in lines(path)? {
        let i = items.len();
        let v: Value = serde_json::from_str(&line).map_err(|e| data_err(path, n, e))?;
        let item = if v.get("message_tree_id").is_some() {
            let tree: OasstTree = serde_json::from_value(v).map_err(|e| data_err(path, n, e))?;
            let conv = linearize(&tree).map_err(|e| data_err(path, n, e))?;
            ConversationItem { id: conv.id, tree: conv.tree, gold_relevant: None }
        } else if v.get("gold_relevant").is_some() {
            let e: SynAsstEntry = serde_json::from_value(v).map_err(|e| data_err(path, n, e))?;
            ConversationItem { id: id(i), tree: e.tree, gold_relevant: Some(e.gold_relevant_indices) }
        } else {
            let tree: ConversationTree = serde_json::from_value(v).map_err(|e| data_err(path, n, e))?;
            ConversationItem { id: id(i), tree, gold_relevant: None }
        };
        item.tree.validate().map_err(|e| data_err(path, n, e))?;
        items.push(item);
    }
    Ok(Dataset::Conversations { name: dataset_name(path), items })
}
