//! The k-repetition benchmark protocol.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::EvalReport;
use super::{
    eci, filtering_accuracy, path_accuracy, tally_decomposition, tally_filtering, EciParams, EntryScore,
};
use crate::backend::{EmbeddingBackend, LlmBackend};
use crate::decomp::{decompose, DecomposeOptions, DecompositionRecord};
use crate::error::{Error, Result};
use crate::filter::{embed_segments, filter_llm, filter_topk, filter_vector, filter_vector_embedded, ConversationTree, FilterResult};
use crate::schema::{CategoryId, DecompositionSchema};
use crate::synth::oasst::OasstConversation;
use crate::synth::{SynAsstEntry, SynPromptEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_path: Option<Vec<CategoryId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationItem {
    pub id: String,
    pub tree: ConversationTree,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_relevant: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Prompts { name: String, items: Vec<PromptItem> },
    Conversations { name: String, items: Vec<ConversationItem> },
}

fn entry_id(i: usize) -> String {
    format!("{i:06}")
}

impl Dataset {
    pub fn from_syn_prompts(name: impl Into<String>, entries: &[SynPromptEntry]) -> Self {
        let items = entries
            .iter()
            .enumerate()
            .map(|(i, e)| PromptItem { id: entry_id(i), text: e.text.clone(), gold_path: Some(e.gold_path.clone()) })
            .collect();
        Dataset::Prompts { name: name.into(), items }
    }

    pub fn from_syn_conversations(name: impl Into<String>, entries: &[SynAsstEntry]) -> Self {
        let items = entries
            .iter()
            .enumerate()
            .map(|(i, e)| ConversationItem {
                id: entry_id(i),
                tree: e.tree.clone(),
                gold_relevant: Some(e.gold_relevant_indices.clone()),
            })
            .collect();
        Dataset::Conversations { name: name.into(), items }
    }

    /// Root prompts of the threads, unlabeled.
    pub fn oasst_prompts(name: impl Into<String>, convs: &[OasstConversation]) -> Self {
        let items = convs
            .iter()
            .map(|c| PromptItem { id: c.id.clone(), text: c.root_prompt.clone(), gold_path: None })
            .collect();
        Dataset::Prompts { name: name.into(), items }
    }

    pub fn oasst_conversations(name: impl Into<String>, convs: &[OasstConversation]) -> Self {
        let items = convs
            .iter()
            .map(|c| ConversationItem { id: c.id.clone(), tree: c.tree.clone(), gold_relevant: None })
            .collect();
        Dataset::Conversations { name: name.into(), items }
    }

    pub fn name(&self) -> &str {
        match self {
            Dataset::Prompts { name, .. } | Dataset::Conversations { name, .. } => name,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Prompts { items, .. } => items.len(),
            Dataset::Conversations { items, .. } => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n` entries drawn without replacement, kept in dataset order. Asking
    /// for at least the whole dataset returns all of it.
    pub fn sample(&self, n: usize, seed: u64) -> Self {
        let idx = sample_indices(self.len(), n, seed);
        match self {
            Dataset::Prompts { name, items } => {
                Dataset::Prompts { name: name.clone(), items: idx.iter().map(|i| items[*i].clone()).collect() }
            }
            Dataset::Conversations { name, items } => {
                Dataset::Conversations { name: name.clone(), items: idx.iter().map(|i| items[*i].clone()).collect() }
            }
        }
    }
}

pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Whether a decomposition of the input is injected as context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    #[default]
    Normal,
    ContextDecomposed,
}

impl Condition {
    pub fn label(&self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::ContextDecomposed => "cd",
        }
    }
}

/// What each decomposition is scored against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Majority category across the k runs.
    #[default]
    Modal,
    /// The dataset's gold path; falls back to modal for unlabeled entries.
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchTask {
    Decompose,
    FilterVector { threshold: f64, always_keep_last_n: usize },
    FilterTopk { k: usize, always_keep_last_n: usize },
    FilterLlm,
}

impl BenchTask {
    pub fn label(&self) -> &'static str {
        match self {
            BenchTask::Decompose => "decomp",
            BenchTask::FilterVector { .. } => "filter_vector",
            BenchTask::FilterTopk { .. } => "filter_topk",
            BenchTask::FilterLlm => "filter_llm",
        }
    }
}

#[derive(Clone, Copy)]
pub struct PipelineConfig<'a> {
    pub task: BenchTask,
    pub condition: Condition,
    pub reference: Reference,
    pub schema: Option<&'a DecompositionSchema>,
    pub llm: Option<&'a dyn LlmBackend>,
    pub embedder: Option<&'a dyn EmbeddingBackend>,
    pub decompose: &'a DecomposeOptions,
}

impl<'a> PipelineConfig<'a> {
    fn schema(&self) -> Result<&'a DecompositionSchema> {
        self.schema.ok_or_else(|| Error::Config("this benchmark needs a schema".into()))
    }

    fn llm(&self) -> Result<&'a dyn LlmBackend> {
        self.llm.ok_or_else(|| Error::Config("this benchmark needs an LLM backend".into()))
    }

    fn embedder(&self) -> Result<&'a dyn EmbeddingBackend> {
        self.embedder.ok_or_else(|| Error::Config("this benchmark needs an embedding backend".into()))
    }

    pub fn backend_id(&self) -> Result<String> {
        Ok(match self.task {
            BenchTask::FilterVector { .. } | BenchTask::FilterTopk { .. } => self.embedder()?.id().to_string(),
            BenchTask::Decompose | BenchTask::FilterLlm => self.llm()?.id().to_string(),
        })
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        match (self.task, dataset) {
            (BenchTask::Decompose, Dataset::Prompts { .. }) => {
                self.schema()?;
                self.llm()?;
            }
            (BenchTask::FilterLlm, Dataset::Conversations { .. }) => {
                self.llm()?;
                if self.condition == Condition::ContextDecomposed {
                    self.schema()?;
                }
            }
            (BenchTask::FilterVector { .. } | BenchTask::FilterTopk { .. }, Dataset::Conversations { .. }) => {
                self.embedder()?;
            }
            (task, _) => {
                return Err(Error::Config(format!("task {} does not apply to dataset `{}`", task.label(), dataset.name())))
            }
        }
        self.decompose.validate()
    }
}

/// A failed run, with every entry finished before the failure.
#[derive(Debug, thiserror::Error)]
#[error("benchmark stopped after {} entries: {error}", partial.n_entries)]
pub struct BenchmarkError {
    pub partial: Box<EvalReport>,
    pub error: Error,
}

/// Renders a record as a context block: the path, then any extracted fields.
pub fn decomposition_context(record: &DecompositionRecord) -> String {
    let mut out = format!(
        "Decomposition: {}",
        record.path.iter().map(CategoryId::as_str).collect::<Vec<_>>().join(" > ")
    );
    for level in &record.levels {
        for (name, value) in &level.field_values {
            if let Some(v) = value {
                out.push_str(&format!("\n{name}: {v}"));
            }
        }
    }
    out
}

fn pre_decompose(text: &str, cfg: &PipelineConfig<'_>) -> Result<Option<String>> {
    match cfg.condition {
        Condition::Normal => Ok(None),
        Condition::ContextDecomposed => {
            let record = decompose(text, None, cfg.schema()?, cfg.llm()?, cfg.decompose)?;
            Ok(Some(decomposition_context(&record)))
        }
    }
}

fn score_prompt(item: &PromptItem, cfg: &PipelineConfig<'_>, params: &EciParams) -> Result<EntryScore> {
    let schema = cfg.schema()?;
    let llm = cfg.llm()?;
    let context = pre_decompose(&item.text, cfg)?;
    let records = (0..params.k)
        .map(|_| decompose(&item.text, context.as_deref(), schema, llm, cfg.decompose))
        .collect::<Result<Vec<_>>>()?;
    let gold = match cfg.reference {
        Reference::Gold => item.gold_path.as_deref(),
        Reference::Modal => None,
    };
    let tallies = tally_decomposition(&records, gold)?;
    let mut score = EntryScore::new(item.id.clone(), tallies, params)?;
    score.accuracy = item.gold_path.as_deref().map(|g| path_accuracy(&records, g)).transpose()?;
    Ok(score)
}

fn filter_once(tree: &ConversationTree, cfg: &PipelineConfig<'_>, context: Option<&str>) -> Result<FilterResult> {
    match cfg.task {
        BenchTask::FilterVector { threshold, always_keep_last_n } => {
            filter_vector(tree, cfg.embedder()?, threshold, always_keep_last_n)
        }
        BenchTask::FilterTopk { k, always_keep_last_n } => filter_topk(tree, cfg.embedder()?, k, always_keep_last_n),
        BenchTask::FilterLlm => filter_llm(tree, cfg.llm()?, cfg.decompose, context),
        BenchTask::Decompose => Err(Error::Config("decomposition task on a conversation".into())),
    }
}

fn score_conversation(item: &ConversationItem, cfg: &PipelineConfig<'_>, params: &EciParams) -> Result<EntryScore> {
    let context = match cfg.task {
        BenchTask::FilterLlm => pre_decompose(&item.tree.reference_prompt, cfg)?,
        _ => None,
    };
    let results = (0..params.k)
        .map(|_| filter_once(&item.tree, cfg, context.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let universe = item.tree.len();
    let mut score = if universe == 0 {
        // Nothing to disagree on.
        EntryScore { id: item.id.clone(), eci: 1.0, d: 0, tallies: vec![], accuracy: None }
    } else {
        EntryScore::new(item.id.clone(), tally_filtering(&results, universe)?, params)?
    };
    if let (Some(gold), true) = (item.gold_relevant.as_deref(), universe > 0) {
        let accs = results
            .iter()
            .map(|r| filtering_accuracy(r, Some(gold), universe))
            .collect::<Result<Vec<_>>>()?;
        score.accuracy = Some(mean(&accs));
    }
    Ok(score)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Samples `sample_n` entries, runs the configured pipeline `params.k`
/// times on each and aggregates the scores.
pub fn run_benchmark(
    dataset: &Dataset,
    cfg: &PipelineConfig<'_>,
    params: &EciParams,
    sample_n: usize,
    seed: u64,
) -> std::result::Result<EvalReport, BenchmarkError> {
    let backend_id = cfg.backend_id().unwrap_or_default();
    let empty = || EvalReport::new(dataset.name(), cfg, &backend_id, *params, seed, vec![]);
    let fail = |error: Error, partial: EvalReport| BenchmarkError { partial: Box::new(partial), error };
    if dataset.is_empty() {
        return Err(fail(Error::Domain(format!("dataset `{}` is empty", dataset.name())), empty()));
    }
    if sample_n == 0 {
        return Err(fail(Error::Domain("sample size must be at least 1".into()), empty()));
    }
    if let Err(e) = params.validate().and_then(|_| cfg.check(dataset)) {
        return Err(fail(e, empty()));
    }
    let sampled = dataset.sample(sample_n, seed);
    let stop = AtomicBool::new(false);
    let guard = |f: &dyn Fn() -> Result<EntryScore>| -> Option<Result<EntryScore>> {
        if stop.load(Ordering::Relaxed) {
            return None;
        }
        let r = f();
        if r.is_err() {
            stop.store(true, Ordering::Relaxed);
        }
        Some(r)
    };
    let outcomes: Vec<Option<Result<EntryScore>>> = match &sampled {
        Dataset::Prompts { items, .. } => {
            items.par_iter().map(|item| guard(&|| score_prompt(item, cfg, params))).collect()
        }
        Dataset::Conversations { items, .. } => {
            items.par_iter().map(|item| guard(&|| score_conversation(item, cfg, params))).collect()
        }
    };
    let mut done = Vec::new();
    let mut first_err = None;
    for outcome in outcomes.into_iter().flatten() {
        match outcome {
            Ok(score) => done.push(score),
            Err(e) if first_err.is_none() => first_err = Some(e),
            Err(_) => {}
        }
    }
    let report = EvalReport::new(dataset.name(), cfg, &backend_id, *params, seed, done);
    match first_err {
        Some(error) => Err(fail(error, report)),
        None => Ok(report),
    }
}

/// Thresholds from -1 to 1 in steps of 0.05.
pub fn tau_grid() -> Vec<f64> {
    (0..=40).map(|i| f64::from(i - 20) / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub mean_accuracy: f64,
}

/// Mean vector-filtering accuracy at each threshold. Each tree is embedded
/// once; entries without gold labels are rejected.
pub fn threshold_sweep(
    dataset: &Dataset,
    embedder: &dyn EmbeddingBackend,
    always_keep_last_n: usize,
    grid: &[f64],
) -> Result<Vec<SweepPoint>> {
    let Dataset::Conversations { items, .. } = dataset else {
        return Err(Error::Config("threshold sweep needs a conversation dataset".into()));
    };
    let items: Vec<&ConversationItem> = items.iter().filter(|i| !i.tree.is_empty()).collect();
    if items.is_empty() || grid.is_empty() {
        return Err(Error::Domain("nothing to sweep".into()));
    }
    let embedded = items
        .par_iter()
        .map(|item| {
            let gold = item
                .gold_relevant
                .as_deref()
                .ok_or_else(|| Error::Domain(format!("entry {} has no gold labels", item.id)))?;
            Ok((embed_segments(&item.tree, embedder)?, gold, item.tree.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    grid.iter()
        .map(|&threshold| {
            let accs = embedded
                .iter()
                .map(|(vecs, gold, universe)| {
                    let r = filter_vector_embedded(vecs, threshold, always_keep_last_n, embedder.id())?;
                    filtering_accuracy(&r, Some(gold), *universe)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint { threshold, mean_accuracy: mean(&accs) })
        })
        .collect()
}

/// Point with the highest accuracy; the lowest threshold wins ties.
pub fn best_threshold(points: &[SweepPoint]) -> Option<SweepPoint> {
    points.iter().copied().fold(None, |best: Option<SweepPoint>, p| match best {
        Some(b) if b.mean_accuracy >= p.mean_accuracy => Some(b),
        _ => Some(p),
    })
}

/// Sanity check used by reports: a recomputed ECI for each entry.
pub fn recompute(score: &EntryScore, params: &EciParams) -> Result<f64> {
    if score.tallies.is_empty() {
        return Ok(score.eci);
    }
    eci(&score.tallies, params)
}
