use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use ctxpipe::eval::Dataset;
use ctxpipe::filter::{filter_llm, filter_topk, filter_vector, DEFAULT_THRESHOLD};
use ctxpipe::synth::{
    default_topics, gen_conversations, gen_prompts, ConversationSource, ConversationTemplates, DivergenceMode,
    PromptSource, PromptTemplates, TopicList,
};
use ctxpipe::{decompose as run_decompose, DecompositionSchema, FilterResult};
use rayon::prelude::*;

use crate::config::{build_embedder, build_llm};
use crate::exit::{self, Failure, Outcome};
use crate::io::{load_conversations, load_prompts, Sink};
use crate::{Ctx, DecomposeFlags, FilterMethodArg};

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    /// Prompt to classify.
    #[arg(conflicts_with = "input")]
    prompt: Option<String>,

    /// File of prompts: plain lines or JSONL.
    #[arg(long)]
    input: Option<PathBuf>,

    /// Context injected ahead of the prompt.
    #[arg(long)]
    context: Option<String>,

    /// Scripted mock replies instead of the sampling mock.
    #[arg(long)]
    mock: Option<PathBuf>,

    #[command(flatten)]
    flags: DecomposeFlags,
}

fn require_file(path: &Path) -> Outcome<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::no_input(path, "no such file"))
    }
}

pub fn decompose(ctx: &Ctx, args: DecomposeArgs) -> Outcome {
    let prompts: Vec<String> = match (&args.prompt, &args.input) {
        (Some(p), _) => vec![p.clone()],
        (None, Some(path)) => {
            require_file(path)?;
            let Dataset::Prompts { items, .. } = load_prompts(path)? else { unreachable!() };
            items.into_iter().map(|i| i.text).collect()
        }
        (None, None) => return Err(Failure::usage("give a prompt or --input FILE")),
    };
    if prompts.is_empty() || prompts.iter().any(|p| p.trim().is_empty()) {
        return Err(Failure::usage("prompt is empty"));
    }
    let schema = ctx.schema()?;
    let opts = ctx.decompose_options(&args.flags)?;
    let llm = build_llm(&ctx.cfg.llm, args.mock.as_deref(), ctx.live, ctx.seed)?;
    let context = args.context.as_deref();
    let results: Vec<_> =
        prompts.par_iter().map(|p| run_decompose(p, context, &schema, llm.as_ref(), &opts)).collect();

    let mut sink = Sink::open(ctx.out())?;
    let mut degraded = 0;
    for r in results {
        let record = r?;
        if record.degraded {
            degraded += 1;
        }
        sink.json(&record)?;
    }
    sink.finish()?;
    if degraded == prompts.len() {
        log::warn!("every record fell back to a default category");
        return Ok(exit::DEGRADED);
    }
    Ok(exit::OK)
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Conversations (JSONL).
    dataset: PathBuf,

    #[arg(long, value_enum)]
    method: Option<FilterMethodArg>,

    /// Similarity threshold for `vector`.
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,

    /// Segments kept by `topk`.
    #[arg(long)]
    top_k: Option<usize>,

    /// Always keep this many trailing segments.
    #[arg(long)]
    keep_last: Option<usize>,

    #[arg(long)]
    mock: Option<PathBuf>,

    /// Dimension of the mock embedder.
    #[arg(long)]
    embed_dim: Option<usize>,

    #[command(flatten)]
    flags: DecomposeFlags,
}

pub fn filter(ctx: &Ctx, args: FilterArgs) -> Outcome {
    require_file(&args.dataset)?;
    let Dataset::Conversations { items, .. } = load_conversations(&args.dataset)? else { unreachable!() };
    let method = ctx.filter_method(args.method)?;
    let keep_last = args.keep_last.or(ctx.cfg.filter.keep_last).unwrap_or(0);
    let results: Vec<ctxpipe::Result<FilterResult>> = match method {
        FilterMethodArg::Vector | FilterMethodArg::Topk => {
            let emb = build_embedder(&ctx.cfg.embedding, args.embed_dim, ctx.live)?;
            let tau = args.tau.or(ctx.cfg.filter.tau).unwrap_or(DEFAULT_THRESHOLD);
            let top_k = args.top_k.or(ctx.cfg.filter.top_k);
            if method == FilterMethodArg::Topk && top_k.is_none() {
                return Err(Failure::usage("--top-k is required for the topk method"));
            }
            items
                .par_iter()
                .map(|item| match top_k {
                    Some(k) if method == FilterMethodArg::Topk => filter_topk(&item.tree, emb.as_ref(), k, keep_last),
                    _ => filter_vector(&item.tree, emb.as_ref(), tau, keep_last),
                })
                .collect()
        }
        FilterMethodArg::Llm => {
            let opts = ctx.decompose_options(&args.flags)?;
            let llm = build_llm(&ctx.cfg.llm, args.mock.as_deref(), ctx.live, ctx.seed)?;
            items.par_iter().map(|item| filter_llm(&item.tree, llm.as_ref(), &opts, None)).collect()
        }
    };

    let mut sink = Sink::open(ctx.out())?;
    let mut failed_open = 0;
    for r in results {
        let result = r?;
        if result.params.fail_open.is_some() {
            failed_open += 1;
        }
        sink.json(&result)?;
    }
    sink.finish()?;
    if !items.is_empty() && failed_open == items.len() {
        log::warn!("every selection was rejected; all segments kept");
        return Ok(exit::DEGRADED);
    }
    Ok(exit::OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Templates,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PerTurn,
    SingleDerail,
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    /// Labeled prompts, one per schema leaf draw.
    Prompts(SynthPromptArgs),
    /// Conversations with labeled topic divergence.
    Conversations(SynthConversationArgs),
}

#[derive(Args, Debug)]
pub struct SynthCommon {
    #[arg(long, default_value_t = 150)]
    n: usize,

    /// Topic list, one per line. Defaults to the shipped list.
    #[arg(long)]
    topics: Option<PathBuf>,

    /// Template file replacing the shipped templates.
    #[arg(long)]
    templates: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = SourceArg::Templates)]
    source: SourceArg,

    /// Mock script for `--source llm`.
    #[arg(long)]
    mock: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthPromptArgs {
    #[command(flatten)]
    common: SynthCommon,

    /// Sentence counts to draw from.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    lengths: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct SynthConversationArgs {
    #[command(flatten)]
    common: SynthCommon,

    /// User/assistant pairs per conversation.
    #[arg(long, default_value_t = 5)]
    pairs: usize,

    /// Chance that a user turn drifts off topic.
    #[arg(long, default_value_t = 0.5)]
    p_diverge: f64,

    #[arg(long, value_enum, default_value_t = ModeArg::PerTurn)]
    mode: ModeArg,
}

fn topics(common: &SynthCommon) -> Outcome<TopicList> {
    match &common.topics {
        Some(path) => {
            require_file(path)?;
            TopicList::load(path).map_err(|e| Failure::from_core_at(e, path))
        }
        None => Ok(default_topics()),
    }
}

/// Shipped prompt templates that cover `schema`.
fn shipped_templates(schema: &DecompositionSchema, max_len: usize) -> Outcome<PromptTemplates> {
    [PromptTemplates::fig2(), PromptTemplates::fig4()]
        .into_iter()
        .find(|t| t.check_covers(schema, max_len).is_ok())
        .ok_or_else(|| Failure::usage("no shipped templates cover this schema; pass --templates"))
}

pub fn synth(ctx: &Ctx, cmd: SynthCommand) -> Outcome {
    let mut sink;
    match cmd {
        SynthCommand::Prompts(args) => {
            let schema = ctx.schema()?;
            let topics = topics(&args.common)?;
            let max_len = args.lengths.iter().copied().max().unwrap_or(1);
            let entries = match args.common.source {
                SourceArg::Templates => {
                    let templates = match &args.common.templates {
                        Some(path) => {
                            require_file(path)?;
                            let t = PromptTemplates::load(path).map_err(|e| Failure::from_core_at(e, path))?;
                            t.check_covers(&schema, max_len)?;
                            t
                        }
                        None => shipped_templates(&schema, max_len)?,
                    };
                    gen_prompts(&schema, &topics, args.common.n, &args.lengths, ctx.seed, PromptSource::Templates(&templates))?
                }
                SourceArg::Llm => {
                    let llm = build_llm(&ctx.cfg.llm, args.common.mock.as_deref(), ctx.live, ctx.seed)?;
                    gen_prompts(&schema, &topics, args.common.n, &args.lengths, ctx.seed, PromptSource::Llm(llm.as_ref()))?
                }
            };
            sink = Sink::open(ctx.out())?;
            for e in &entries {
                sink.json(e)?;
            }
        }
        SynthCommand::Conversations(args) => {
            let topics = topics(&args.common)?;
            let mode = match args.mode {
                ModeArg::PerTurn => DivergenceMode::PerTurn,
                ModeArg::SingleDerail => DivergenceMode::SingleDerail,
            };
            let (n, pairs, p) = (args.common.n, args.pairs, args.p_diverge);
            let entries = match args.common.source {
                SourceArg::Templates => {
                    let templates = match &args.common.templates {
                        Some(path) => {
                            require_file(path)?;
                            ConversationTemplates::load(path).map_err(|e| Failure::from_core_at(e, path))?
                        }
                        None => ConversationTemplates::shipped(),
                    };
                    gen_conversations(&topics, pairs, p, n, ctx.seed, mode, ConversationSource::Templates(&templates))?
                }
                SourceArg::Llm => {
                    let llm = build_llm(&ctx.cfg.llm, args.common.mock.as_deref(), ctx.live, ctx.seed)?;
                    gen_conversations(&topics, pairs, p, n, ctx.seed, mode, ConversationSource::Llm(llm.as_ref()))?
                }
            };
            sink = Sink::open(ctx.out())?;
            for e in &entries {
                sink.json(e)?;
            }
        }
    }
    sink.finish()?;
    Ok(exit::OK)
}
