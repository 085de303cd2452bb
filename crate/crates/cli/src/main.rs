//! `ctxpipe`: decompose prompts, filter conversation context, generate
//! synthetic datasets and score consistency.

mod bench;
mod commands;
mod config;
mod exit;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxpipe::eval::{Condition, Reference};
use ctxpipe::schema::load_schema_file;
use ctxpipe::{DecomposeOptions, DecompositionSchema};

use config::RunConfig;
use exit::{Failure, Outcome};

#[derive(Parser, Debug)]
#[command(name = "ctxpipe", version, about = "Context-aware prompt decomposition and filtering")]
struct Cli {
    /// Decomposition schema (JSON).
    #[arg(long, global = true)]
    schema: Option<PathBuf>,

    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Allow HTTP backends from the config.
    #[arg(long, global = true)]
    live: bool,

    /// Output file (directory for `bench`). Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify prompts level by level through the schema.
    Decompose(commands::DecomposeArgs),
    /// Select the context segments relevant to each conversation's prompt.
    Filter(commands::FilterArgs),
    /// Generate labeled synthetic datasets.
    #[command(subcommand)]
    Synth(commands::SynthCommand),
    /// Run a k-repetition consistency benchmark.
    Bench(bench::BenchArgs),
    /// Render tables and curves from saved reports.
    #[command(subcommand)]
    Report(bench::ReportCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterMethodArg {
    Vector,
    Topk,
    Llm,
}

impl FilterMethodArg {
    fn parse(s: &str) -> Outcome<Self> {
        <Self as ValueEnum>::from_str(s, true).map_err(|_| Failure::usage(format!("unknown filter method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConditionArg {
    Normal,
    Cd,
    Both,
}

impl ConditionArg {
    fn parse(s: &str) -> Outcome<Self> {
        <Self as ValueEnum>::from_str(s, true).map_err(|_| Failure::usage(format!("unknown condition `{s}`")))
    }

    pub fn conditions(self) -> Vec<Condition> {
        match self {
            ConditionArg::Normal => vec![Condition::Normal],
            ConditionArg::Cd => vec![Condition::ContextDecomposed],
            ConditionArg::Both => vec![Condition::Normal, Condition::ContextDecomposed],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferenceArg {
    Modal,
    Gold,
}

impl ReferenceArg {
    fn parse(s: &str) -> Outcome<Self> {
        <Self as ValueEnum>::from_str(s, true).map_err(|_| Failure::usage(format!("unknown reference `{s}`")))
    }

    pub fn reference(self) -> Reference {
        match self {
            ReferenceArg::Modal => Reference::Modal,
            ReferenceArg::Gold => Reference::Gold,
        }
    }
}

/// Decomposition settings shared by several subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct DecomposeFlags {
    /// Repair rounds after an invalid reply, per level.
    #[arg(long)]
    max_repairs: Option<u32>,

    /// Summarize the prompt before each deeper level.
    #[arg(long)]
    resummarize: bool,

    #[arg(long)]
    temperature: Option<f64>,
}

/// Resolved global state handed to every subcommand.
pub struct Ctx {
    pub cfg: RunConfig,
    pub schema_path: Option<PathBuf>,
    pub seed: u64,
    pub live: bool,
    pub out: Option<PathBuf>,
}

impl Ctx {
    pub fn schema(&self) -> Outcome<DecompositionSchema> {
        let path = self.schema_path.as_deref().ok_or_else(|| Failure::usage("--schema is required"))?;
        if !path.exists() {
            return Err(Failure::no_input(path, "no such file"));
        }
        load_schema_file(path).map_err(|e| Failure::from_core_at(e, path))
    }

    pub fn decompose_options(&self, flags: &DecomposeFlags) -> Outcome<DecomposeOptions> {
        let mut opts = DecomposeOptions::default();
        let file = &self.cfg.decompose;
        if let Some(n) = flags.max_repairs.or(file.max_repairs) {
            opts.max_repairs = n;
        }
        opts.resummarize = flags.resummarize || file.resummarize.unwrap_or(false);
        if let Some(t) = flags.temperature.or(file.temperature) {
            opts.temperature = t;
        }
        opts.validate()?;
        Ok(opts)
    }

    pub fn filter_method(&self, flag: Option<FilterMethodArg>) -> Outcome<FilterMethodArg> {
        match (flag, self.cfg.filter.method.as_deref()) {
            (Some(m), _) => Ok(m),
            (None, Some(s)) => FilterMethodArg::parse(s),
            (None, None) => Ok(FilterMethodArg::Vector),
        }
    }

    pub fn condition(&self, flag: Option<ConditionArg>) -> Outcome<ConditionArg> {
        match (flag, self.cfg.bench.condition.as_deref()) {
            (Some(c), _) => Ok(c),
            (None, Some(s)) => ConditionArg::parse(s),
            (None, None) => Ok(ConditionArg::Normal),
        }
    }

    pub fn reference(&self, flag: Option<ReferenceArg>) -> Outcome<ReferenceArg> {
        match (flag, self.cfg.bench.reference.as_deref()) {
            (Some(r), _) => Ok(r),
            (None, Some(s)) => ReferenceArg::parse(s),
            (None, None) => Ok(ReferenceArg::Modal),
        }
    }

    pub fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        if jobs == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx {
        schema_path: cli.schema.or_else(|| cfg.schema.clone()),
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        live: cli.live,
        out: cli.out,
        cfg,
    };
    match cli.command {
        Command::Decompose(args) => commands::decompose(&ctx, args),
        Command::Filter(args) => commands::filter(&ctx, args),
        Command::Synth(cmd) => commands::synth(&ctx, cmd),
        Command::Bench(args) => bench::bench(&ctx, args),
        Command::Report(cmd) => bench::report(&ctx, cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
