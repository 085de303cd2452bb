use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use ctxpipe::eval::{
    best_threshold, eci, curves_csv, penalty_curves, render_csv, render_table, run_benchmark, tau_grid, threshold_sweep,
    BenchTask, Condition, Dataset, EciParams, EvalReport, Metric, PipelineConfig, SweepPoint, CURVE_ALPHAS,
};
use ctxpipe::filter::DEFAULT_THRESHOLD;
use ctxpipe::{EmbeddingBackend, LlmBackend};

use crate::config::{build_embedder, build_llm};
use crate::exit::{self, Failure, Outcome};
use crate::io::{load_conversations, load_prompts, partial_path, read_input, write_atomic, Sink};
use crate::{ConditionArg, Ctx, DecomposeFlags, FilterMethodArg, ReferenceArg};

pub const DEFAULT_SAMPLE_N: usize = 150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchTaskArg {
    /// Decomposition consistency on prompt datasets.
    Decomp,
    /// Filtering consistency on conversation datasets.
    Filter,
    /// Vector and LLM filtering accuracy against gold labels, with a
    /// threshold sweep.
    FilterAccuracy,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(value_enum)]
    task: BenchTaskArg,

    /// One or more datasets; each becomes a table row.
    #[arg(required = true)]
    datasets: Vec<PathBuf>,

    /// Repetitions per entry.
    #[arg(long)]
    k: Option<u32>,

    /// Penalty exponent.
    #[arg(long)]
    alpha: Option<f64>,

    /// Entries sampled per dataset.
    #[arg(long)]
    sample_n: Option<usize>,

    #[arg(long, value_enum)]
    condition: Option<ConditionArg>,

    /// Reference for decomposition tallies.
    #[arg(long, value_enum)]
    reference: Option<ReferenceArg>,

    /// Filter method for the `filter` task.
    #[arg(long, value_enum)]
    method: Option<FilterMethodArg>,

    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,

    #[arg(long)]
    top_k: Option<usize>,

    #[arg(long)]
    keep_last: Option<usize>,

    #[arg(long)]
    mock: Option<PathBuf>,

    #[arg(long)]
    embed_dim: Option<usize>,

    /// Also emit penalty curves and per-exponent mean ECI.
    #[arg(long)]
    alpha_sweep: bool,

    #[command(flatten)]
    flags: DecomposeFlags,
}

struct Run<'a> {
    ctx: &'a Ctx,
    params: EciParams,
    sample_n: usize,
    reports: Vec<EvalReport>,
}

impl Run<'_> {
    fn bench(&mut self, dataset: &Dataset, cfg: &PipelineConfig<'_>) -> Outcome<()> {
        match run_benchmark(dataset, cfg, &self.params, self.sample_n, self.ctx.seed) {
            Ok(report) => {
                self.reports.push(report);
                Ok(())
            }
            Err(e) => {
                self.reports.push(*e.partial);
                if let Some(dir) = self.ctx.out() {
                    let path = partial_path(&dir.join("report.json"));
                    std::fs::create_dir_all(dir).map_err(|err| Failure::write(dir, err))?;
                    let json = serde_json::to_string_pretty(&self.reports).expect("reports serialize");
                    std::fs::write(&path, json).map_err(|err| Failure::write(&path, err))?;
                }
                Err(e.error.into())
            }
        }
    }
}

fn load(task: BenchTaskArg, path: &PathBuf) -> Outcome<Dataset> {
    if !path.is_file() {
        return Err(Failure::no_input(path, "no such file"));
    }
    match task {
        BenchTaskArg::Decomp => load_prompts(path),
        BenchTaskArg::Filter | BenchTaskArg::FilterAccuracy => load_conversations(path),
    }
}

pub fn bench(ctx: &Ctx, args: BenchArgs) -> Outcome {
    let params = EciParams::new(
        args.alpha.or(ctx.cfg.eci.alpha).unwrap_or(ctxpipe::eval::DEFAULT_ALPHA),
        args.k.or(ctx.cfg.eci.k).unwrap_or(ctxpipe::eval::DEFAULT_K),
    )?;
    let sample_n = args.sample_n.or(ctx.cfg.bench.sample_n).unwrap_or(DEFAULT_SAMPLE_N);
    let conditions = ctx.condition(args.condition)?.conditions();
    let reference = ctx.reference(args.reference)?.reference();
    let opts = ctx.decompose_options(&args.flags)?;
    let keep_last = args.keep_last.or(ctx.cfg.filter.keep_last).unwrap_or(0);
    let tau = args.tau.or(ctx.cfg.filter.tau).unwrap_or(DEFAULT_THRESHOLD);
    let datasets = args.datasets.iter().map(|p| load(args.task, p)).collect::<Outcome<Vec<_>>>()?;

    let method = match args.task {
        BenchTaskArg::Filter => Some(ctx.filter_method(args.method)?),
        _ => None,
    };
    let needs_llm = matches!(args.task, BenchTaskArg::Decomp | BenchTaskArg::FilterAccuracy)
        || method == Some(FilterMethodArg::Llm);
    let needs_embedder = args.task == BenchTaskArg::FilterAccuracy
        || matches!(method, Some(FilterMethodArg::Vector | FilterMethodArg::Topk));
    let llm: Option<Box<dyn LlmBackend>> =
        if needs_llm { Some(build_llm(&ctx.cfg.llm, args.mock.as_deref(), ctx.live, ctx.seed)?) } else { None };
    let embedder: Option<Box<dyn EmbeddingBackend>> =
        if needs_embedder { Some(build_embedder(&ctx.cfg.embedding, args.embed_dim, ctx.live)?) } else { None };
    // A schema is optional for filtering unless decompositions get injected.
    let schema = match (args.task, ctx.schema_path.is_some(), conditions.contains(&Condition::ContextDecomposed)) {
        (BenchTaskArg::Decomp, _, _) | (_, _, true) | (_, true, _) => Some(ctx.schema()?),
        _ => None,
    };

    let base = PipelineConfig {
        task: BenchTask::Decompose,
        condition: Condition::Normal,
        reference,
        schema: schema.as_ref(),
        llm: llm.as_deref(),
        embedder: embedder.as_deref(),
        decompose: &opts,
    };
    let vector = BenchTask::FilterVector { threshold: tau, always_keep_last_n: keep_last };
    let mut run = Run { ctx, params, sample_n, reports: Vec::new() };
    let mut sweeps: Vec<(String, Vec<SweepPoint>)> = Vec::new();
    for dataset in &datasets {
        match args.task {
            BenchTaskArg::Decomp => {
                for &condition in &conditions {
                    run.bench(dataset, &PipelineConfig { condition, ..base })?;
                }
            }
            BenchTaskArg::Filter => {
                let task = match method.expect("filter task has a method") {
                    FilterMethodArg::Vector => vector,
                    FilterMethodArg::Topk => BenchTask::FilterTopk {
                        k: args
                            .top_k
                            .or(ctx.cfg.filter.top_k)
                            .ok_or_else(|| Failure::usage("--top-k is required for the topk method"))?,
                        always_keep_last_n: keep_last,
                    },
                    FilterMethodArg::Llm => BenchTask::FilterLlm,
                };
                if task == BenchTask::FilterLlm {
                    for &condition in &conditions {
                        run.bench(dataset, &PipelineConfig { task, condition, ..base })?;
                    }
                } else {
                    run.bench(dataset, &PipelineConfig { task, ..base })?;
                }
            }
            BenchTaskArg::FilterAccuracy => {
                run.bench(dataset, &PipelineConfig { task: vector, ..base })?;
                for &condition in &conditions {
                    run.bench(dataset, &PipelineConfig { task: BenchTask::FilterLlm, condition, ..base })?;
                }
                let sampled = dataset.sample(sample_n, ctx.seed);
                let points = threshold_sweep(&sampled, embedder.as_deref().expect("embedder"), keep_last, &tau_grid())?;
                sweeps.push((dataset.name().to_string(), points));
            }
        }
    }
    write_outputs(ctx, &run.reports, &sweeps, args.alpha_sweep)?;
    Ok(exit::OK)
}

fn sweep_csv(sweeps: &[(String, Vec<SweepPoint>)]) -> String {
    let mut out = String::from("dataset,threshold,mean_accuracy\n");
    for (name, points) in sweeps {
        for p in points {
            let _ = writeln!(out, "{name},{},{}", p.threshold, p.mean_accuracy);
        }
    }
    out
}

/// Mean ECI of every report re-scored at each standard exponent.
fn alpha_sweep_csv(reports: &[EvalReport]) -> Outcome<String> {
    let mut out = String::from("dataset,task,backend,condition,alpha,mean_eci\n");
    for r in reports {
        for &alpha in &CURVE_ALPHAS {
            let params = EciParams::new(alpha, r.params.k)?;
            let scores = r
                .per_entry
                .iter()
                .map(|e| if e.tallies.is_empty() { Ok(e.eci) } else { eci(&e.tallies, &params) })
                .collect::<ctxpipe::Result<Vec<_>>>()?;
            let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
            let _ = writeln!(
                out,
                "{},{},{},{},{alpha},{mean}",
                r.dataset_name,
                r.task.label(),
                r.backend_id,
                r.method.label()
            );
        }
    }
    Ok(out)
}

fn write_outputs(
    ctx: &Ctx,
    reports: &[EvalReport],
    sweeps: &[(String, Vec<SweepPoint>)],
    alpha_sweep: bool,
) -> Outcome<()> {
    let has_accuracy = reports.iter().any(|r| r.mean_accuracy.is_some());
    let mut text = render_table(reports, Metric::Eci);
    if has_accuracy {
        text.push('\n');
        text.push_str(&render_table(reports, Metric::Accuracy));
    }
    for (name, points) in sweeps {
        if let Some(best) = best_threshold(points) {
            let _ = writeln!(
                text,
                "\n{name}: best threshold {} (accuracy {:.4}; {:.4} keeping everything)",
                best.threshold, best.mean_accuracy, points[0].mean_accuracy
            );
        }
    }
    print!("{text}");

    let Some(dir) = ctx.out() else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Failure::write(dir, e))?;
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    write_atomic(&dir.join("table.txt"), text.as_bytes())?;
    write_atomic(&dir.join("table.csv"), render_csv(reports, Metric::Eci).as_bytes())?;
    if has_accuracy {
        write_atomic(&dir.join("accuracy.csv"), render_csv(reports, Metric::Accuracy).as_bytes())?;
    }
    if !sweeps.is_empty() {
        write_atomic(&dir.join("sweep.csv"), sweep_csv(sweeps).as_bytes())?;
    }
    if alpha_sweep {
        write_atomic(&dir.join("curves.csv"), curves_csv(&penalty_curves(&CURVE_ALPHAS, 20)?).as_bytes())?;
        write_atomic(&dir.join("alpha_sweep.csv"), alpha_sweep_csv(reports)?.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Eci,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Text,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum ReportCommand {
    /// Combine saved reports into one table.
    Table {
        /// `report.json` files from `bench`.
        #[arg(required = true)]
        files: Vec<PathBuf>,

        #[arg(long, value_enum, default_value_t = MetricArg::Eci)]
        metric: MetricArg,

        #[arg(long, value_enum, default_value_t = FormatArg::Text)]
        format: FormatArg,
    },
    /// Single-item ECI against the correct ratio for several exponents.
    Curves {
        /// Ratio grid resolution.
        #[arg(long, default_value_t = 20)]
        steps: u32,

        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
}

fn read_reports(path: &PathBuf) -> Outcome<Vec<EvalReport>> {
    let text = read_input(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::new(exit::DATA, format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|r| vec![r])
    };
    parsed.map_err(|e| Failure::new(exit::DATA, format!("{}: {e}", path.display())))
}

pub fn report(ctx: &Ctx, cmd: ReportCommand) -> Outcome {
    let text = match cmd {
        ReportCommand::Table { files, metric, format } => {
            let mut reports = Vec::new();
            for f in &files {
                reports.extend(read_reports(f)?);
            }
            let metric = match metric {
                MetricArg::Eci => Metric::Eci,
                MetricArg::Accuracy => Metric::Accuracy,
            };
            match format {
                FormatArg::Text => render_table(&reports, metric),
                FormatArg::Csv => render_csv(&reports, metric),
            }
        }
        ReportCommand::Curves { steps, alphas } => {
            if steps == 0 {
                return Err(Failure::usage("--steps must be at least 1"));
            }
            let alphas = alphas.unwrap_or_else(|| CURVE_ALPHAS.to_vec());
            curves_csv(&penalty_curves(&alphas, steps)?)
        }
    };
    let mut sink = Sink::open(ctx.out())?;
    sink.line(text.trim_end())?;
    sink.finish()?;
    Ok(exit::OK)
}
