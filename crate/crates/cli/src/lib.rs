//! `focus` command-line tool: build the slang datasets, run prompting
//! methods against a chat model and report scores.
//!
//! Exit codes: 0 success, 1 run failure, 2 usage error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use focus_core::counterfactual::{build_counterfactual_dataset, CounterfactualOptions, DEFAULT_DIVERGENCE_CEILING};
use focus_core::filterpipe::{run_filter_pipeline, FilterServices, NoveltyMode};
use focus_core::focus::{Ablation, FocusConfig, Method};
use focus_core::harness::{
    load_dataset, load_run, persist_run, render_table, rescore, run_ablation, run_benchmark, table_rows, Layout,
    RunConfig, RunRecord, RunStatus,
};
use focus_core::ingest::{parse_dump_file, read_dataset, write_dataset, DumpFormat, RawEntry};
use focus_core::prompts::CallContext;
use focus_core::standardize::{build_factual_dataset, FactualRecord, MeaningGate};

pub mod backends;
pub mod config;

use backends::Backends;
use config::{FileConfig, GlobalFlags, Settings};

/// Bad invocation: maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "focus", version, about = "Slang benchmark construction and causal-intervention prompting")]
pub struct Cli {
    /// TOML settings file; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Use the offline scripted/synthetic model and hash embedders.
    #[arg(long, global = true)]
    mock: bool,
    /// JSON rule file for the scripted mock model.
    #[arg(long, global = true, value_name = "FILE")]
    mock_script: Option<PathBuf>,
    /// Directory for the response cache.
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Maximum samples in flight.
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,
    /// Chat model id.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Directory of prompt template overrides.
    #[arg(long, global = true, value_name = "DIR")]
    prompts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw dictionary dump into normalized records.
    Ingest(IngestArgs),
    /// Apply the temporal, vote, content and novelty filters.
    Filter(FilterArgs),
    /// Rewrite explanations into the three-clause template and add variants.
    Standardize(StandardizeArgs),
    /// Derive the counterfactual dataset from a factual one.
    Counterfactual(CounterfactualArgs),
    /// Run one method over a dataset and persist the run.
    Run(RunArgs),
    /// Re-score a persisted run against its dataset.
    Score(ScoreArgs),
    /// Run full FOCUS and both single-stage ablations.
    Ablate(AblateArgs),
    /// Render persisted runs as a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// jsonl or csv.
    #[arg(long, default_value = "jsonl")]
    format: DumpFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Structured funnel report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    cutoff: Option<NaiveDate>,
    #[arg(long)]
    ratio_max: Option<f64>,
    #[arg(long)]
    blocklist: Option<PathBuf>,
    /// off, llm-probe, needle-test or both.
    #[arg(long)]
    novelty: Option<NoveltyMode>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct StandardizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Attempts per prompt when a reply fails validation.
    #[arg(long)]
    retries: Option<u32>,
    /// Reject rewrites whose similarity to the raw definition is below this.
    #[arg(long)]
    meaning_floor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CounterfactualArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum similarity between original and rewritten explanation.
    /// Defaults to 0.5 with real embedders and is off in mock mode.
    #[arg(long)]
    divergence_ceiling: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// focus, direct, cot or cauview.
    #[arg(long, default_value = "focus")]
    method: Method,
    /// none, skip_mei or skip_eri.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Runs directory; the run lands in `<out>/<run_id>/`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Run directory.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Write the comparison table here as well as to stdout.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories, one row each.
    #[arg(long = "run", required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// factual, counterfactual or ablation.
    #[arg(long, default_value = "factual")]
    layout: Layout,
    /// Plain-text table; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table rows as JSON.
    #[arg(long)]
    rows: Option<PathBuf>,
}

/// Parse `argv` (including the program name), execute, and return the
/// process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(parsed) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<i32> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let flags = GlobalFlags {
        model: cli.model,
        parallel: cli.parallel,
        cache_dir: cli.cache_dir,
        mock: cli.mock,
        mock_script: cli.mock_script,
        prompts: cli.prompts,
    };
    let settings = Settings::merge(file, &flags)?;
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Filter(a) => filter(a, &settings),
        Command::Standardize(a) => standardize(a, &settings),
        Command::Counterfactual(a) => counterfactual(a, &settings),
        Command::Run(a) => run(a, &settings),
        Command::Score(a) => score(a, &settings),
        Command::Ablate(a) => ablate(a, &settings),
        Command::Report(a) => report(a),
    }
}

fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let (records, errors) = read_dataset::<T>(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(e) = errors.first() {
        bail!("{}: line {}: {} ({} malformed lines)", path.display(), e.line, e.reason, errors.len());
    }
    Ok(records)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn context(s: &Settings, seed: u64, retries: Option<u32>) -> anyhow::Result<CallContext> {
    Ok(CallContext::new(s.model_id()?).with_seed(seed).with_attempts(retries.unwrap_or(s.retries)))
}

fn ingest(a: IngestArgs) -> anyhow::Result<i32> {
    let outcome = parse_dump_file(&a.input, a.format).with_context(|| format!("reading {}", a.input.display()))?;
    for e in &outcome.errors {
        eprintln!("{}: line {}: {}", a.input.display(), e.line, e.reason);
    }
    let n = write_dataset(&outcome.entries, &a.out)?;
    eprintln!("ingested {n} entries, skipped {} malformed", outcome.errors.len());
    Ok(0)
}

fn filter(a: FilterArgs, s: &Settings) -> anyhow::Result<i32> {
    let mut cfg = s.filter.clone();
    cfg.parallelism = s.parallel;
    if let Some(v) = a.cutoff {
        cfg.cutoff_date = v;
    }
    if let Some(v) = a.ratio_max {
        cfg.downvote_ratio_max = v;
    }
    if let Some(v) = a.blocklist {
        cfg.blocklist_path = Some(v);
    }
    if let Some(v) = a.novelty {
        cfg.novelty_mode = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let entries: Vec<RawEntry> = read_input(&a.input)?;
    let (kept, report) = if cfg.novelty_mode == NoveltyMode::Off && !cfg.moderation {
        run_filter_pipeline(entries, &cfg, None)?
    } else {
        let ctx = context(s, cfg.seed, None)?;
        let b = Backends::build(s)?;
        let services = FilterServices {
            prompter: b.prompter(ctx),
            embedder: b.embedders.similarity.as_ref(),
        };
        run_filter_pipeline(entries, &cfg, Some(&services))?
    };
    write_dataset(&kept, &a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    println!("{report}");
    Ok(0)
}

fn standardize(a: StandardizeArgs, s: &Settings) -> anyhow::Result<i32> {
    let entries: Vec<RawEntry> = read_input(&a.input)?;
    let seed = a.seed.unwrap_or(s.seed);
    let ctx = context(s, seed, a.retries)?;
    let b = Backends::build(s)?;
    let p = b.prompter(ctx);
    let gate = a.meaning_floor.map(|floor| MeaningGate { embedder: b.embedders.similarity.as_ref(), floor });
    let (records, skipped) = build_factual_dataset(&entries, &p, gate, seed, s.parallel);
    for k in &skipped {
        eprintln!("skipped {} ({}): {}", k.id, k.phrase, k.reason);
    }
    write_dataset(&records, &a.out)?;
    eprintln!("standardized {} of {} entries", records.len(), entries.len());
    Ok(if records.is_empty() && !entries.is_empty() { 1 } else { 0 })
}

fn counterfactual(a: CounterfactualArgs, s: &Settings) -> anyhow::Result<i32> {
    let factual: Vec<FactualRecord> = read_input(&a.input)?;
    let seed = a.seed.unwrap_or(s.seed);
    let ctx = context(s, seed, a.retries)?;
    let b = Backends::build(s)?;
    let p = b.prompter(ctx);
    let ceiling = a.divergence_ceiling.or(if b.mock { None } else { Some(DEFAULT_DIVERGENCE_CEILING) });
    let opts = CounterfactualOptions {
        divergence: ceiling.map(|c| (b.embedders.similarity.as_ref(), c)),
        parallelism: s.parallel,
        ..CounterfactualOptions::default()
    };
    let (records, skipped) = build_counterfactual_dataset(&factual, &p, &opts, seed);
    for k in &skipped {
        eprintln!("skipped {} ({}): {}", k.id, k.phrase, k.reason);
    }
    write_dataset(&records, &a.out)?;
    eprintln!("built {} counterfactual records from {} factual", records.len(), factual.len());
    Ok(if records.is_empty() && !factual.is_empty() { 1 } else { 0 })
}

fn run_config(s: &Settings, method: Method, ablation: Ablation, seed: u64) -> RunConfig {
    RunConfig {
        method,
        focus: FocusConfig { rng_seed: seed, ablation, ..s.focus.clone() },
        seed,
        parallelism: s.parallel,
        failure_threshold: s.failure_threshold,
    }
}

fn announce(rec: &RunRecord, dir: &Path) {
    println!("{} {:?} {} failures -> {}", rec.run_id, rec.status, rec.failures.len(), dir.display());
    for f in &rec.failures {
        eprintln!("  {}: {}", f.sample_id, f.error);
    }
}

fn run(a: RunArgs, s: &Settings) -> anyhow::Result<i32> {
    let ablation = a.ablation.unwrap_or(s.focus.ablation);
    if ablation != Ablation::NONE && a.method != Method::Focus {
        return Err(UsageError("--ablation only applies to --method focus".into()).into());
    }
    let dataset = load_dataset(&a.dataset)?;
    let seed = a.seed.unwrap_or(s.seed);
    let ctx = context(s, seed, None)?;
    let b = Backends::build(s)?;
    let p = b.prompter(ctx);
    let rec = run_benchmark(&dataset, &run_config(s, a.method, ablation, seed), &p, &b.embedders);
    let dir = persist_run(&rec, &a.out)?;
    announce(&rec, &dir);
    if rec.report.is_some() {
        print!("{}", render_table(std::slice::from_ref(&rec), Layout::Factual)?);
    }
    Ok(if rec.status == RunStatus::Failed { 1 } else { 0 })
}

fn score(a: ScoreArgs, s: &Settings) -> anyhow::Result<i32> {
    let rec = load_run(&a.pred).with_context(|| format!("loading run {}", a.pred.display()))?;
    let dataset = load_dataset(&a.dataset)?;
    let embedders = if s.mock { focus_core::llmclient::Embedders::mock() } else { Backends::build(s)?.embedders };
    let report = rescore(&rec, &dataset, &embedders)?;
    write_json(&a.out, &report)?;
    println!("scored {} samples -> {}", report.sample_count, a.out.display());
    Ok(0)
}

fn ablate(a: AblateArgs, s: &Settings) -> anyhow::Result<i32> {
    let dataset = load_dataset(&a.dataset)?;
    let seed = a.seed.unwrap_or(s.seed);
    let ctx = context(s, seed, None)?;
    let b = Backends::build(s)?;
    let p = b.prompter(ctx);
    let cfg = run_config(s, Method::Focus, Ablation::NONE, seed);
    let mut records = Vec::new();
    for (_, rec) in run_ablation(&dataset, &cfg, &p, &b.embedders) {
        let dir = persist_run(&rec, &a.out)?;
        announce(&rec, &dir);
        records.push(rec);
    }
    let table = render_table(&records, Layout::Ablation)?;
    if let Some(path) = &a.table {
        fs::write(path, &table)?;
    }
    print!("{table}");
    Ok(if records.iter().any(|r| r.status == RunStatus::Failed) { 1 } else { 0 })
}

fn report(a: ReportArgs) -> anyhow::Result<i32> {
    let records = a
        .runs
        .iter()
        .map(|d| load_run(d).with_context(|| format!("loading run {}", d.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table = render_table(&records, a.layout)?;
    match &a.out {
        Some(path) => fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{table}"),
    }
    if let Some(path) = &a.rows {
        write_json(path, &table_rows(&records))?;
    }
    Ok(0)
}
