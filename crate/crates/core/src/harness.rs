//! End-to-end runs: execute a method over a dataset, score, aggregate,
//! persist, and render comparison tables.
//!
//! Run directory layout: `<runs>/<run_id>/{record.json, report.json, traces/}`.
//! The directory is staged under a temporary name and renamed into place,
//! so a reader never sees a partial run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::CounterfactualRecord;
use crate::exec::bounded_map;
use crate::focus::{run_baseline, run_focus, Ablation, BaselineTrace, FocusConfig, FocusTrace, Method, Sample};
use crate::ingest::{self, IngestError};
use crate::llmclient::Embedders;
use crate::metrics::{aggregate, score_sample, AggregateMeta, AggregateReport, SampleScore};
use crate::prompts::Prompter;
use crate::standardize::{FactualRecord, PIPELINE_VERSION};
use crate::text;

/// Fraction of failed samples above which a run is marked failed.
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset {path}: {reason}")]
    Dataset { path: String, reason: String },
    #[error("nothing to render")]
    Empty,
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A benchmark sample from either dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRecord {
    Counterfactual(CounterfactualRecord),
    Factual(FactualRecord),
}

impl Sample for DatasetRecord {
    fn id(&self) -> &str {
        match self {
            DatasetRecord::Counterfactual(r) => Sample::id(r),
            DatasetRecord::Factual(r) => Sample::id(r),
        }
    }
    fn phrase(&self) -> &str {
        match self {
            DatasetRecord::Counterfactual(r) => Sample::phrase(r),
            DatasetRecord::Factual(r) => Sample::phrase(r),
        }
    }
    fn context(&self) -> &str {
        match self {
            DatasetRecord::Counterfactual(r) => Sample::context(r),
            DatasetRecord::Factual(r) => Sample::context(r),
        }
    }
    fn references(&self) -> Vec<String> {
        match self {
            DatasetRecord::Counterfactual(r) => Sample::references(r),
            DatasetRecord::Factual(r) => Sample::references(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub path: String,
    /// Hex SHA-256 of the file bytes.
    pub hash: String,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub records: Vec<DatasetRecord>,
}

/// Load a factual or counterfactual dataset. Any malformed line is an error.
pub fn load_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    let bytes = fs::read(path)
        .map_err(|e| HarnessError::Dataset { path: path.display().to_string(), reason: e.to_string() })?;
    let (records, errors) = ingest::read_records::<DatasetRecord, _>(bytes.as_slice())?;
    if let Some(e) = errors.first() {
        return Err(HarnessError::Dataset {
            path: path.display().to_string(),
            reason: format!("line {}: {}", e.line, e.reason),
        });
    }
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    Ok(Dataset {
        info: DatasetInfo { path: path.display().to_string(), hash: text::sha256_hex(&bytes), id },
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub focus: FocusConfig,
    pub seed: u64,
    pub parallelism: usize,
    pub failure_threshold: f64,
}

impl RunConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        RunConfig {
            method,
            focus: FocusConfig { rng_seed: seed, ..FocusConfig::default() },
            seed,
            parallelism: 4,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.focus.ablation = ablation;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trace {
    Focus(Box<FocusTrace>),
    Baseline(BaselineTrace),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub prediction: Option<String>,
    pub score: Option<SampleScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub trace: Option<Trace>,
    #[serde(skip)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub run: RunConfig,
    pub pipeline_version: String,
    pub prompt_versions: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub started_at: String,
    pub wall_ms: u64,
    pub sample_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub dataset: DatasetInfo,
    pub method: Method,
    pub model_id: String,
    pub ablation: Ablation,
    pub config: ConfigSnapshot,
    pub samples: Vec<SampleResult>,
    pub report: Option<AggregateReport>,
    pub failures: Vec<Failure>,
    pub status: RunStatus,
    pub timings: Timings,
}

impl RunRecord {
    /// Label used as the method column of tables.
    pub fn method_label(&self) -> String {
        if self.method == Method::Focus && self.ablation != Ablation::NONE {
            self.ablation.label().to_string()
        } else {
            self.method.label().to_string()
        }
    }

    pub fn scores(&self) -> Vec<SampleScore> {
        self.samples.iter().filter_map(|s| s.score.clone()).collect()
    }
}

/// Stable identifier of a run's inputs. Parallelism does not affect
/// results and is left out.
pub fn run_id(dataset_hash: &str, model_id: &str, config: &RunConfig) -> String {
    let config = RunConfig { parallelism: 0, ..config.clone() };
    let key = serde_json::json!({ "dataset": dataset_hash, "model": model_id, "config": config });
    let h = text::sha256_hex(key.to_string().as_bytes());
    format!("{}-{}-{}", config.method, config.focus.ablation.to_string().replace(',', "+"), &h[..12])
}

fn run_sample(sample: &DatasetRecord, cfg: &RunConfig, p: &Prompter, embedders: &Embedders) -> SampleResult {
    let started = Instant::now();
    let outcome = match cfg.method {
        Method::Focus => run_focus(sample, p, &cfg.focus).map(|(y, t)| (y, Trace::Focus(Box::new(t)))),
        m => run_baseline(sample, m, p, &cfg.focus).map(|(y, t)| (y, Trace::Baseline(t))),
    };
    let mut result = SampleResult {
        sample_id: sample.id().to_string(),
        prediction: None,
        score: None,
        error: None,
        trace: None,
        wall_ms: 0,
    };
    match outcome {
        Ok((prediction, trace)) => {
            match score_sample(&prediction, &sample.references(), embedders) {
                Ok(s) => result.score = Some(s),
                Err(e) => result.error = Some(format!("scoring: {e}")),
            }
            result.prediction = Some(prediction);
            result.trace = Some(trace);
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result.wall_ms = started.elapsed().as_millis() as u64;
    result
}

/// Execute one method over a dataset, score every prediction and aggregate.
/// Per-sample failures are logged and the run continues; if more than
/// `failure_threshold` of the samples fail the run is marked failed.
pub fn run_benchmark(dataset: &Dataset, cfg: &RunConfig, p: &Prompter, embedders: &Embedders) -> RunRecord {
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let clock = Instant::now();
    let samples = bounded_map(&dataset.records, cfg.parallelism, |_, s| run_sample(s, cfg, p, embedders));
    let failures: Vec<Failure> = samples
        .iter()
        .filter_map(|s| s.error.as_ref().map(|e| Failure { sample_id: s.sample_id.clone(), error: e.clone() }))
        .collect();
    let scores: Vec<SampleScore> = samples.iter().filter_map(|s| s.score.clone()).collect();
    let meta = AggregateMeta {
        method: cfg.method.to_string(),
        model_id: p.ctx.model_id.clone(),
        dataset_id: dataset.info.id.clone(),
    };
    let report = aggregate(&scores, &meta).ok();
    let total = dataset.records.len();
    let failed = total > 0 && failures.len() as f64 > cfg.failure_threshold * total as f64;
    let status = if failed || report.is_none() { RunStatus::Failed } else { RunStatus::Completed };
    RunRecord {
        run_id: run_id(&dataset.info.hash, &p.ctx.model_id, cfg),
        dataset: dataset.info.clone(),
        method: cfg.method,
        model_id: p.ctx.model_id.clone(),
        ablation: cfg.focus.ablation,
        config: ConfigSnapshot {
            run: cfg.clone(),
            pipeline_version: PIPELINE_VERSION.to_string(),
            prompt_versions: p.catalog.versions(),
        },
        timings: Timings {
            started_at,
            wall_ms: clock.elapsed().as_millis() as u64,
            sample_ms: samples.iter().map(|s| s.wall_ms).collect(),
        },
        samples,
        report,
        failures,
        status,
    }
}

/// Full pipeline plus the two single-stage ablations, in that order.
pub fn run_ablation(dataset: &Dataset, cfg: &RunConfig, p: &Prompter, embedders: &Embedders) -> Vec<(Ablation, RunRecord)> {
    [Ablation::NONE, Ablation::SKIP_MEI, Ablation::SKIP_ERI]
        .into_iter()
        .map(|a| {
            let c = RunConfig { method: Method::Focus, ..cfg.clone() }.with_ablation(a);
            (a, run_benchmark(dataset, &c, p, embedders))
        })
        .collect()
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

/// Persist `record` under `runs_dir/<run_id>/`, replacing an earlier run
/// with the same id. Returns the run directory.
pub fn persist_run(record: &RunRecord, runs_dir: &Path) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(runs_dir)?;
    let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(runs_dir)?;
    let traces = staging.path().join("traces");
    fs::create_dir(&traces)?;
    for (i, s) in record.samples.iter().enumerate() {
        if let Some(t) = &s.trace {
            write_json(&traces.join(format!("{i:04}-{}.json", safe_name(&s.sample_id))), t)?;
        }
    }
    write_json(&staging.path().join("report.json"), &report_document(record))?;
    write_json(&staging.path().join("record.json"), record)?;
    let dest = runs_dir.join(&record.run_id);
    if dest.exists() {
        fs::remove_dir_all(&dest)?;
    }
    let staged = staging.keep();
    fs::rename(&staged, &dest)?;
    Ok(dest)
}

/// Timestamp-free summary written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub run_id: String,
    pub dataset_hash: String,
    pub method: String,
    pub model_id: String,
    pub status: RunStatus,
    pub failures: usize,
    pub report: Option<AggregateReport>,
}

pub fn report_document(record: &RunRecord) -> ReportDocument {
    ReportDocument {
        run_id: record.run_id.clone(),
        dataset_hash: record.dataset.hash.clone(),
        method: record.method_label(),
        model_id: record.model_id.clone(),
        status: record.status,
        failures: record.failures.len(),
        report: record.report.clone(),
    }
}

pub fn load_run(run_dir: &Path) -> Result<RunRecord, HarnessError> {
    let body = fs::read_to_string(run_dir.join("record.json"))?;
    Ok(serde_json::from_str(&body)?)
}

/// Re-score a persisted run's predictions against `dataset`. The dataset
/// must be byte-identical to the one the run used.
pub fn rescore(record: &RunRecord, dataset: &Dataset, embedders: &Embedders) -> Result<AggregateReport, HarnessError> {
    if record.dataset.hash != dataset.info.hash {
        return Err(HarnessError::Mismatch(format!(
            "dataset hash {} differs from the run's {}",
            dataset.info.hash, record.dataset.hash
        )));
    }
    let by_id: BTreeMap<&str, &DatasetRecord> = dataset.records.iter().map(|r| (r.id(), r)).collect();
    let mut scores = Vec::new();
    for s in &record.samples {
        let (Some(pred), Some(sample)) = (&s.prediction, by_id.get(s.sample_id.as_str())) else {
            continue;
        };
        scores.push(score_sample(pred, &sample.references(), embedders).map_err(|e| HarnessError::Mismatch(e.to_string()))?);
    }
    let meta = AggregateMeta {
        method: record.method.to_string(),
        model_id: record.model_id.clone(),
        dataset_id: dataset.info.id.clone(),
    };
    aggregate(&scores, &meta).map_err(|_| HarnessError::Empty)
}

pub const COLUMNS: [&str; 10] =
    ["F1", "Precision", "Recall", "BLEU", "ROUGE-1", "ROUGE-2", "ROUGE-L", "Similarity", "SimCSE", "ACC(%)"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Factual,
    Counterfactual,
    Ablation,
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "factual" => Ok(Layout::Factual),
            "counterfactual" => Ok(Layout::Counterfactual),
            "ablation" => Ok(Layout::Ablation),
            other => Err(format!("unknown layout {other:?}")),
        }
    }
}

/// One table row in machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub method: String,
    pub values: [Option<f64>; 10],
}

impl TableRow {
    pub fn from_report(model: &str, method: &str, r: &AggregateReport) -> Self {
        TableRow {
            model: model.to_string(),
            method: method.to_string(),
            values: [
                Some(r.f1),
                Some(r.precision),
                Some(r.recall),
                Some(r.bleu3),
                Some(r.rouge1),
                Some(r.rouge2),
                Some(r.rouge_l),
                r.similarity,
                r.simcse,
                r.accuracy_pct,
            ],
        }
    }
}

pub fn table_rows(records: &[RunRecord]) -> Vec<TableRow> {
    records
        .iter()
        .map(|rec| match &rec.report {
            Some(r) => TableRow::from_report(&rec.model_id, &rec.method_label(), r),
            None => TableRow { model: rec.model_id.clone(), method: rec.method_label(), values: [None; 10] },
        })
        .collect()
}

/// Plain-text table. Reals use 4 decimals and ACC(%) one; with several
/// rows the best value of each column is wrapped in `*`; missing values
/// render as an em dash.
pub fn render_rows(rows: &[TableRow], layout: Layout) -> Result<String, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Empty);
    }
    let best: Vec<Option<f64>> = (0..COLUMNS.len())
        .map(|c| rows.iter().filter_map(|r| r.values[c]).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))))
        .collect();
    let lead: Vec<&str> = match layout {
        Layout::Ablation => vec!["Variant"],
        _ => vec!["Model", "Method"],
    };
    let mut cells: Vec<Vec<String>> = Vec::new();
    cells.push(lead.iter().map(|s| s.to_string()).chain(COLUMNS.iter().map(|s| s.to_string())).collect());
    for r in rows {
        let mut line: Vec<String> = match layout {
            Layout::Ablation => vec![r.method.clone()],
            _ => vec![r.model.clone(), r.method.clone()],
        };
        for (c, v) in r.values.iter().enumerate() {
            let s = match v {
                None => "—".to_string(),
                Some(x) if c == COLUMNS.len() - 1 => format!("{x:.1}"),
                Some(x) => format!("{x:.4}"),
            };
            let is_best = rows.len() > 1 && v.is_some() && *v == best[c];
            line.push(if is_best { format!("*{s}*") } else { s });
        }
        cells.push(line);
    }
    let widths: Vec<usize> =
        (0..cells[0].len()).map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let parts: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c < lead.len() { format!("{s}{}", " ".repeat(pad)) } else { format!("{}{s}", " ".repeat(pad)) }
            })
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).expect("write to string");
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).expect("write to string");
        }
    }
    Ok(out)
}

pub fn render_table(records: &[RunRecord], layout: Layout) -> Result<String, HarnessError> {
    render_rows(&table_rows(records), layout)
}
