//! Rewrite raw definitions into the three-clause dictionary template and
//! derive the four paraphrased references.
//!
//! Template: `{P} refers to {B}. It is often used {C}. This expression {A}.`

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::bounded_map;
use crate::ingest::RawEntry;
use crate::llmclient::{text_similarity, Embedder, LlmError};
use crate::prompts::{ids, labeled_field, AskError, Exchange, Prompter, PromptError};
use crate::text;

pub const PIPELINE_VERSION: &str = concat!("focus-core/", env!("CARGO_PKG_VERSION"));
pub const VARIANT_COUNT: usize = 4;

static TEMPLATE_SHAPE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^.+ refers to .+\. It is often used .+\. This expression .+\.$").expect("valid regex")
});

pub fn matches_template(text: &str) -> bool {
    TEMPLATE_SHAPE.is_match(text)
}

#[derive(Debug, Error)]
pub enum StandardizeError {
    #[error("template slot {0} is empty")]
    EmptySlot(&'static str),
    #[error("phrase {phrase:?} does not occur in its context")]
    PhraseNotInContext { phrase: String },
    #[error("could not standardize definition: {reason}")]
    Standardization { reason: String, raw_output: String },
    #[error("standardized text drifted from the definition (similarity {similarity:.4} < {floor})")]
    MeaningDrift { similarity: f64, floor: f64 },
    #[error("could not produce {VARIANT_COUNT} distinct variants: {0}")]
    Variant(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl From<AskError> for StandardizeError {
    fn from(e: AskError) -> Self {
        match e {
            AskError::Llm(e) => StandardizeError::Llm(e),
            AskError::Prompt(e) => StandardizeError::Prompt(e),
            AskError::Rejected { reason, last_response, .. } => {
                StandardizeError::Standardization { reason, raw_output: last_response }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub pipeline_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactualRecord {
    pub id: String,
    pub phrase: String,
    pub context: String,
    pub explanation: String,
    pub variants: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub provenance: Provenance,
}

impl FactualRecord {
    /// Explanation followed by the variants.
    pub fn references(&self) -> Vec<String> {
        std::iter::once(self.explanation.clone()).chain(self.variants.iter().cloned()).collect()
    }
}

fn clean_slot(slot: &str, lead: &str) -> String {
    let mut s = text::normalize_ws(slot);
    if s.len() >= lead.len() && s[..lead.len()].eq_ignore_ascii_case(lead) {
        s = s[lead.len()..].trim_start().to_string();
    }
    s.trim_end_matches(|c: char| c == '.' || c.is_whitespace()).to_string()
}

/// Fill the template. Slots are whitespace-normalized, trailing periods are
/// dropped, and a slot that repeats its own lead-in ("It is often used ...")
/// has the lead-in removed.
pub fn render_template(phrase: &str, basic: &str, usage: &str, additional: &str) -> Result<String, StandardizeError> {
    let p = text::normalize_ws(phrase);
    let b = clean_slot(basic, "refers to");
    let c = clean_slot(usage, "it is often used");
    let a = clean_slot(additional, "this expression");
    for (name, v) in [("phrase", &p), ("basic", &b), ("usage", &c), ("additional", &a)] {
        if v.is_empty() {
            return Err(StandardizeError::EmptySlot(name));
        }
    }
    Ok(format!("{p} refers to {b}. It is often used {c}. This expression {a}."))
}

/// Optional check that the rewrite stays close to the raw definition.
#[derive(Clone, Copy)]
pub struct MeaningGate<'a> {
    pub embedder: &'a dyn Embedder,
    pub floor: f64,
}

fn parse_slots(phrase: &str, response: &str) -> Result<String, String> {
    let stops = ["BASIC", "USAGE", "ADDITIONAL"];
    let field = |l: &str| labeled_field(response, l, &stops).ok_or_else(|| format!("missing {l} slot"));
    let (b, c, a) = (field("BASIC")?, field("USAGE")?, field("ADDITIONAL")?);
    render_template(phrase, &b, &c, &a).map_err(|e| e.to_string())
}

/// Standardize one entry's definition. The returned record has no variants
/// yet.
pub fn standardize_explanation(
    entry: &RawEntry,
    p: &Prompter,
    meaning: Option<MeaningGate>,
) -> Result<FactualRecord, StandardizeError> {
    standardize_logged(entry, p, meaning, &mut Vec::new())
}

fn standardize_logged(
    entry: &RawEntry,
    p: &Prompter,
    meaning: Option<MeaningGate>,
    log: &mut Vec<Exchange>,
) -> Result<FactualRecord, StandardizeError> {
    let context = text::normalize_ws(&entry.example);
    if !text::contains_ci(&context, &entry.phrase) {
        return Err(StandardizeError::PhraseNotInContext { phrase: entry.phrase.clone() });
    }
    let vars = [("phrase", entry.phrase.as_str()), ("definition", &entry.definition), ("example", &entry.example)];
    let explanation = p.ask("standardize", ids::STANDARDIZE_SLOTS, &vars, log, |r| parse_slots(&entry.phrase, r))?;
    if let Some(gate) = meaning {
        let similarity = text_similarity(gate.embedder, &explanation, &entry.definition)?;
        if similarity < gate.floor {
            return Err(StandardizeError::MeaningDrift { similarity, floor: gate.floor });
        }
    }
    Ok(FactualRecord {
        id: entry.source_id.clone(),
        phrase: entry.phrase.clone(),
        context,
        explanation,
        variants: Vec::new(),
        category: None,
        provenance: Provenance { source_id: entry.source_id.clone(), pipeline_version: PIPELINE_VERSION.to_string() },
    })
}

fn parse_list(response: &str) -> Vec<String> {
    static MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:\d+[.)]|[-*•])\s*").expect("valid regex"));
    response
        .lines()
        .filter(|l| MARKER.is_match(l))
        .map(|l| text::normalize_ws(&MARKER.replace(l, "")))
        .map(|l| l.trim_matches('"').to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Four paraphrases of `explanation`, each distinct from it and from each
/// other after whitespace normalization and each in template shape.
/// Accepted paraphrases accumulate across rounds; the prompt's retry
/// budget bounds the number of rounds.
pub fn generate_variant_texts(
    phrase: &str,
    explanation: &str,
    p: &Prompter,
    log: &mut Vec<Exchange>,
) -> Result<Vec<String>, StandardizeError> {
    let original = text::normalize_ws(explanation);
    let mut accepted: Vec<String> = Vec::new();
    let mut rejected = 0usize;
    for _ in 0..p.ctx.attempts.max(1) {
        let need = VARIANT_COUNT - accepted.len();
        let avoid = std::iter::once(original.clone()).chain(accepted.iter().cloned()).collect::<Vec<_>>().join("\n");
        let count = need.to_string();
        let vars = [("phrase", phrase), ("explanation", original.as_str()), ("count", &count), ("avoid", &avoid)];
        let req = p.request(ids::STANDARDIZE_VARIANTS, &vars)?;
        let candidates = crate::prompts::ask(p.llm, "variants", &req, 1, log, |r| Ok::<_, String>(parse_list(r)))?;
        for c in candidates {
            if accepted.len() == VARIANT_COUNT {
                break;
            }
            if c != original && !accepted.contains(&c) && matches_template(&c) {
                accepted.push(c);
            } else {
                rejected += 1;
            }
        }
        if accepted.len() == VARIANT_COUNT {
            return Ok(accepted);
        }
    }
    Err(StandardizeError::Variant(format!(
        "{} accepted, {rejected} duplicate or malformed candidate(s)",
        accepted.len()
    )))
}

pub fn generate_variants(record: &FactualRecord, p: &Prompter) -> Result<FactualRecord, StandardizeError> {
    let variants = generate_variant_texts(&record.phrase, &record.explanation, p, &mut Vec::new())?;
    Ok(FactualRecord { variants, ..record.clone() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub id: String,
    pub phrase: String,
    pub reason: String,
}

/// Standardize and expand every entry. Entries that fail are skipped and
/// reported rather than aborting the batch.
pub fn build_factual_dataset(
    entries: &[RawEntry],
    p: &Prompter,
    meaning: Option<MeaningGate>,
    seed: u64,
    parallelism: usize,
) -> (Vec<FactualRecord>, Vec<SkipEntry>) {
    let results = bounded_map(entries, parallelism, |_, e| {
        let p = p.reseeded(text::derive_seed(seed, &e.source_id));
        standardize_explanation(e, &p, meaning).and_then(|r| generate_variants(&r, &p))
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(err) => {
                log::warn!("skipping {:?}: {err}", e.phrase);
                skipped.push(SkipEntry { id: e.source_id.clone(), phrase: e.phrase.clone(), reason: err.to_string() });
            }
        }
    }
    (records, skipped)
}
