//! Scoring of predicted explanations against a five-reference set.
//!
//! The reference that maximizes BLEU-3 against the prediction is chosen
//! first; every other metric is then computed against that single reference.
//! The chosen index is recorded per sample.

pub mod lexical;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llmclient::{text_similarity, Embedder, Embedders, LlmError};
pub use lexical::{bleu3, rouge, token_prf, tokenize, Prf, Rouge};

/// A sample counts as accurate when its SimCSE score strictly exceeds this.
pub const ACCURACY_THRESHOLD: f64 = 0.7;

pub fn is_accurate(simcse: f64) -> bool {
    simcse > ACCURACY_THRESHOLD
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate zero scores")]
    Empty,
    #[error("reference set is empty")]
    NoReferences,
    #[error(transparent)]
    Embedding(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub bleu3: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    /// `None` when the similarity embedder was unavailable.
    pub similarity: Option<f64>,
    pub simcse: Option<f64>,
    pub accurate: Option<bool>,
    pub chosen_reference_index: usize,
}

/// Cosine similarity of the two texts' embeddings.
pub fn cosine_similarity(pred: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64, LlmError> {
    text_similarity(embedder, pred, reference)
}

/// Index of the reference with the highest BLEU-3 against `pred`; ties go
/// to the lowest index.
pub fn best_reference_select<S: AsRef<str>>(pred: &str, references: &[S]) -> Result<usize, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let pred_tokens = tokenize(pred);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, r) in references.iter().enumerate() {
        let s = lexical::bleu3_tokens(&pred_tokens, &tokenize(r.as_ref()));
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

/// Full metric battery for one prediction. Embedding failures leave the
/// embedding fields empty instead of failing the sample.
pub fn score_sample<S: AsRef<str>>(
    pred: &str,
    references: &[S],
    embedders: &Embedders,
) -> Result<SampleScore, MetricsError> {
    let chosen = best_reference_select(pred, references)?;
    let reference = references[chosen].as_ref();
    let p = tokenize(pred);
    let r = tokenize(reference);
    let prf = lexical::token_prf_tokens(&p, &r);
    let rg = lexical::rouge_tokens(&p, &r);
    let similarity = embedding_score(pred, reference, embedders.similarity.as_ref());
    let simcse = embedding_score(pred, reference, embedders.simcse.as_ref());
    Ok(SampleScore {
        f1: prf.f1,
        precision: prf.precision,
        recall: prf.recall,
        bleu3: lexical::bleu3_tokens(&p, &r),
        rouge1: rg.rouge1,
        rouge2: rg.rouge2,
        rouge_l: rg.rouge_l,
        similarity,
        simcse,
        accurate: simcse.map(is_accurate),
        chosen_reference_index: chosen,
    })
}

fn embedding_score(pred: &str, reference: &str, embedder: &dyn Embedder) -> Option<f64> {
    if pred.trim().is_empty() {
        return Some(0.0);
    }
    match cosine_similarity(pred, reference, embedder) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{} unavailable: {e}", embedder.model_id());
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AggregateMeta {
    pub method: String,
    pub model_id: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: String,
    pub model_id: String,
    pub dataset_id: String,
    pub sample_count: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub bleu3: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub similarity: Option<f64>,
    pub simcse: Option<f64>,
    /// Percent of samples with an available SimCSE score that are accurate,
    /// rounded to one decimal.
    pub accuracy_pct: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Arithmetic means over samples. Embedding means cover the samples where
/// the embedding was available.
pub fn aggregate(scores: &[SampleScore], meta: &AggregateMeta) -> Result<AggregateReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let m = |f: fn(&SampleScore) -> f64| mean(scores.iter().map(f)).expect("non-empty");
    let accurate: Vec<bool> = scores.iter().filter_map(|s| s.accurate).collect();
    let accuracy_pct = (!accurate.is_empty()).then(|| {
        let pct = 100.0 * accurate.iter().filter(|a| **a).count() as f64 / accurate.len() as f64;
        (pct * 10.0).round() / 10.0
    });
    Ok(AggregateReport {
        method: meta.method.clone(),
        model_id: meta.model_id.clone(),
        dataset_id: meta.dataset_id.clone(),
        sample_count: scores.len(),
        f1: m(|s| s.f1),
        precision: m(|s| s.precision),
        recall: m(|s| s.recall),
        bleu3: m(|s| s.bleu3),
        rouge1: m(|s| s.rouge1),
        rouge2: m(|s| s.rouge2),
        rouge_l: m(|s| s.rouge_l),
        similarity: mean(scores.iter().filter_map(|s| s.similarity)),
        simcse: mean(scores.iter().filter_map(|s| s.simcse)),
        accuracy_pct,
    })
}
