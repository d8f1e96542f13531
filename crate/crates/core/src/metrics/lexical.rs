//! Token-level metrics: tokenizer, bag-of-tokens P/R/F1, BLEU-3, ROUGE.
//!
//! All functions share [`tokenize`] and return 0 for empty operands.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;

/// Highest n-gram order used by [`bleu3`].
pub const BLEU_MAX_ORDER: usize = 3;
/// Substitute match count for a zero higher-order n-gram precision.
pub const BLEU_EPSILON: f64 = 1e-9;

static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\p{P}$").unwrap());

fn is_punct(c: char) -> bool {
    if c.is_ascii() {
        // ASCII members of \p{P}; `$+<=>^`|~` are symbols, not punctuation.
        return matches!(c, '!'..='#' | '%'..='*' | ','..='/' | ':' | ';' | '?' | '@' | '['..=']' | '_' | '{' | '}');
    }
    let mut buf = [0u8; 4];
    PUNCT.is_match(c.encode_utf8(&mut buf))
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercase, drop Unicode punctuation (apostrophes between two
/// alphanumerics are kept), split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let chars: Vec<char> = raw.to_lowercase().chars().collect();
        let mut tok = String::with_capacity(raw.len());
        for (i, &c) in chars.iter().enumerate() {
            if !is_punct(c) {
                tok.push(c);
                continue;
            }
            let internal = i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if is_apostrophe(c) && internal {
                tok.push(c);
            }
        }
        if !tok.is_empty() {
            out.push(tok);
        }
    }
    out
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n == 0 || tokens.len() < n {
        return m;
    }
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram matches and the n-gram totals of both sides.
fn ngram_overlap(pred: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let p = counts(pred, n);
    let r = counts(reference, n);
    let matches = p.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, pred.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn token_prf_tokens(pred: &[String], reference: &[String]) -> Prf {
    if pred.is_empty() || reference.is_empty() {
        return Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let (overlap, np, nr) = ngram_overlap(pred, reference, 1);
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / nr as f64;
    Prf { precision, recall, f1: f_measure(precision, recall) }
}

/// Multiset token overlap precision, recall and F1.
pub fn token_prf(pred: &str, reference: &str) -> Prf {
    token_prf_tokens(&tokenize(pred), &tokenize(reference))
}

pub fn bleu3_tokens(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let orders = BLEU_MAX_ORDER.min(pred.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (matches, total, _) = ngram_overlap(pred, reference, n);
        let p = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            BLEU_EPSILON / total as f64
        };
        log_sum += p.ln();
    }
    let c = pred.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / orders as f64).exp()
}

/// Sentence BLEU with orders 1..=3, uniform weights, brevity penalty, and
/// epsilon smoothing of zero higher-order matches. Predictions shorter than
/// three tokens are scored on the orders they have.
pub fn bleu3(pred: &str, reference: &str) -> f64 {
    bleu3_tokens(&tokenize(pred), &tokenize(reference))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rouge {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

fn rouge_n(pred: &[String], reference: &[String], n: usize) -> f64 {
    let (matches, np, nr) = ngram_overlap(pred, reference, n);
    if np == 0 && nr == 0 {
        // Both sides too short to have any n-gram of this order.
        return if pred == reference { 1.0 } else { 0.0 };
    }
    if np == 0 || nr == 0 {
        return 0.0;
    }
    f_measure(matches as f64 / np as f64, matches as f64 / nr as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_tokens(pred: &[String], reference: &[String]) -> Rouge {
    if pred.is_empty() || reference.is_empty() {
        return Rouge { rouge1: 0.0, rouge2: 0.0, rouge_l: 0.0 };
    }
    let lcs = lcs_len(pred, reference) as f64;
    Rouge {
        rouge1: rouge_n(pred, reference, 1),
        rouge2: rouge_n(pred, reference, 2),
        rouge_l: f_measure(lcs / pred.len() as f64, lcs / reference.len() as f64),
    }
}

/// ROUGE-1/2 n-gram F-measures and ROUGE-L (LCS) F-measure.
pub fn rouge(pred: &str, reference: &str) -> Rouge {
    rouge_tokens(&tokenize(pred), &tokenize(reference))
}
