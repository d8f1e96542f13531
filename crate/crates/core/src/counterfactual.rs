//! Counterfactual records: same phrase, explanation entities swapped for
//! divergent ones, and a freshly generated context.
//!
//! Entities are exact substrings of the source text so every substitution
//! can be checked mechanically.

use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::bounded_map;
use crate::llmclient::{text_similarity, Embedder, LlmError};
use crate::prompts::{ids, labeled_field, AskError, Exchange, Prompter, PromptError};
use crate::standardize::{generate_variant_texts, matches_template, FactualRecord, Provenance, SkipEntry, StandardizeError};
use crate::text;

pub const DEFAULT_DIVERGENCE_CEILING: f64 = 0.5;
pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 120;

#[derive(Debug, Error)]
pub enum CounterfactualError {
    #[error("no replaceable entities")]
    NoEntities,
    #[error("entity extraction failed: {0}")]
    Extraction(String),
    #[error("entity replacement failed: {0}")]
    Replacement(String),
    #[error("context construction failed: {0}")]
    Context(String),
    #[error(transparent)]
    Variants(#[from] StandardizeError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn from_ask(e: AskError, wrap: fn(String) -> CounterfactualError) -> CounterfactualError {
    match e {
        AskError::Llm(e) => CounterfactualError::Llm(e),
        AskError::Prompt(e) => CounterfactualError::Prompt(e),
        AskError::Rejected { attempts, reason, .. } => wrap(format!("{reason} (after {attempts} attempt(s))")),
    }
}

/// An entity as a character span of its source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMapping {
    pub original: String,
    pub replacement: String,
}

fn overlaps_protected(entity: &str, protected: Option<&str>) -> bool {
    protected.is_some_and(|p| text::contains_ci(entity, p) || text::contains_ci(p, entity))
}

fn parse_entities(source: &str, response: &str, protected: Option<&str>) -> Result<Vec<EntitySpan>, String> {
    let field = labeled_field(response, "ENTITIES", &[]).unwrap_or_default();
    if field.eq_ignore_ascii_case("none") || field.eq_ignore_ascii_case("none.") {
        return Ok(Vec::new());
    }
    let header = response
        .lines()
        .position(|l| l.trim().trim_start_matches('*').to_ascii_uppercase().starts_with("ENTITIES"))
        .ok_or("missing ENTITIES field")?;
    let mut out: Vec<EntitySpan> = Vec::new();
    for line in response.lines().skip(header + 1) {
        let Some(item) = line.trim().strip_prefix(['-', '*', '•']) else {
            continue;
        };
        let item = item.trim().trim_matches('"');
        if item.is_empty() || overlaps_protected(item, protected) || out.iter().any(|e| e.text == item) {
            continue;
        }
        let byte = source.find(item).ok_or_else(|| format!("entity {item:?} is not a substring of the text"))?;
        let start = text::char_offset(source, byte);
        out.push(EntitySpan { text: item.to_string(), start, end: start + item.chars().count() });
    }
    Ok(out)
}

/// Content-bearing entities of `source`, as exact substrings with character
/// offsets. Entities overlapping `protected` (the phrase or mask) are
/// dropped. A proposal that is not a substring triggers a retry.
pub fn extract_entities(
    source: &str,
    protected: Option<&str>,
    p: &Prompter,
    log: &mut Vec<Exchange>,
) -> Result<Vec<EntitySpan>, CounterfactualError> {
    if source.trim().is_empty() {
        return Err(CounterfactualError::Extraction("empty text".into()));
    }
    p.ask("entities", ids::CF_ENTITIES, &[("text", source)], log, |r| parse_entities(source, r, protected))
        .map_err(|e| from_ask(e, CounterfactualError::Extraction))
}

/// Replace every occurrence of each original in one pass, longest first.
pub fn apply_entity_map(source: &str, map: &[EntityMapping]) -> String {
    if map.is_empty() {
        return source.to_string();
    }
    let mut originals: Vec<&str> = map.iter().map(|m| m.original.as_str()).collect();
    originals.sort_by_key(|o| std::cmp::Reverse(o.len()));
    let pattern = originals.iter().map(|o| regex::escape(o)).collect::<Vec<_>>().join("|");
    let re = Regex::new(&pattern).expect("escaped alternation is a valid regex");
    let lookup: HashMap<&str, &str> = map.iter().map(|m| (m.original.as_str(), m.replacement.as_str())).collect();
    re.replace_all(source, |c: &regex::Captures| lookup[&c[0]].to_string()).into_owned()
}

fn parse_replacements(
    entities: &[EntitySpan],
    response: &str,
    divergence: Option<(&dyn Embedder, f64)>,
) -> Result<Vec<EntityMapping>, String> {
    let proposed: HashMap<String, String> = response
        .lines()
        .filter_map(|l| l.split_once("=>"))
        .map(|(a, b)| {
            let clean = |s: &str| s.trim().trim_start_matches(['-', '*']).trim().trim_matches('"').to_string();
            (clean(a), clean(b))
        })
        .collect();
    let mut map = Vec::with_capacity(entities.len());
    for e in entities {
        let repl = proposed.get(&e.text).ok_or_else(|| format!("no replacement for {:?}", e.text))?;
        if repl.is_empty() {
            return Err(format!("empty replacement for {:?}", e.text));
        }
        if let Some(orig) = entities.iter().find(|o| repl.contains(&o.text)) {
            return Err(format!("replacement {repl:?} still contains original {:?}", orig.text));
        }
        if text::normalize_ws(repl).eq_ignore_ascii_case(&text::normalize_ws(&e.text)) {
            return Err(format!("replacement for {:?} equals the original", e.text));
        }
        if let Some((emb, ceiling)) = divergence {
            let sim = text_similarity(emb, &e.text, repl).map_err(|err| err.to_string())?;
            if sim >= ceiling {
                return Err(format!("{repl:?} too close to {:?} (similarity {sim:.3})", e.text));
            }
        }
        map.push(EntityMapping { original: e.text.clone(), replacement: repl.clone() });
    }
    Ok(map)
}

/// Swap every entity for a conceptually divergent one. Returns the
/// rewritten text and the mapping applied.
pub fn replace_entities(
    source: &str,
    entities: &[EntitySpan],
    p: &Prompter,
    divergence: Option<(&dyn Embedder, f64)>,
    log: &mut Vec<Exchange>,
) -> Result<(String, Vec<EntityMapping>), CounterfactualError> {
    if entities.is_empty() {
        return Err(CounterfactualError::NoEntities);
    }
    let listed = entities.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join("\n");
    let keep_shape = matches_template(source);
    p.ask("replace", ids::CF_REPLACE, &[("text", source), ("entities", &listed)], log, |r| {
        let map = parse_replacements(entities, r, divergence)?;
        let rewritten = apply_entity_map(source, &map);
        if rewritten == source {
            return Err("rewrite left the text unchanged".into());
        }
        if keep_shape && !matches_template(&rewritten) {
            return Err("rewrite broke the template shape".into());
        }
        Ok((rewritten, map))
    })
    .map_err(|e| from_ask(e, CounterfactualError::Replacement))
}

/// A short context that uses the phrase verbatim, consistent with the
/// rewritten explanation.
pub fn construct_context(
    phrase: &str,
    explanation: &str,
    p: &Prompter,
    max_tokens: usize,
    log: &mut Vec<Exchange>,
) -> Result<String, CounterfactualError> {
    let limit = max_tokens.to_string();
    let vars = [("phrase", phrase), ("explanation", explanation), ("max_tokens", &limit)];
    p.ask("context", ids::CF_CONTEXT, &vars, log, |r| {
        let ctx = labeled_field(r, "CONTEXT", &[]).ok_or("missing CONTEXT field")?;
        let ctx = ctx.trim_matches('"').to_string();
        if !ctx.contains(phrase) {
            return Err(format!("context does not contain {phrase:?}"));
        }
        let n = text::word_count(&ctx);
        if n > max_tokens {
            return Err(format!("context has {n} tokens, limit {max_tokens}"));
        }
        Ok(ctx)
    })
    .map_err(|e| from_ask(e, CounterfactualError::Context))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub id: String,
    pub phrase: String,
    pub context: String,
    pub explanation: String,
    pub variants: Vec<String>,
    pub entity_map: Vec<EntityMapping>,
    pub parent_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub provenance: Provenance,
}

impl CounterfactualRecord {
    pub fn references(&self) -> Vec<String> {
        std::iter::once(self.explanation.clone()).chain(self.variants.iter().cloned()).collect()
    }

    /// Phrase kept, explanation changed, every replacement present and no
    /// original left.
    pub fn check_against(&self, parent: &FactualRecord) -> Result<(), String> {
        if self.phrase != parent.phrase {
            return Err("phrase differs from parent".into());
        }
        if self.explanation == parent.explanation {
            return Err("explanation unchanged".into());
        }
        for m in &self.entity_map {
            if !parent.explanation.contains(&m.original) {
                return Err(format!("{:?} not in parent explanation", m.original));
            }
            if !self.explanation.contains(&m.replacement) {
                return Err(format!("{:?} missing from explanation", m.replacement));
            }
            if self.explanation.contains(&m.original) {
                return Err(format!("original {:?} still present", m.original));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct CounterfactualOptions<'a> {
    pub divergence: Option<(&'a dyn Embedder, f64)>,
    pub max_context_tokens: usize,
    pub parallelism: usize,
}

impl Default for CounterfactualOptions<'_> {
    fn default() -> Self {
        CounterfactualOptions { divergence: None, max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS, parallelism: 4 }
    }
}

pub fn counterfactual_for(
    record: &FactualRecord,
    p: &Prompter,
    opts: &CounterfactualOptions,
) -> Result<CounterfactualRecord, CounterfactualError> {
    let mut log = Vec::new();
    let entities = extract_entities(&record.explanation, Some(&record.phrase), p, &mut log)?;
    if entities.is_empty() {
        return Err(CounterfactualError::NoEntities);
    }
    let (explanation, entity_map) = replace_entities(&record.explanation, &entities, p, opts.divergence, &mut log)?;
    let context = construct_context(&record.phrase, &explanation, p, opts.max_context_tokens, &mut log)?;
    let variants = generate_variant_texts(&record.phrase, &explanation, p, &mut log)?;
    let cf = CounterfactualRecord {
        id: format!("{}-cf", record.id),
        phrase: record.phrase.clone(),
        context,
        explanation,
        variants,
        entity_map,
        parent_id: record.id.clone(),
        category: record.category.clone(),
        provenance: record.provenance.clone(),
    };
    cf.check_against(record).map_err(CounterfactualError::Replacement)?;
    Ok(cf)
}

/// One counterfactual per factual record. Failures, including records with
/// no entities, go to the skip log and the rest of the batch continues.
pub fn build_counterfactual_dataset(
    factual: &[FactualRecord],
    p: &Prompter,
    opts: &CounterfactualOptions,
    seed: u64,
) -> (Vec<CounterfactualRecord>, Vec<SkipEntry>) {
    let results = bounded_map(factual, opts.parallelism, |_, r| {
        counterfactual_for(r, &p.reseeded(text::derive_seed(seed, &r.id)), opts)
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (r, out) in factual.iter().zip(results) {
        match out {
            Ok(cf) => records.push(cf),
            Err(e) => {
                log::warn!("no counterfactual for {:?}: {e}", r.phrase);
                skipped.push(SkipEntry { id: r.id.clone(), phrase: r.phrase.clone(), reason: e.to_string() });
            }
        }
    }
    (records, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{HashEmbedder, RecordingBackend, Reply, ScriptedBackend, SyntheticBackend};
    use crate::prompts::{CallContext, PromptCatalog};

    const WINTER: &str = "The Winter Arc refers to a time when people deal with the cold and hard parts of winter. It is often used to talk about staying strong. This expression suggests toughness.";

    fn with<'a>(llm: &'a dyn crate::llmclient::ChatBackend, cat: &'a PromptCatalog) -> Prompter<'a> {
        Prompter::new(llm, cat, CallContext::new("m"))
    }

    #[test]
    fn scripted_extraction_with_offsets() {
        let llm = ScriptedBackend::new().rule("", "ENTITIES:\n- winter\n- cold and hard parts");
        let cat = PromptCatalog::builtin();
        let spans = extract_entities(WINTER, None, &with(&llm, &cat), &mut Vec::new()).unwrap();
        let texts: Vec<&str> = spans.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["winter", "cold and hard parts"]);
        for s in &spans {
            let got: String = WINTER.chars().skip(s.start).take(s.end - s.start).collect();
            assert_eq!(got, s.text);
        }
    }

    #[test]
    fn none_means_empty() {
        let llm = ScriptedBackend::new().rule("", "ENTITIES: NONE");
        let cat = PromptCatalog::builtin();
        assert!(extract_entities(WINTER, None, &with(&llm, &cat), &mut Vec::new()).unwrap().is_empty());
    }

    #[test]
    fn absent_span_retried_then_error() {
        let llm = RecordingBackend::new(ScriptedBackend::new().rule("", "ENTITIES:\n- summer holidays"));
        let cat = PromptCatalog::builtin();
        let r = extract_entities(WINTER, None, &with(&llm, &cat), &mut Vec::new());
        assert!(matches!(r, Err(CounterfactualError::Extraction(_))));
        assert_eq!(llm.call_count(), 2);
    }

    #[test]
    fn protected_phrase_entities_dropped() {
        let llm = ScriptedBackend::new().rule("", "ENTITIES:\n- The Winter Arc\n- Winter\n- cold and hard parts");
        let cat = PromptCatalog::builtin();
        let spans = extract_entities(WINTER, Some("The Winter Arc"), &with(&llm, &cat), &mut Vec::new()).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "cold and hard parts");
    }

    fn span(t: &str) -> EntitySpan {
        let b = WINTER.find(t).unwrap();
        EntitySpan { text: t.into(), start: b, end: b + t.len() }
    }

    #[test]
    fn substitution_and_map() {
        let llm = ScriptedBackend::new().rule("", "winter => tax season");
        let cat = PromptCatalog::builtin();
        let (y, map) = replace_entities(WINTER, &[span("winter")], &with(&llm, &cat), None, &mut Vec::new()).unwrap();
        assert_eq!(y, WINTER.replace("winter", "tax season"));
        assert_eq!(map, [EntityMapping { original: "winter".into(), replacement: "tax season".into() }]);
    }

    #[test]
    fn empty_entity_list_rejected() {
        let llm = SyntheticBackend::new();
        let cat = PromptCatalog::builtin();
        assert!(matches!(
            replace_entities(WINTER, &[], &with(&llm, &cat), None, &mut Vec::new()),
            Err(CounterfactualError::NoEntities)
        ));
    }

    #[test]
    fn echoed_original_fails_after_budget() {
        let llm = RecordingBackend::new(ScriptedBackend::new().rule("", "winter => winter"));
        let cat = PromptCatalog::builtin();
        let r = replace_entities(WINTER, &[span("winter")], &with(&llm, &cat), None, &mut Vec::new());
        assert!(matches!(r, Err(CounterfactualError::Replacement(_))));
        assert_eq!(llm.call_count(), 2);
    }

    #[test]
    fn divergence_ceiling_applies() {
        let llm = ScriptedBackend::new().rule("", "winter => tax season");
        let cat = PromptCatalog::builtin();
        let emb = HashEmbedder::new("h");
        // Hash vectors of unrelated strings are nearly orthogonal.
        let ok = replace_entities(WINTER, &[span("winter")], &with(&llm, &cat), Some((&emb, 0.5)), &mut Vec::new());
        assert!(ok.is_ok());
        let strict = replace_entities(WINTER, &[span("winter")], &with(&llm, &cat), Some((&emb, -1.0)), &mut Vec::new());
        assert!(strict.is_err());
    }

    #[test]
    fn one_pass_replacement_does_not_cascade() {
        let map = vec![
            EntityMapping { original: "a".into(), replacement: "b".into() },
            EntityMapping { original: "b".into(), replacement: "c".into() },
        ];
        assert_eq!(apply_entity_map("a b", &map), "b c");
    }

    #[test]
    fn context_retries_until_phrase_present() {
        let llm = ScriptedBackend::new().rule_sequence(
            "",
            vec![Reply::Text("CONTEXT: no phrase here".into()), Reply::Text("CONTEXT: my rizz is unmatched".into())],
        );
        let cat = PromptCatalog::builtin();
        assert_eq!(construct_context("rizz", "x", &with(&llm, &cat), 120, &mut Vec::new()).unwrap(), "my rizz is unmatched");
    }

    #[test]
    fn overlong_context_rejected() {
        let long = format!("CONTEXT: rizz {}", "word ".repeat(400));
        let llm = ScriptedBackend::new().rule("", &long);
        let cat = PromptCatalog::builtin();
        assert!(matches!(
            construct_context("rizz", "x", &with(&llm, &cat), 120, &mut Vec::new()),
            Err(CounterfactualError::Context(_))
        ));
    }
}
