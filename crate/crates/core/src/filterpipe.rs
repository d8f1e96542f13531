//! The four-stage filtering funnel: temporal, vote ratio, content, novelty.
//!
//! Cheap deterministic stages run first so the LLM-backed novelty stage only
//! sees survivors. Every input entry gets exactly one verdict in the report.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RawEntry;
use crate::llmclient::{text_similarity, Embedder, LlmError};
use crate::metrics::ACCURACY_THRESHOLD;
use crate::prompts::{ids, labeled_field, AskError, Prompter};
use crate::text;

const FILLER: &str = include_str!("../assets/haystack.txt");

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("filter configuration: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Ask(#[from] AskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoveltyMode {
    #[default]
    Off,
    LlmProbe,
    NeedleTest,
    Both,
}

impl FromStr for NoveltyMode {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "off" | "none" => Ok(NoveltyMode::Off),
            "llm-probe" | "probe" => Ok(NoveltyMode::LlmProbe),
            "needle-test" | "needle" => Ok(NoveltyMode::NeedleTest),
            "both" => Ok(NoveltyMode::Both),
            other => Err(FilterError::Config(format!("unknown novelty mode {other:?}"))),
        }
    }
}

impl fmt::Display for NoveltyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoveltyMode::Off => "off",
            NoveltyMode::LlmProbe => "llm-probe",
            NoveltyMode::NeedleTest => "needle-test",
            NoveltyMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub cutoff_date: NaiveDate,
    pub downvote_ratio_max: f64,
    pub blocklist_path: Option<PathBuf>,
    /// Second content pass through the moderation prompt.
    pub moderation: bool,
    pub novelty_mode: NoveltyMode,
    /// Similarity above which the probe's definition counts as known.
    pub novelty_threshold: f64,
    pub haystack_length: usize,
    pub haystack_corpus: Option<PathBuf>,
    pub needle_repeats: u32,
    pub fuzzy_match_max_edits: usize,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            cutoff_date: NaiveDate::from_ymd_opt(2022, 1, 31).expect("valid date"),
            downvote_ratio_max: 0.8,
            blocklist_path: None,
            moderation: false,
            novelty_mode: NoveltyMode::Off,
            novelty_threshold: ACCURACY_THRESHOLD,
            haystack_length: 1000,
            haystack_corpus: None,
            needle_repeats: 3,
            fuzzy_match_max_edits: 3,
            parallelism: 4,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.downvote_ratio_max) {
            return bad("downvote_ratio_max must be within [0, 1]");
        }
        if self.needle_repeats == 0 {
            return bad("needle_repeats must be at least 1");
        }
        if self.haystack_length == 0 {
            return bad("haystack_length must be positive");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        Ok(())
    }
}

/// Outcome of a single per-entry check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Drop(String),
}

impl Decision {
    pub fn is_keep(&self) -> bool {
        matches!(self, Decision::Keep)
    }
}

pub fn passes_cutoff(entry: &RawEntry, cutoff: NaiveDate) -> bool {
    entry.added_date > cutoff
}

/// Entries added strictly after `cutoff`, order preserved.
pub fn temporal_filter(entries: Vec<RawEntry>, cutoff: NaiveDate) -> Vec<RawEntry> {
    entries.into_iter().filter(|e| passes_cutoff(e, cutoff)).collect()
}

pub fn downvote_ratio(entry: &RawEntry) -> Option<f64> {
    let total = entry.total_votes();
    (total > 0).then(|| entry.downvotes as f64 / total as f64)
}

/// Drop when the downvote fraction is strictly above `ratio_max`. Unrated
/// entries are kept.
pub fn vote_filter(entry: &RawEntry, ratio_max: f64) -> Decision {
    match downvote_ratio(entry) {
        Some(r) if r > ratio_max => Decision::Drop(format!("downvote ratio {r:.4} > {ratio_max}")),
        _ => Decision::Keep,
    }
}

/// Case-insensitive whole-word term list, one term per line. Blank lines
/// and lines starting with `#` are ignored.
#[derive(Debug, Clone, Default)]
pub struct Blocklist {
    terms: Vec<(String, Regex)>,
}

impl Blocklist {
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let terms = terms
            .into_iter()
            .map(|t| t.as_ref().trim().to_string())
            .filter(|t| !t.is_empty() && !t.starts_with('#'))
            .map(|t| {
                let re = Regex::new(&format!(r"(?i)(?:^|\W){}(?:\W|$)", regex::escape(&t)))
                    .expect("escaped term is a valid regex");
                (t, re)
            })
            .collect();
        Blocklist { terms }
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let body = fs::read_to_string(path)
            .map_err(|e| FilterError::Config(format!("blocklist {}: {e}", path.display())))?;
        Ok(Self::from_terms(body.lines()))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// First blocklisted term found in `text`.
    pub fn find(&self, text: &str) -> Option<&str> {
        self.terms.iter().find(|(_, re)| re.is_match(text)).map(|(t, _)| t.as_str())
    }
}

/// Blocklist check over phrase, definition and example, then the optional
/// moderation prompt.
pub fn content_filter(
    entry: &RawEntry,
    blocklist: &Blocklist,
    moderator: Option<&Prompter>,
) -> Result<Decision, FilterError> {
    for field in [&entry.phrase, &entry.definition, &entry.example] {
        if let Some(term) = blocklist.find(field) {
            return Ok(Decision::Drop(format!("blocklist:{term}")));
        }
    }
    let Some(p) = moderator else {
        return Ok(Decision::Keep);
    };
    let vars = [("phrase", entry.phrase.as_str()), ("definition", &entry.definition), ("example", &entry.example)];
    let safe = p.ask("moderation", ids::MODERATION, &vars, &mut Vec::new(), |r| {
        match labeled_field(r, "VERDICT", &[]).map(|v| v.to_ascii_uppercase()) {
            Some(v) if v.starts_with("SAFE") => Ok(true),
            Some(v) if v.starts_with("UNSAFE") => Ok(false),
            _ => Err("no SAFE/UNSAFE verdict".to_string()),
        }
    })?;
    Ok(if safe { Decision::Keep } else { Decision::Drop("moderation".to_string()) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Novelty {
    Known,
    Novel,
}

/// Ask the model to define the phrase cold. A definition whose similarity
/// to the gold definition exceeds `threshold` marks the phrase as known.
pub fn novelty_probe(
    phrase: &str,
    definition: &str,
    p: &Prompter,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<Novelty, FilterError> {
    let req = p.request(ids::NOVELTY_DEFINE, &[("phrase", phrase)]).map_err(AskError::from)?;
    let answer = match p.llm.complete(&req) {
        Ok(r) => r.content,
        Err(LlmError::Content(_)) => return Ok(Novelty::Novel),
        Err(e) => return Err(e.into()),
    };
    let answer = answer.trim();
    if answer.is_empty() || answer.to_lowercase().contains("not familiar with this term") {
        return Ok(Novelty::Novel);
    }
    let sim = text_similarity(embedder, answer, definition)?;
    log::debug!("novelty probe {phrase:?}: similarity {sim:.4}");
    Ok(if sim > threshold { Novelty::Known } else { Novelty::Novel })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeedleVerdict {
    Found,
    NotFound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleParams {
    pub haystack_length: usize,
    pub repeats: u32,
    pub max_edits: usize,
}

impl From<&FilterConfig> for NeedleParams {
    fn from(c: &FilterConfig) -> Self {
        NeedleParams { haystack_length: c.haystack_length, repeats: c.needle_repeats, max_edits: c.fuzzy_match_max_edits }
    }
}

/// Filler text of at least `min_tokens` whitespace tokens.
pub fn default_corpus(min_tokens: usize) -> String {
    let unit = text::normalize_ws(FILLER);
    let per = text::word_count(&unit).max(1);
    let copies = min_tokens.div_ceil(per).max(1);
    vec![unit; copies].join(" ")
}

/// Window of `params.haystack_length` corpus tokens with `carrier` inserted
/// at `depth_fraction` of the way through.
pub fn build_haystack(carrier: &str, corpus: &str, depth_fraction: f64, haystack_length: usize, seed: u64) -> String {
    let tokens: Vec<&str> = corpus.split_whitespace().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=tokens.len() - haystack_length);
    let window = &tokens[start..start + haystack_length];
    let at = ((depth_fraction * haystack_length as f64).round() as usize).min(haystack_length);
    let mut out: Vec<&str> = window[..at].to_vec();
    out.push(carrier);
    out.extend_from_slice(&window[at..]);
    out.join(" ")
}

/// Insert the carrier sentence into a haystack and ask the model to quote
/// the sentence matching `description`. Found only if every repeat (each
/// with its own derived seed) returns the carrier within `max_edits` edits.
#[allow(clippy::too_many_arguments)]
pub fn needle_test(
    phrase: &str,
    carrier: &str,
    description: &str,
    corpus: &str,
    depth_fraction: f64,
    params: &NeedleParams,
    p: &Prompter,
    rng_seed: u64,
) -> Result<NeedleVerdict, FilterError> {
    let corpus_len = text::word_count(corpus);
    if corpus_len < params.haystack_length {
        return Err(FilterError::Precondition(format!(
            "corpus has {corpus_len} tokens, haystack needs {}",
            params.haystack_length
        )));
    }
    if !(0.0..=1.0).contains(&depth_fraction) {
        return Err(FilterError::Precondition(format!("depth fraction {depth_fraction} outside [0, 1]")));
    }
    let target = carrier.to_lowercase();
    for r in 0..params.repeats.max(1) {
        let seed = text::derive_seed(rng_seed, &format!("needle:{r}"));
        let haystack = build_haystack(carrier, corpus, depth_fraction, params.haystack_length, seed);
        let req = p
            .reseeded(seed)
            .request(ids::NOVELTY_NEEDLE, &[("description", description), ("haystack", &haystack)])
            .map_err(AskError::from)?;
        let answer = p.llm.complete(&req)?.content.to_lowercase();
        let dist = text::min_substring_distance(&target, &answer);
        log::debug!("needle {phrase:?} repeat {r}: distance {dist}");
        if dist > params.max_edits {
            return Ok(NeedleVerdict::NotFound);
        }
    }
    Ok(NeedleVerdict::Found)
}

/// Sentence used as the needle for an entry: its example, or a synthetic
/// usage when the entry has none.
pub fn carrier_sentence(entry: &RawEntry) -> String {
    let ex = text::normalize_ws(&entry.example);
    if ex.is_empty() {
        format!("Everyone kept saying {} all week.", entry.phrase)
    } else {
        ex
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Temporal,
    Vote,
    Content,
    Novelty,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Temporal => "temporal",
            Stage::Vote => "vote",
            Stage::Content => "content",
            Stage::Novelty => "novelty",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    pub phrase: String,
    /// Stage that removed the entry; `None` when kept.
    pub removed_by: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub temporal: usize,
    pub vote: usize,
    pub content: usize,
    pub novelty: usize,
}

impl StageCounts {
    pub fn total(&self) -> usize {
        self.temporal + self.vote + self.content + self.novelty
    }

    fn bump(&mut self, stage: Stage) {
        match stage {
            Stage::Temporal => self.temporal += 1,
            Stage::Vote => self.vote += 1,
            Stage::Content => self.content += 1,
            Stage::Novelty => self.novelty += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub removed: StageCounts,
    pub output_count: usize,
    pub novelty_mode: NoveltyMode,
    pub verdicts: Vec<Verdict>,
}

impl FilterReport {
    pub fn is_conserved(&self) -> bool {
        self.input_count == self.output_count + self.removed.total() && self.verdicts.len() == self.input_count
    }

    pub fn removal_reasons(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for v in &self.verdicts {
            if let Some(r) = &v.reason {
                let key = r.split(':').next().unwrap_or(r).to_string();
                *m.entry(key).or_insert(0) += 1;
            }
        }
        m
    }
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8}", "stage", "removed", "left")?;
        let mut left = self.input_count;
        writeln!(f, "{:<10} {:>8} {:>8}", "input", "", left)?;
        for (name, n) in [
            ("temporal", self.removed.temporal),
            ("vote", self.removed.vote),
            ("content", self.removed.content),
            ("novelty", self.removed.novelty),
        ] {
            left -= n;
            writeln!(f, "{:<10} {:>8} {:>8}", name, n, left)?;
        }
        write!(f, "{:<10} {:>8} {:>8}", "output", "", self.output_count)
    }
}

/// Services the LLM-backed stages need. Only consulted when moderation or a
/// novelty mode is enabled.
pub struct FilterServices<'a> {
    pub prompter: Prompter<'a>,
    pub embedder: &'a dyn Embedder,
}

fn novelty_check(
    entry: &RawEntry,
    config: &FilterConfig,
    services: &FilterServices,
    corpus: &str,
) -> Result<Decision, FilterError> {
    let seed = text::derive_seed(config.seed, &entry.source_id);
    let p = services.prompter.reseeded(seed);
    let mode = config.novelty_mode;
    if matches!(mode, NoveltyMode::LlmProbe | NoveltyMode::Both)
        && novelty_probe(&entry.phrase, &entry.definition, &p, services.embedder, config.novelty_threshold)?
            == Novelty::Known
    {
        return Ok(Decision::Drop("probe:known".to_string()));
    }
    if matches!(mode, NoveltyMode::NeedleTest | NoveltyMode::Both) {
        let depth = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..=1.0);
        let verdict = needle_test(
            &entry.phrase,
            &carrier_sentence(entry),
            &entry.definition,
            corpus,
            depth,
            &NeedleParams::from(config),
            &p,
            seed,
        )?;
        if verdict == NeedleVerdict::Found {
            return Ok(Decision::Drop("needle:found".to_string()));
        }
    }
    Ok(Decision::Keep)
}

fn apply_stage<F>(
    pool: &rayon::ThreadPool,
    entries: Vec<RawEntry>,
    stage: Stage,
    report: &mut FilterReport,
    check: F,
) -> Result<Vec<RawEntry>, FilterError>
where
    F: Fn(&RawEntry) -> Result<Decision, FilterError> + Sync,
{
    let decisions: Vec<Decision> =
        pool.install(|| entries.par_iter().map(&check).collect::<Result<Vec<_>, _>>())?;
    let mut kept = Vec::with_capacity(entries.len());
    for (entry, d) in entries.into_iter().zip(decisions) {
        match d {
            Decision::Keep => kept.push(entry),
            Decision::Drop(reason) => {
                report.removed.bump(stage);
                report.verdicts.push(Verdict {
                    id: entry.source_id,
                    phrase: entry.phrase,
                    removed_by: Some(stage),
                    reason: Some(reason),
                });
            }
        }
    }
    Ok(kept)
}

/// Run temporal, vote, content and novelty stages in that order. The
/// configuration, blocklist and haystack corpus are all resolved before any
/// entry is touched.
pub fn run_filter_pipeline(
    entries: Vec<RawEntry>,
    config: &FilterConfig,
    services: Option<&FilterServices>,
) -> Result<(Vec<RawEntry>, FilterReport), FilterError> {
    config.validate()?;
    let blocklist = match &config.blocklist_path {
        Some(p) => Blocklist::load(p)?,
        None => Blocklist::default(),
    };
    let needs_llm = config.moderation || config.novelty_mode != NoveltyMode::Off;
    if needs_llm && services.is_none() {
        return Err(FilterError::Config("moderation or novelty checks need an LLM backend".into()));
    }
    let corpus = match (&config.haystack_corpus, config.novelty_mode) {
        (_, NoveltyMode::Off | NoveltyMode::LlmProbe) => String::new(),
        (Some(p), _) => fs::read_to_string(p)
            .map_err(|e| FilterError::Config(format!("haystack corpus {}: {e}", p.display())))?,
        (None, _) => default_corpus(config.haystack_length * 2),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| FilterError::Config(e.to_string()))?;

    let mut report = FilterReport {
        input_count: entries.len(),
        removed: StageCounts::default(),
        output_count: 0,
        novelty_mode: config.novelty_mode,
        verdicts: Vec::with_capacity(entries.len()),
    };
    let cutoff = config.cutoff_date;
    let mut kept = apply_stage(&pool, entries, Stage::Temporal, &mut report, |e| {
        Ok(if passes_cutoff(e, cutoff) {
            Decision::Keep
        } else {
            Decision::Drop(format!("added {} not after {cutoff}", e.added_date))
        })
    })?;
    kept = apply_stage(&pool, kept, Stage::Vote, &mut report, |e| Ok(vote_filter(e, config.downvote_ratio_max)))?;
    let moderator = services.filter(|_| config.moderation).map(|s| &s.prompter);
    kept = apply_stage(&pool, kept, Stage::Content, &mut report, |e| content_filter(e, &blocklist, moderator))?;
    if let (Some(s), true) = (services, config.novelty_mode != NoveltyMode::Off) {
        kept = apply_stage(&pool, kept, Stage::Novelty, &mut report, |e| novelty_check(e, config, s, &corpus))?;
    }
    for e in &kept {
        report.verdicts.push(Verdict { id: e.source_id.clone(), phrase: e.phrase.clone(), removed_by: None, reason: None });
    }
    report.output_count = kept.len();
    debug_assert!(report.is_conserved());
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{HashEmbedder, Reply, ScriptedBackend};
    use crate::prompts::{CallContext, PromptCatalog};

    fn entry(phrase: &str, date: &str, up: u64, down: u64) -> RawEntry {
        RawEntry {
            phrase: phrase.into(),
            definition: format!("{phrase} means something new"),
            example: format!("I saw {phrase} yesterday"),
            upvotes: up,
            downvotes: down,
            added_date: date.parse().unwrap(),
            source_id: phrase.into(),
        }
    }

    fn cutoff() -> NaiveDate {
        "2022-01-31".parse().unwrap()
    }

    #[test]
    fn temporal_cutoff_is_strict() {
        let es = vec![entry("a", "2022-03-15", 1, 0), entry("b", "2021-12-01", 1, 0), entry("c", "2022-01-31", 1, 0)];
        let kept = temporal_filter(es, cutoff());
        assert_eq!(kept.iter().map(|e| e.phrase.as_str()).collect::<Vec<_>>(), ["a"]);
    }

    #[test]
    fn vote_boundaries() {
        assert!(!vote_filter(&entry("a", "2023-01-01", 10, 50), 0.8).is_keep());
        assert!(vote_filter(&entry("a", "2023-01-01", 100, 20), 0.8).is_keep());
        assert!(vote_filter(&entry("a", "2023-01-01", 1, 4), 0.8).is_keep());
        assert!(vote_filter(&entry("a", "2023-01-01", 0, 0), 0.8).is_keep());
        assert!(!vote_filter(&entry("a", "2023-01-01", 0, 1), 0.8).is_keep());
    }

    #[test]
    fn blocklist_matches_whole_words_only() {
        let b = Blocklist::from_terms(["# comment", "", "grass", "no cap"]);
        assert_eq!(b.len(), 2);
        assert_eq!(b.find("touch GRASS now"), Some("grass"));
        assert_eq!(b.find("grasshopper season"), None);
        assert_eq!(b.find("that's no cap."), Some("no cap"));
        assert_eq!(b.find("grass"), Some("grass"));
    }

    #[test]
    fn content_filter_reports_term() {
        let b = Blocklist::from_terms(["badword"]);
        let mut e = entry("ok", "2023-01-01", 1, 0);
        e.definition = "contains BadWord here".into();
        assert_eq!(content_filter(&e, &b, None).unwrap(), Decision::Drop("blocklist:badword".into()));
        assert_eq!(content_filter(&entry("ok", "2023-01-01", 1, 0), &Blocklist::default(), None).unwrap(), Decision::Keep);
    }

    #[test]
    fn missing_blocklist_is_config_error() {
        let cfg = FilterConfig { blocklist_path: Some("/nonexistent/blocklist.txt".into()), ..Default::default() };
        assert!(matches!(run_filter_pipeline(vec![], &cfg, None), Err(FilterError::Config(_))));
    }

    #[test]
    fn moderation_pass_drops_unsafe() {
        let llm = ScriptedBackend::new().rule("bad one", "VERDICT: UNSAFE").rule("", "VERDICT: SAFE");
        let cat = PromptCatalog::builtin();
        let p = Prompter::new(&llm, &cat, CallContext::new("m"));
        let b = Blocklist::default();
        assert_eq!(content_filter(&entry("bad one", "2023-01-01", 1, 0), &b, Some(&p)).unwrap(), Decision::Drop("moderation".into()));
        assert_eq!(content_filter(&entry("fine", "2023-01-01", 1, 0), &b, Some(&p)).unwrap(), Decision::Keep);
    }

    #[test]
    fn probe_verdicts() {
        let cat = PromptCatalog::builtin();
        let emb = HashEmbedder::new("h");
        let gold = "rizz means charm";
        let known = ScriptedBackend::new().rule("", gold);
        let p = Prompter::new(&known, &cat, CallContext::new("m"));
        assert_eq!(novelty_probe("rizz", gold, &p, &emb, 0.7).unwrap(), Novelty::Known);
        let unknown = ScriptedBackend::new().rule("", "I am not familiar with this term.");
        let p = Prompter::new(&unknown, &cat, CallContext::new("m"));
        assert_eq!(novelty_probe("rizz", gold, &p, &emb, 0.7).unwrap(), Novelty::Novel);
        let refusing = ScriptedBackend::new().rule_sequence("", vec![Reply::Refuse("no".into())]);
        let p = Prompter::new(&refusing, &cat, CallContext::new("m"));
        assert_eq!(novelty_probe("rizz", gold, &p, &emb, 0.7).unwrap(), Novelty::Novel);
    }

    #[test]
    fn haystack_has_requested_length_and_carrier() {
        let corpus = default_corpus(500);
        assert!(text::word_count(&corpus) >= 500);
        let h = build_haystack("NEEDLE SENTENCE", &corpus, 0.5, 100, 7);
        assert_eq!(text::word_count(&h), 102);
        let words: Vec<&str> = h.split_whitespace().collect();
        assert_eq!(&words[50..52], ["NEEDLE", "SENTENCE"]);
        assert!(build_haystack("X", &corpus, 0.0, 10, 1).starts_with("X "));
        assert!(build_haystack("X", &corpus, 1.0, 10, 1).ends_with(" X"));
    }

    fn needle(reply: &str, max_edits: usize) -> NeedleVerdict {
        let llm = ScriptedBackend::new().rule("", reply);
        let cat = PromptCatalog::builtin();
        let p = Prompter::new(&llm, &cat, CallContext::new("m"));
        let params = NeedleParams { haystack_length: 200, repeats: 3, max_edits };
        needle_test("x", "Jimmy was so upset when his furby died.", "a sad child", &default_corpus(400), 0.3, &params, &p, 9)
            .unwrap()
    }

    #[test]
    fn needle_verdicts() {
        assert_eq!(needle("Jimmy was so upset when his furby died.", 3), NeedleVerdict::Found);
        assert_eq!(needle("The answer: jimmy was so upset when his furbby died", 3), NeedleVerdict::Found);
        assert_eq!(needle("The morning train left the station.", 3), NeedleVerdict::NotFound);
        assert_eq!(needle("Jimmy was so upset when his fur died.", 0), NeedleVerdict::NotFound);
    }

    #[test]
    fn needle_requires_long_enough_corpus() {
        let llm = ScriptedBackend::new().rule("", "x");
        let cat = PromptCatalog::builtin();
        let p = Prompter::new(&llm, &cat, CallContext::new("m"));
        let params = NeedleParams { haystack_length: 50, repeats: 1, max_edits: 3 };
        let r = needle_test("x", "c", "d", "too short", 0.5, &params, &p, 1);
        assert!(matches!(r, Err(FilterError::Precondition(_))));
        let r = needle_test("x", "c", "d", &default_corpus(60), 1.5, &params, &p, 1);
        assert!(matches!(r, Err(FilterError::Precondition(_))));
    }

    #[test]
    fn empty_input_gives_zero_report() {
        let (kept, report) = run_filter_pipeline(vec![], &FilterConfig::default(), None).unwrap();
        assert!(kept.is_empty());
        assert_eq!(report.removed, StageCounts::default());
        assert_eq!(report.output_count, 0);
    }

    #[test]
    fn llm_stages_need_services() {
        let cfg = FilterConfig { novelty_mode: NoveltyMode::LlmProbe, ..Default::default() };
        assert!(matches!(run_filter_pipeline(vec![], &cfg, None), Err(FilterError::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig { downvote_ratio_max: 1.5, ..Default::default() }.validate().is_err());
        assert!(FilterConfig { needle_repeats: 0, ..Default::default() }.validate().is_err());
        assert!("needle-test".parse::<NoveltyMode>().is_ok());
        assert!("sometimes".parse::<NoveltyMode>().is_err());
    }

    #[test]
    fn report_table_renders_funnel() {
        let es = vec![entry("a", "2022-03-15", 1, 0), entry("b", "2021-12-01", 1, 0)];
        let (_, report) = run_filter_pipeline(es, &FilterConfig::default(), None).unwrap();
        let table = report.to_string();
        assert!(table.contains("temporal"));
        assert!(table.lines().last().unwrap().trim_end().ends_with('1'));
    }
}
