//! Offline backends: scripted replies, a prompt-aware synthetic model,
//! call recording, and deterministic embedders.
//!
//! The hash embedder maps text to a unit vector as follows. For each
//! dimension `i` in `0..dim`, take `SHA-256(utf8(text) || be32(i))`, read
//! the first 8 bytes as a big-endian `u64` `u`, and set
//! `x_i = 2 * u / 2^64 - 1`. The vector is then L2-normalized. Identical
//! strings always map to identical vectors.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatBackend, ChatRequest, ChatResponse, Embedder, EmbeddingVector, LlmError, Usage,
};
use crate::prompts::{ids, extract_tag};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Text(String),
    /// Transient transport failure.
    Fail(String),
    /// Provider refusal.
    Refuse(String),
}

impl Reply {
    fn into_result(self, model_id: &str) -> Result<ChatResponse, LlmError> {
        match self {
            Reply::Text(content) => Ok(mock_response(model_id, content)),
            Reply::Fail(msg) => Err(LlmError::transient(msg)),
            Reply::Refuse(msg) => Err(LlmError::Content(msg)),
        }
    }
}

fn mock_response(model_id: &str, content: String) -> ChatResponse {
    let completion_tokens = content.split_whitespace().count() as u64;
    ChatResponse {
        content,
        model_id: model_id.to_string(),
        usage: Usage { prompt_tokens: 0, completion_tokens },
        cached: false,
    }
}

/// On-disk form of one scripted rule.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RuleSpec {
    #[serde(default)]
    pub prompt_id: Option<String>,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub replies: Vec<ReplySpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplySpec {
    Text(String),
    Tagged {
        #[serde(default)]
        fail: Option<String>,
        #[serde(default)]
        refuse: Option<String>,
    },
}

impl From<ReplySpec> for Reply {
    fn from(r: ReplySpec) -> Self {
        match r {
            ReplySpec::Text(t) => Reply::Text(t),
            ReplySpec::Tagged { fail: Some(m), .. } => Reply::Fail(m),
            ReplySpec::Tagged { refuse: Some(m), .. } => Reply::Refuse(m),
            ReplySpec::Tagged { .. } => Reply::Fail("empty scripted reply".into()),
        }
    }
}

struct Rule {
    prompt_id: Option<String>,
    contains: Option<String>,
    replies: Vec<Reply>,
    cursor: AtomicUsize,
}

impl Rule {
    fn matches(&self, req: &ChatRequest) -> bool {
        if let Some(id) = &self.prompt_id {
            if req.prompt_id.as_deref() != Some(id.as_str()) {
                return false;
            }
        }
        match &self.contains {
            Some(needle) => req.messages.iter().any(|m| m.content.contains(needle.as_str())),
            None => true,
        }
    }

    fn next(&self) -> Reply {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.replies[i.min(self.replies.len() - 1)].clone()
    }
}

/// Replies chosen by the first matching rule. A rule matches on prompt id
/// and/or a substring of any message; its replies are served in order and
/// the last one repeats.
#[derive(Default)]
pub struct ScriptedBackend {
    rules: Vec<Rule>,
    fallback: Option<Arc<dyn ChatBackend>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Single canned reply for prompts containing `needle`.
    pub fn rule(self, needle: &str, reply: &str) -> Self {
        self.rule_sequence(needle, vec![Reply::Text(reply.to_string())])
    }

    pub fn rule_sequence(mut self, needle: &str, replies: Vec<Reply>) -> Self {
        self.push(None, Some(needle.to_string()), replies);
        self
    }

    /// Reply for every request carrying `prompt_id`, optionally narrowed by a
    /// substring.
    pub fn on_prompt(mut self, prompt_id: &str, contains: Option<&str>, replies: Vec<Reply>) -> Self {
        self.push(Some(prompt_id.to_string()), contains.map(str::to_string), replies);
        self
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn ChatBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn from_specs(specs: Vec<RuleSpec>) -> Self {
        let mut backend = Self::new();
        for s in specs {
            let replies = s.replies.into_iter().map(Reply::from).collect();
            backend.push(s.prompt_id, s.contains, replies);
        }
        backend
    }

    /// Load rules from a JSON array of [`RuleSpec`].
    pub fn from_json(json: &str) -> Result<Self, LlmError> {
        let specs: Vec<RuleSpec> = serde_json::from_str(json)
            .map_err(|e| LlmError::Config(format!("bad mock script: {e}")))?;
        Ok(Self::from_specs(specs))
    }

    fn push(&mut self, prompt_id: Option<String>, contains: Option<String>, replies: Vec<Reply>) {
        assert!(!replies.is_empty(), "scripted rule needs at least one reply");
        self.rules.push(Rule { prompt_id, contains, replies, cursor: AtomicUsize::new(0) });
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        if let Some(rule) = self.rules.iter().find(|r| r.matches(request)) {
            return rule.next().into_result(&request.model_id);
        }
        match &self.fallback {
            Some(f) => f.complete(request),
            None => Err(LlmError::Content(format!(
                "no scripted reply for prompt {:?}",
                request.prompt_id.as_deref().unwrap_or("<none>")
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CallRecord {
    pub request: ChatRequest,
    pub response: Result<String, LlmError>,
}

/// Pass-through wrapper that records every request and its outcome.
pub struct RecordingBackend<B> {
    inner: B,
    calls: Mutex<Vec<CallRecord>>,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, calls: Mutex::new(Vec::new()) }
    }

    pub fn call_count(&self) -> usize {
        self.lock().len()
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.lock().clone()
    }

    /// Number of calls whose prompt id starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.lock()
            .iter()
            .filter(|c| c.request.prompt_id.as_deref().is_some_and(|id| id.starts_with(prefix)))
            .count()
    }

    pub fn count_by_prompt(&self) -> HashMap<String, usize> {
        let mut out = HashMap::new();
        for c in self.lock().iter() {
            let id = c.request.prompt_id.clone().unwrap_or_default();
            *out.entry(id).or_insert(0) += 1;
        }
        out
    }

    pub fn reset(&self) {
        self.lock().clear();
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<CallRecord>> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let result = self.inner.complete(request);
        self.lock().push(CallRecord {
            request: request.clone(),
            response: result.as_ref().map(|r| r.content.clone()).map_err(Clone::clone),
        });
        result
    }
}

pub const HASH_EMBEDDER_DIM: usize = 64;

/// Deterministic text-hash embedder (see module docs for the scheme).
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    model_id: String,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(model_id: impl Into<String>) -> Self {
        HashEmbedder { model_id: model_id.into(), dim: HASH_EMBEDDER_DIM }
    }

    pub fn with_dim(model_id: impl Into<String>, dim: usize) -> Self {
        HashEmbedder { model_id: model_id.into(), dim: dim.max(1) }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut values: Vec<f64> = (0..self.dim as u32)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(text.as_bytes());
                h.update(i.to_be_bytes());
                let digest = h.finalize();
                let mut word = [0u8; 8];
                word.copy_from_slice(&digest[..8]);
                let u = u64::from_be_bytes(word);
                2.0 * (u as f64 / 18_446_744_073_709_551_616.0) - 1.0
            })
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        values
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::InvalidRequest("cannot embed empty text".into()));
        }
        EmbeddingVector::new(self.vector(text), self.model_id.clone())
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

/// Fixed vectors for chosen texts; everything else falls back to the hash
/// scheme at the same dimensionality.
#[derive(Debug, Clone)]
pub struct ScriptedEmbedder {
    vectors: HashMap<String, Vec<f64>>,
    fallback: HashEmbedder,
    failing: bool,
}

impl ScriptedEmbedder {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        ScriptedEmbedder {
            vectors: HashMap::new(),
            fallback: HashEmbedder::with_dim(model_id, dim),
            failing: false,
        }
    }

    pub fn with(mut self, text: &str, vector: Vec<f64>) -> Self {
        assert_eq!(vector.len(), self.fallback.dim, "scripted vector has wrong dimension");
        self.vectors.insert(text.to_string(), vector);
        self
    }

    /// An embedder whose every call fails with a transport error.
    pub fn failing(model_id: impl Into<String>) -> Self {
        ScriptedEmbedder { failing: true, ..Self::new(model_id, 2) }
    }
}

impl Embedder for ScriptedEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if self.failing {
            return Err(LlmError::Transport { message: "embedder offline".into(), retryable: false });
        }
        match self.vectors.get(text) {
            Some(v) => EmbeddingVector::new(v.clone(), self.fallback.model_id.clone()),
            None => self.fallback.embed(text),
        }
    }

    fn model_id(&self) -> &str {
        &self.fallback.model_id
    }
}

/// Prompt-aware offline model. It recognizes the catalog prompt ids and
/// produces structurally valid, deterministic answers derived from the tagged
/// inputs in the prompt, so whole pipelines can run without a network.
#[derive(Debug, Clone, Default)]
pub struct SyntheticBackend;

const DIVERGENT_ENTITIES: &[&str] = &[
    "tax season",
    "a chess tournament",
    "the housing market",
    "a cooking contest",
    "space travel",
    "a marathon",
    "office politics",
    "a music festival",
    "gardening",
    "a board meeting",
];

const ENTITY_STOPWORDS: &[&str] = &[
    "refers", "often", "expression", "suggests", "people", "about", "their", "there", "which",
    "would", "could", "should", "where", "while", "these", "those", "other", "being", "something",
    "someone", "describe", "usually", "really", "because", "always", "never", "after", "before",
];

const VARIANT_PREFIXES: &[&str] = &[
    "basically ",
    "essentially ",
    "in short, ",
    "more or less ",
    "roughly speaking, ",
    "put simply, ",
    "in other words, ",
    "loosely, ",
];

impl SyntheticBackend {
    pub fn new() -> Self {
        SyntheticBackend
    }

    fn answer(&self, req: &ChatRequest) -> String {
        let prompt = req.last_user();
        let tag = |name: &str| extract_tag(prompt, name).unwrap_or_default();
        match req.prompt_id.as_deref().unwrap_or("") {
            ids::NOVELTY_DEFINE => "I am not familiar with this term.".to_string(),
            ids::NOVELTY_NEEDLE => "NONE".to_string(),
            ids::MODERATION => "VERDICT: SAFE".to_string(),
            ids::STANDARDIZE_SLOTS => {
                let definition = tag("definition");
                let example = tag("example");
                let basic = first_sentence(&definition)
                    .map(|s| lower_first(&s))
                    .unwrap_or_else(|| "an informal expression".to_string());
                let usage = if example.trim().is_empty() {
                    "in casual online conversation".to_string()
                } else {
                    format!("in casual conversation, as in \"{}\"", text::first_words(&example, 12))
                };
                format!(
                    "BASIC: {basic}\nUSAGE: {usage}\nADDITIONAL: carries an informal and playful tone"
                )
            }
            ids::STANDARDIZE_VARIANTS => {
                let explanation = tag("explanation");
                let count: usize = tag("count").trim().parse().unwrap_or(4);
                let avoid: Vec<String> =
                    tag("avoid").lines().map(text::normalize_ws).filter(|l| !l.is_empty()).collect();
                let mut out = Vec::new();
                for prefix in VARIANT_PREFIXES {
                    if out.len() == count {
                        break;
                    }
                    let v = explanation.replacen(" refers to ", &format!(" refers to {prefix}"), 1);
                    if !avoid.contains(&text::normalize_ws(&v)) {
                        out.push(v);
                    }
                }
                out.iter().enumerate().map(|(i, v)| format!("{}. {v}", i + 1)).collect::<Vec<_>>().join("\n")
            }
            ids::CF_ENTITIES => {
                let source = tag("text");
                let picks = pick_entities(&source, 2);
                if picks.is_empty() {
                    "ENTITIES: NONE".to_string()
                } else {
                    let lines: Vec<String> = picks.iter().map(|e| format!("- {e}")).collect();
                    format!("ENTITIES:\n{}", lines.join("\n"))
                }
            }
            ids::CF_REPLACE => {
                let entities: Vec<String> =
                    tag("entities").lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
                let mut used = Vec::new();
                let mut lines = Vec::new();
                for e in entities {
                    let repl = divergent_for(&e, &used);
                    used.push(repl.clone());
                    lines.push(format!("{e} => {repl}"));
                }
                lines.join("\n")
            }
            ids::CF_CONTEXT => {
                let phrase = tag("phrase");
                let explanation = tag("explanation");
                let gist = template_basic(&explanation).unwrap_or_else(|| "something new".to_string());
                format!(
                    "CONTEXT: When my friend said \"{phrase}\" I knew they meant {}.",
                    text::first_words(&gist, 12)
                )
            }
            ids::FOCUS_DI | ids::BASELINE_DIRECT | ids::BASELINE_COT => {
                let phrase = tag("phrase");
                let context = tag("context");
                let reasoning = if req.prompt_id.as_deref() == Some(ids::BASELINE_COT) {
                    "The phrase appears in an informal sentence, so its meaning comes from the situation described.\n"
                } else {
                    ""
                };
                format!(
                    "{reasoning}EXPLANATION: {phrase} refers to {}. It is often used in casual conversation. This expression suggests an informal tone.",
                    gist_of_context(&context)
                )
            }
            ids::FOCUS_MEI | ids::FOCUS_ERI => {
                let context = tag("context");
                let placeholder = tag("placeholder");
                format!(
                    "GUESS: a new slang term\nEXPLANATION: {placeholder} refers to {}. It is often used in casual conversation. This expression suggests an informal tone.",
                    gist_of_context(&context)
                )
            }
            ids::FOCUS_SY => {
                let phrase = tag("phrase");
                let placeholder = tag("placeholder");
                let body = tag("analyses");
                let first = body
                    .lines()
                    .map(str::trim)
                    .find(|l| !l.is_empty() && !l.starts_with('['))
                    .unwrap_or("")
                    .to_string();
                let merged = if !placeholder.is_empty() { first.replace(&placeholder, &phrase) } else { first };
                format!("EXPLANATION: {merged}")
            }
            ids::BASELINE_CAUVIEW_ANALYSIS => {
                let context = tag("context");
                let ents = pick_entities(&context, 3);
                format!("ANALYSIS: The key entities are {}.", if ents.is_empty() { "none".to_string() } else { ents.join(", ") })
            }
            ids::BASELINE_CAUVIEW_INTERPRET => {
                let first_user = req
                    .messages
                    .iter()
                    .find(|m| m.role == super::Role::User)
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                let phrase = extract_tag(first_user, "phrase").unwrap_or_default();
                let context = extract_tag(first_user, "context").unwrap_or_default();
                format!(
                    "EXPLANATION: {phrase} refers to {}. It is often used in casual conversation. This expression suggests an informal tone.",
                    gist_of_context(&context)
                )
            }
            other => format!("EXPLANATION: no synthetic answer for prompt {other:?}."),
        }
    }
}

impl ChatBackend for SyntheticBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        Ok(mock_response(&request.model_id, self.answer(request)))
    }
}

fn first_sentence(s: &str) -> Option<String> {
    let s = s.trim();
    let end = s.find(['.', '!', '?']).unwrap_or(s.len());
    let first = text::normalize_ws(&s[..end]);
    (!first.is_empty()).then_some(first)
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn template_basic(explanation: &str) -> Option<String> {
    let start = explanation.find(" refers to ")? + " refers to ".len();
    let rest = &explanation[start..];
    let end = rest.find(". It is often used").unwrap_or(rest.len());
    Some(rest[..end].trim().to_string())
}

fn gist_of_context(context: &str) -> String {
    let words: Vec<&str> = context
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| w.len() > 3 && !w.contains("MASK"))
        .take(6)
        .collect();
    if words.is_empty() {
        "a situation described in the conversation".to_string()
    } else {
        format!("a situation involving {}", words.join(" ").to_lowercase())
    }
}

fn pick_entities(source: &str, max: usize) -> Vec<String> {
    let mut seen: Vec<(usize, String)> = Vec::new();
    for (pos, raw) in source.split_whitespace().enumerate() {
        let w = raw.trim_matches(|c: char| !c.is_alphanumeric());
        if w.len() < 5 || !w.chars().all(|c| c.is_alphabetic()) || w.chars().any(|c| c.is_uppercase()) {
            continue;
        }
        if ENTITY_STOPWORDS.contains(&w) || seen.iter().any(|(_, s)| s == w) {
            continue;
        }
        seen.push((pos, w.to_string()));
    }
    let mut by_len = seen.clone();
    by_len.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<(usize, String)> = by_len.into_iter().take(max).collect();
    chosen.sort_by_key(|(p, _)| *p);
    chosen.into_iter().map(|(_, w)| w).collect()
}

fn divergent_for(entity: &str, used: &[String]) -> String {
    let digest = Sha256::digest(entity.as_bytes());
    let start = digest[0] as usize % DIVERGENT_ENTITIES.len();
    let lower = entity.to_lowercase();
    (0..DIVERGENT_ENTITIES.len())
        .map(|k| DIVERGENT_ENTITIES[(start + k) % DIVERGENT_ENTITIES.len()])
        .find(|c| !c.contains(&lower) && !lower.contains(c) && !used.iter().any(|u| u == c))
        .unwrap_or("a spreadsheet")
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::Message;

    #[test]
    fn scripted_reply_keyed_on_substring() {
        let b = ScriptedBackend::new().rule("define X", "X is a thing");
        let r = b.complete(&ChatRequest::new("m", vec![Message::user("please define X now")])).unwrap();
        assert_eq!(r.content, "X is a thing");
        assert!(!r.cached);
    }

    #[test]
    fn unmatched_prompt_without_fallback_errors() {
        let b = ScriptedBackend::new().rule("define X", "X");
        assert!(b.complete(&ChatRequest::new("m", vec![Message::user("other")])).is_err());
    }

    #[test]
    fn last_reply_repeats() {
        let b = ScriptedBackend::new()
            .rule_sequence("q", vec![Reply::Text("a".into()), Reply::Text("b".into())]);
        let req = ChatRequest::new("m", vec![Message::user("q")]);
        let got: Vec<String> = (0..3).map(|_| b.complete(&req).unwrap().content).collect();
        assert_eq!(got, ["a", "b", "b"]);
    }

    #[test]
    fn script_loads_from_json() {
        let json = r#"[{"contains": "hi", "replies": ["one", {"fail": "down"}]}]"#;
        let b = ScriptedBackend::from_json(json).unwrap();
        let req = ChatRequest::new("m", vec![Message::user("hi")]);
        assert_eq!(b.complete(&req).unwrap().content, "one");
        assert!(b.complete(&req).unwrap_err().is_retryable());
    }

    #[test]
    fn hash_embedder_is_deterministic_unit_length() {
        let e = HashEmbedder::new("m");
        let a = e.embed("slang").unwrap();
        let b = e.embed("slang").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((a.cosine(&b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hash_embedder_matches_documented_scheme_fixture() {
        // Frozen with an independent Python implementation of the scheme:
        // hashlib.sha256(text + i.to_bytes(4, 'big')), first 8 bytes big-endian.
        let e = HashEmbedder::new("m");
        let a = e.embed("The Winter Arc").unwrap();
        let b = e.embed("tax season").unwrap();
        let cos = a.cosine(&b).unwrap();
        assert!((cos - HASH_FIXTURE_COSINE).abs() < 1e-12, "{cos}");
        assert!((a.values[0] - HASH_FIXTURE_FIRST).abs() < 1e-12, "{}", a.values[0]);
    }

    const HASH_FIXTURE_COSINE: f64 = -0.023997545285167343;
    const HASH_FIXTURE_FIRST: f64 = -0.18302402522272776;

    #[test]
    fn scripted_embedder_uses_fixed_vectors() {
        let e = ScriptedEmbedder::new("m", 2).with("a", vec![1.0, 0.0]).with("b", vec![0.72, 0.6939740629158989]);
        let cos = e.embed("a").unwrap().cosine(&e.embed("b").unwrap()).unwrap();
        assert!((cos - 0.72).abs() < 1e-12);
    }

    #[test]
    fn recording_counts_by_prompt_id() {
        let rec = RecordingBackend::new(SyntheticBackend::new());
        let req = ChatRequest::new("m", vec![Message::user("<phrase>x</phrase><context>x y</context>")])
            .with_prompt_id(ids::FOCUS_DI);
        rec.complete(&req).unwrap();
        rec.complete(&req).unwrap();
        assert_eq!(rec.count_prefix("focus."), 2);
        assert_eq!(rec.count_by_prompt()[ids::FOCUS_DI], 2);
    }

    #[test]
    fn divergent_replacement_never_contains_original() {
        for e in ["space", "marathon", "gardening", "winter"] {
            let r = divergent_for(e, &[]);
            assert!(!r.contains(e));
        }
    }
}
