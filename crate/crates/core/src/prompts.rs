//! Versioned prompt catalog and the ask-parse-retry loop shared by every
//! LLM-driven stage.
//!
//! Each prompt is a text file `<id>.txt` whose first line is `version: N`,
//! followed by a `---` line and the body. Bodies use `{{name}}`
//! placeholders. The built-in catalog is compiled in from `prompts/`; a
//! directory passed to [`PromptCatalog::load_dir`] overrides individual files
//! without recompiling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llmclient::{ChatBackend, ChatRequest, LlmError, Message};

pub mod ids {
    pub const SYSTEM: &str = "system";
    pub const NOVELTY_DEFINE: &str = "novelty.define";
    pub const NOVELTY_NEEDLE: &str = "novelty.needle";
    pub const MODERATION: &str = "filter.moderation";
    pub const STANDARDIZE_SLOTS: &str = "standardize.slots";
    pub const STANDARDIZE_VARIANTS: &str = "standardize.variants";
    pub const CF_ENTITIES: &str = "counterfactual.entities";
    pub const CF_REPLACE: &str = "counterfactual.replace";
    pub const CF_CONTEXT: &str = "counterfactual.context";
    pub const FOCUS_DI: &str = "focus.di";
    pub const FOCUS_MEI: &str = "focus.mei";
    pub const FOCUS_ERI: &str = "focus.eri";
    pub const FOCUS_SY: &str = "focus.sy";
    pub const BASELINE_DIRECT: &str = "baseline.direct";
    pub const BASELINE_COT: &str = "baseline.cot";
    pub const BASELINE_CAUVIEW_ANALYSIS: &str = "baseline.cauview.analysis";
    pub const BASELINE_CAUVIEW_INTERPRET: &str = "baseline.cauview.interpret";
}

const BUILTIN: &[(&str, &str)] = &[
    (ids::SYSTEM, include_str!("../prompts/system.txt")),
    (ids::NOVELTY_DEFINE, include_str!("../prompts/novelty.define.txt")),
    (ids::NOVELTY_NEEDLE, include_str!("../prompts/novelty.needle.txt")),
    (ids::MODERATION, include_str!("../prompts/filter.moderation.txt")),
    (ids::STANDARDIZE_SLOTS, include_str!("../prompts/standardize.slots.txt")),
    (ids::STANDARDIZE_VARIANTS, include_str!("../prompts/standardize.variants.txt")),
    (ids::CF_ENTITIES, include_str!("../prompts/counterfactual.entities.txt")),
    (ids::CF_REPLACE, include_str!("../prompts/counterfactual.replace.txt")),
    (ids::CF_CONTEXT, include_str!("../prompts/counterfactual.context.txt")),
    (ids::FOCUS_DI, include_str!("../prompts/focus.di.txt")),
    (ids::FOCUS_MEI, include_str!("../prompts/focus.mei.txt")),
    (ids::FOCUS_ERI, include_str!("../prompts/focus.eri.txt")),
    (ids::FOCUS_SY, include_str!("../prompts/focus.sy.txt")),
    (ids::BASELINE_DIRECT, include_str!("../prompts/baseline.direct.txt")),
    (ids::BASELINE_COT, include_str!("../prompts/baseline.cot.txt")),
    (ids::BASELINE_CAUVIEW_ANALYSIS, include_str!("../prompts/baseline.cauview.analysis.txt")),
    (ids::BASELINE_CAUVIEW_INTERPRET, include_str!("../prompts/baseline.cauview.interpret.txt")),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("unknown prompt id {0:?}")]
    Unknown(String),
    #[error("prompt {id}: missing value for placeholder {{{{{name}}}}}")]
    MissingVar { id: String, name: String },
    #[error("prompt file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("reading prompt catalog: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub version: u32,
    pub body: String,
}

impl PromptTemplate {
    pub fn parse(id: &str, source: &str, origin: &str) -> Result<Self, PromptError> {
        let malformed = |reason: &str| PromptError::Malformed { path: origin.to_string(), reason: reason.to_string() };
        let mut lines = source.lines();
        let header = lines.next().ok_or_else(|| malformed("empty file"))?;
        let version = header
            .strip_prefix("version:")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| malformed("first line must be `version: N`"))?;
        if lines.next().map(str::trim) != Some("---") {
            return Err(malformed("second line must be `---`"));
        }
        let body = lines.collect::<Vec<_>>().join("\n").trim_end().to_string();
        Ok(PromptTemplate { id: id.to_string(), version, body })
    }

    pub fn versioned_id(&self) -> String {
        format!("{}@{}", self.id, self.version)
    }

    /// Substitute `{{name}}` placeholders. Every placeholder must be bound.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| PromptError::Malformed {
                path: self.id.clone(),
                reason: "unterminated placeholder".into(),
            })?;
            let name = after[..end].trim();
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingVar { id: self.id.clone(), name: name.to_string() })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PromptCatalog {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, src)| {
                let t = PromptTemplate::parse(id, src, &format!("builtin:{id}"))
                    .expect("built-in prompt files are well formed");
                (id.to_string(), t)
            })
            .collect();
        PromptCatalog { templates }
    }

    /// Built-in catalog with any `<id>.txt` files in `dir` overriding it.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut catalog = Self::builtin();
        let entries = fs::read_dir(dir).map_err(|e| PromptError::Io(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| PromptError::Io(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let src = fs::read_to_string(&path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
            let t = PromptTemplate::parse(&id, &src, &path.display().to_string())?;
            catalog.templates.insert(id, t);
        }
        Ok(catalog)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates.get(id).ok_or_else(|| PromptError::Unknown(id.to_string()))
    }

    /// `id@version` for every template, for run provenance.
    pub fn versions(&self) -> BTreeMap<String, u32> {
        self.templates.iter().map(|(k, t)| (k.clone(), t.version)).collect()
    }

    /// Render `id` into a request with the catalog's system prompt.
    pub fn request(&self, id: &str, vars: &[(&str, &str)], ctx: &CallContext) -> Result<ChatRequest, PromptError> {
        let user = self.get(id)?.render(vars)?;
        let system = self.get(ids::SYSTEM)?.render(&[])?;
        Ok(ChatRequest::new(ctx.model_id.clone(), vec![Message::system(system), Message::user(user)])
            .with_prompt_id(id)
            .with_seed(ctx.seed))
    }
}

/// Per-call settings shared by the pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CallContext {
    pub model_id: String,
    pub seed: Option<u64>,
    /// Attempts allowed when a response fails to parse or validate.
    pub attempts: u32,
}

impl CallContext {
    pub fn new(model_id: impl Into<String>) -> Self {
        CallContext { model_id: model_id.into(), seed: None, attempts: 2 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_attempts(mut self, attempts: u32) -> Self {
        self.attempts = attempts.max(1);
        self
    }
}

/// One prompt sent and the response received, verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: String,
    pub prompt_id: String,
    pub messages: Vec<Message>,
    pub response: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AskError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("response rejected after {attempts} attempt(s): {reason}")]
    Rejected { attempts: u32, reason: String, last_response: String },
}

/// Send `request`, validating each response with `parse`; a rejected
/// response consumes one attempt. Transport errors return immediately (the
/// client stack owns transport retries). Every exchange is appended to `log`.
pub fn ask<T>(
    llm: &dyn ChatBackend,
    stage: &str,
    request: &ChatRequest,
    attempts: u32,
    log: &mut Vec<Exchange>,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<T, AskError> {
    let attempts = attempts.max(1);
    let mut reason = String::new();
    let mut last_response = String::new();
    for _ in 0..attempts {
        let resp = llm.complete(request)?;
        log.push(Exchange {
            stage: stage.to_string(),
            prompt_id: request.prompt_id.clone().unwrap_or_default(),
            messages: request.messages.clone(),
            response: resp.content.clone(),
        });
        match parse(&resp.content) {
            Ok(v) => return Ok(v),
            Err(r) => {
                log::debug!("{stage}: rejected response: {r}");
                reason = r;
                last_response = resp.content;
            }
        }
    }
    Err(AskError::Rejected { attempts, reason, last_response })
}

/// First `<name>...</name>` span in `text`.
/// Backend, catalog and call settings bundled for the pipeline stages.
#[derive(Clone)]
pub struct Prompter<'a> {
    pub llm: &'a dyn ChatBackend,
    pub catalog: &'a PromptCatalog,
    pub ctx: CallContext,
}

impl<'a> Prompter<'a> {
    pub fn new(llm: &'a dyn ChatBackend, catalog: &'a PromptCatalog, ctx: CallContext) -> Self {
        Prompter { llm, catalog, ctx }
    }

    /// Same backend and catalog with a different request seed.
    pub fn reseeded(&self, seed: u64) -> Prompter<'a> {
        Prompter { llm: self.llm, catalog: self.catalog, ctx: self.ctx.clone().with_seed(seed) }
    }

    pub fn request(&self, id: &str, vars: &[(&str, &str)]) -> Result<ChatRequest, PromptError> {
        self.catalog.request(id, vars, &self.ctx)
    }

    pub fn ask<T>(
        &self,
        stage: &str,
        id: &str,
        vars: &[(&str, &str)],
        log: &mut Vec<Exchange>,
        parse: impl FnMut(&str) -> Result<T, String>,
    ) -> Result<T, AskError> {
        let req = self.request(id, vars)?;
        ask(self.llm, stage, &req, self.ctx.attempts, log, parse)
    }
}

pub fn extract_tag(text: &str, name: &str) -> Option<String> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim().to_string())
}

/// Value of a `LABEL:` field in a model response. The value runs from the
/// last line starting with the label up to the next line that starts with
/// any of `stop_labels`. Labels match case-insensitively; markdown bold
/// markers around the label are tolerated.
pub fn labeled_field(response: &str, label: &str, stop_labels: &[&str]) -> Option<String> {
    let strip = |line: &str| line.trim().trim_start_matches(['*', '#', ' ']).to_string();
    let starts_with_label = |line: &str, l: &str| {
        let s = strip(line);
        s.get(..l.len()).is_some_and(|p| p.eq_ignore_ascii_case(l))
            && s[l.len()..].trim_start_matches('*').starts_with(':')
    };
    let lines: Vec<&str> = response.lines().collect();
    let start = lines.iter().rposition(|l| starts_with_label(l, label))?;
    let first = strip(lines[start]);
    let after_colon = first[label.len()..].trim_start_matches('*');
    let mut value = vec![after_colon[1..].trim_matches(|c: char| c.is_whitespace() || c == '*').to_string()];
    for line in &lines[start + 1..] {
        if stop_labels.iter().any(|s| starts_with_label(line, s)) {
            break;
        }
        value.push(line.trim().to_string());
    }
    let joined = crate::text::normalize_ws(&value.join(" "));
    (!joined.is_empty()).then_some(joined)
}
