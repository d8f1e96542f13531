//! The four-stage FOCUS pipeline and the Direct, CoT and CauView baselines.
//!
//! Stages run strictly in order for one sample:
//! DI (raw context) → mask the phrase → MEI (masked context) → ERI (masked
//! context with entities stochastically swapped) → SY (merge). Masking is
//! the intervention on the phrase, entity replacement the intervention on
//! the surrounding entities.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::{extract_entities, replace_entities, CounterfactualError};
use crate::llmclient::Message;
use crate::prompts::{ask, ids, labeled_field, AskError, Exchange, Prompter};
use crate::text;

pub const DEFAULT_MASK: &str = "[MASK]";
pub const DEFAULT_PLACEHOLDER: &str = "the term";
pub const DEFAULT_COT_INSTRUCTION: &str = "Let's think step by step.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StageId {
    Di,
    Mei,
    Eri,
    Sy,
    Baseline,
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageId::Di => "DI",
            StageId::Mei => "MEI",
            StageId::Eri => "ERI",
            StageId::Sy => "SY",
            StageId::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Error)]
pub enum FocusError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: StageId, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn stage_err(stage: StageId) -> impl Fn(AskError) -> FocusError {
    move |e| FocusError::Stage { stage, message: e.to_string() }
}

/// Stages removed for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub skip_mei: bool,
    pub skip_eri: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation { skip_mei: false, skip_eri: false };
    pub const SKIP_MEI: Ablation = Ablation { skip_mei: true, skip_eri: false };
    pub const SKIP_ERI: Ablation = Ablation { skip_mei: false, skip_eri: true };

    /// Row label in ablation tables.
    pub fn label(&self) -> &'static str {
        match (self.skip_mei, self.skip_eri) {
            (false, false) => "FOCUS",
            (true, false) => "w/o MEI",
            (false, true) => "w/o ERI",
            (true, true) => "w/o MEI+ERI",
        }
    }

    pub fn stage_calls(&self) -> usize {
        4 - usize::from(self.skip_mei) - usize::from(self.skip_eri)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.skip_mei, self.skip_eri) {
            (false, false) => "none",
            (true, false) => "skip_mei",
            (false, true) => "skip_eri",
            (true, true) => "skip_mei,skip_eri",
        })
    }
}

impl FromStr for Ablation {
    type Err = FocusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut a = Ablation::NONE;
        for part in s.split([',', '+']).map(|p| p.trim().to_ascii_lowercase().replace('-', "_")) {
            match part.as_str() {
                "none" | "" => {}
                "skip_mei" | "skip_mea" => a.skip_mei = true,
                "skip_eri" => a.skip_eri = true,
                other => return Err(FocusError::Config(format!("unknown ablation {other:?}"))),
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocusConfig {
    pub mask_token: String,
    pub placeholder_token: String,
    pub entity_dropout: f64,
    pub rng_seed: u64,
    /// Directory of prompt overrides; built-in prompts otherwise.
    pub prompt_catalog: Option<PathBuf>,
    pub ablation: Ablation,
    pub cot_instruction: String,
}

impl Default for FocusConfig {
    fn default() -> Self {
        FocusConfig {
            mask_token: DEFAULT_MASK.into(),
            placeholder_token: DEFAULT_PLACEHOLDER.into(),
            entity_dropout: 0.5,
            rng_seed: 0,
            prompt_catalog: None,
            ablation: Ablation::NONE,
            cot_instruction: DEFAULT_COT_INSTRUCTION.into(),
        }
    }
}

impl FocusConfig {
    pub fn validate(&self) -> Result<(), FocusError> {
        if !(0.0..=1.0).contains(&self.entity_dropout) {
            return Err(FocusError::Config("entity_dropout must be within [0, 1]".into()));
        }
        if self.mask_token.trim().is_empty() || self.placeholder_token.trim().is_empty() {
            return Err(FocusError::Config("mask and placeholder tokens must be non-empty".into()));
        }
        Ok(())
    }
}

/// What a method needs from a benchmark sample.
pub trait Sample {
    fn id(&self) -> &str;
    fn phrase(&self) -> &str;
    fn context(&self) -> &str;
    fn references(&self) -> Vec<String>;
}

impl Sample for crate::standardize::FactualRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn phrase(&self) -> &str {
        &self.phrase
    }
    fn context(&self) -> &str {
        &self.context
    }
    fn references(&self) -> Vec<String> {
        crate::standardize::FactualRecord::references(self)
    }
}

impl Sample for crate::counterfactual::CounterfactualRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn phrase(&self) -> &str {
        &self.phrase
    }
    fn context(&self) -> &str {
        &self.context
    }
    fn references(&self) -> Vec<String> {
        crate::counterfactual::CounterfactualRecord::references(self)
    }
}

fn explanation_field(r: &str) -> Result<String, String> {
    labeled_field(r, "EXPLANATION", &["GUESS", "ANALYSIS"]).ok_or_else(|| "missing EXPLANATION field".to_string())
}

fn guess_and_explanation(r: &str) -> Result<(String, String), String> {
    let guess = labeled_field(r, "GUESS", &["EXPLANATION"]).ok_or("missing GUESS field")?;
    Ok((explanation_field(r)?, guess))
}

pub fn direct_inquiry(context: &str, phrase: &str, p: &Prompter, log: &mut Vec<Exchange>) -> Result<String, FocusError> {
    if !text::contains_ci(context, phrase) {
        return Err(FocusError::Precondition(format!("phrase {phrase:?} does not occur in the context")));
    }
    p.ask("DI", ids::FOCUS_DI, &[("phrase", phrase), ("context", context)], log, explanation_field)
        .map_err(stage_err(StageId::Di))
}

/// Replace every case-insensitive occurrence of `phrase` with `mask`,
/// repeating until none is left.
pub fn mask_phrase(context: &str, phrase: &str, mask: &str) -> Result<String, FocusError> {
    if phrase.is_empty() {
        return Err(FocusError::Precondition("empty phrase".into()));
    }
    if text::contains_ci(mask, phrase) {
        return Err(FocusError::Config(format!("mask token {mask:?} contains the phrase")));
    }
    let re: Regex = text::ci_regex(phrase);
    let mut out = context.to_string();
    // Adjacent masks can rebuild the phrase; the bound stops that case.
    for _ in 0..=context.len() {
        if !re.is_match(&out) {
            return Ok(out);
        }
        out = re.replace_all(&out, regex::NoExpand(mask)).into_owned();
    }
    Err(FocusError::Config(format!("mask token {mask:?} recreates the phrase {phrase:?}")))
}

fn masked_query(
    stage: StageId,
    prompt_id: &str,
    context: &str,
    mask: &str,
    placeholder: &str,
    p: &Prompter,
    log: &mut Vec<Exchange>,
) -> Result<(String, String), FocusError> {
    if !context.contains(mask) {
        return Err(FocusError::Precondition(format!("context has no {mask} token")));
    }
    let vars = [("mask", mask), ("placeholder", placeholder), ("context", context)];
    p.ask(&stage.to_string(), prompt_id, &vars, log, guess_and_explanation).map_err(stage_err(stage))
}

/// Returns `(y_mei, w_hat_mei)`.
pub fn masked_entity_inquiry(
    x_masked: &str,
    config: &FocusConfig,
    p: &Prompter,
    log: &mut Vec<Exchange>,
) -> Result<(String, String), FocusError> {
    masked_query(StageId::Mei, ids::FOCUS_MEI, x_masked, &config.mask_token, &config.placeholder_token, p, log)
}

/// Independent Bernoulli(`dropout`) choice per entity from a seeded stream.
pub fn select_for_replacement(n: usize, dropout: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_bool(dropout.clamp(0.0, 1.0))).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacedEntity {
    pub entity: String,
    pub replacement: String,
    /// True when the entity was selected and swapped out.
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EriOutput {
    pub y_eri: String,
    pub w_hat_eri: String,
    pub x_replaced: String,
    pub replaced_entities: Vec<ReplacedEntity>,
}

/// Swap a seeded random subset of `entities` in the masked context, then
/// query the rewritten context like MEI.
pub fn entity_replacement_inquiry(
    x_masked: &str,
    entities: &[String],
    config: &FocusConfig,
    rng_seed: u64,
    p: &Prompter,
    log: &mut Vec<Exchange>,
) -> Result<EriOutput, FocusError> {
    for e in entities {
        if !x_masked.contains(e.as_str()) {
            return Err(FocusError::Precondition(format!("entity {e:?} is not in the masked context")));
        }
    }
    let picks = select_for_replacement(entities.len(), config.entity_dropout, rng_seed);
    let selected: Vec<crate::counterfactual::EntitySpan> = entities
        .iter()
        .zip(&picks)
        .filter(|(_, &s)| s)
        .map(|(e, _)| {
            let start = text::char_offset(x_masked, x_masked.find(e.as_str()).unwrap_or(0));
            crate::counterfactual::EntitySpan { text: e.clone(), start, end: start + e.chars().count() }
        })
        .collect();
    let (x_replaced, map) = if selected.is_empty() {
        (x_masked.to_string(), Vec::new())
    } else {
        replace_entities(x_masked, &selected, p, None, log).map_err(|e| FocusError::Stage {
            stage: StageId::Eri,
            message: e.to_string(),
        })?
    };
    let replaced_entities = entities
        .iter()
        .map(|e| match map.iter().find(|m| &m.original == e) {
            Some(m) => ReplacedEntity { entity: e.clone(), replacement: m.replacement.clone(), dropped: true },
            None => ReplacedEntity { entity: e.clone(), replacement: e.clone(), dropped: false },
        })
        .collect();
    let (y_eri, w_hat_eri) =
        masked_query(StageId::Eri, ids::FOCUS_ERI, &x_replaced, &config.mask_token, &config.placeholder_token, p, log)?;
    Ok(EriOutput { y_eri, w_hat_eri, x_replaced, replaced_entities })
}

/// Merge the available stage outputs, labeled by origin in DI, MEI, ERI
/// order, into one final explanation.
pub fn synthesize(
    y_di: Option<&str>,
    y_mei: Option<(&str, &str)>,
    y_eri: Option<(&str, &str)>,
    phrase: &str,
    placeholder: &str,
    p: &Prompter,
    log: &mut Vec<Exchange>,
) -> Result<String, FocusError> {
    let mut sections = Vec::new();
    if let Some(y) = y_di {
        sections.push(format!("[Direct inquiry, full sentence]\n{y}"));
    }
    if let Some((y, guess)) = y_mei {
        sections.push(format!("[Masked inquiry, expression hidden; suggested filler: {guess}]\n{y}"));
    }
    if let Some((y, guess)) = y_eri {
        sections.push(format!("[Entity replacement inquiry, expression hidden and entities swapped; suggested filler: {guess}]\n{y}"));
    }
    if sections.is_empty() {
        return Err(FocusError::Precondition("synthesis needs at least one stage output".into()));
    }
    let analyses = sections.join("\n\n");
    let vars = [("phrase", phrase), ("placeholder", placeholder), ("analyses", analyses.as_str())];
    p.ask("SY", ids::FOCUS_SY, &vars, log, explanation_field).map_err(stage_err(StageId::Sy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusTrace {
    pub sample_id: String,
    pub phrase: String,
    pub context: String,
    pub ablation: Ablation,
    pub y_di: String,
    pub x_masked: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_mei: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_hat_mei: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_replaced: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced_entities: Option<Vec<ReplacedEntity>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_eri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_hat_eri: Option<String>,
    pub y_fs: String,
    /// Versioned ids of the prompts used.
    pub prompt_versions: BTreeMap<String, u32>,
    pub exchanges: Vec<Exchange>,
}

fn prompt_versions(p: &Prompter, log: &[Exchange]) -> BTreeMap<String, u32> {
    log.iter()
        .filter_map(|x| p.catalog.get(&x.prompt_id).ok().map(|t| (t.id.clone(), t.version)))
        .collect()
}

/// Run DI → mask → MEI → ERI → SY on one sample, honouring the ablation.
pub fn run_focus(sample: &dyn Sample, p: &Prompter, config: &FocusConfig) -> Result<(String, FocusTrace), FocusError> {
    config.validate()?;
    let seed = text::derive_seed(config.rng_seed, sample.id());
    let p = p.reseeded(seed);
    let (phrase, context) = (sample.phrase(), sample.context());
    let mut log = Vec::new();

    let y_di = direct_inquiry(context, phrase, &p, &mut log)?;
    let x_masked = mask_phrase(context, phrase, &config.mask_token)?;

    let mei = if config.ablation.skip_mei {
        None
    } else {
        Some(masked_entity_inquiry(&x_masked, config, &p, &mut log)?)
    };

    let eri = if config.ablation.skip_eri {
        None
    } else {
        let spans = extract_entities(&x_masked, Some(&config.mask_token), &p, &mut log).map_err(|e| match e {
            CounterfactualError::NoEntities => unreachable!("extraction never reports NoEntities"),
            other => FocusError::Stage { stage: StageId::Eri, message: other.to_string() },
        })?;
        let entities: Vec<String> = spans.into_iter().map(|s| s.text).collect();
        Some(entity_replacement_inquiry(&x_masked, &entities, config, seed, &p, &mut log)?)
    };

    let y_fs = synthesize(
        Some(&y_di),
        mei.as_ref().map(|(y, g)| (y.as_str(), g.as_str())),
        eri.as_ref().map(|o| (o.y_eri.as_str(), o.w_hat_eri.as_str())),
        phrase,
        &config.placeholder_token,
        &p,
        &mut log,
    )?;

    let (y_mei, w_hat_mei) = mei.map_or((None, None), |(y, g)| (Some(y), Some(g)));
    let trace = FocusTrace {
        sample_id: sample.id().to_string(),
        phrase: phrase.to_string(),
        context: context.to_string(),
        ablation: config.ablation,
        y_di,
        x_masked,
        y_mei,
        w_hat_mei,
        x_replaced: eri.as_ref().map(|o| o.x_replaced.clone()),
        replaced_entities: eri.as_ref().map(|o| o.replaced_entities.clone()),
        y_eri: eri.as_ref().map(|o| o.y_eri.clone()),
        w_hat_eri: eri.map(|o| o.w_hat_eri),
        y_fs: y_fs.clone(),
        prompt_versions: prompt_versions(&p, &log),
        exchanges: log,
    };
    Ok((y_fs, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Focus,
    Direct,
    Cot,
    #[serde(rename = "cauview")]
    CauView,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Focus => "FOCUS",
            Method::Direct => "Direct",
            Method::Cot => "CoT",
            Method::CauView => "CauView",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Focus => "focus",
            Method::Direct => "direct",
            Method::Cot => "cot",
            Method::CauView => "cauview",
        })
    }
}

impl FromStr for Method {
    type Err = FocusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "focus" => Ok(Method::Focus),
            "direct" => Ok(Method::Direct),
            "cot" => Ok(Method::Cot),
            "cauview" => Ok(Method::CauView),
            other => Err(FocusError::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub sample_id: String,
    pub method: Method,
    pub prediction: String,
    pub prompt_versions: BTreeMap<String, u32>,
    pub exchanges: Vec<Exchange>,
}

/// Direct and CoT send one prompt; CauView sends an entity analysis prompt
/// and then an interpretation prompt in the same conversation.
pub fn run_baseline(
    sample: &dyn Sample,
    method: Method,
    p: &Prompter,
    config: &FocusConfig,
) -> Result<(String, BaselineTrace), FocusError> {
    let seed = text::derive_seed(config.rng_seed, sample.id());
    let p = p.reseeded(seed);
    let (phrase, context) = (sample.phrase(), sample.context());
    let mut log = Vec::new();
    let err = stage_err(StageId::Baseline);
    let prediction = match method {
        Method::Focus => return Err(FocusError::Config("focus is not a baseline".into())),
        Method::Direct => p
            .ask("direct", ids::BASELINE_DIRECT, &[("phrase", phrase), ("context", context)], &mut log, explanation_field)
            .map_err(err)?,
        Method::Cot => {
            let vars = [("reasoning_instruction", config.cot_instruction.as_str()), ("phrase", phrase), ("context", context)];
            p.ask("cot", ids::BASELINE_COT, &vars, &mut log, explanation_field).map_err(err)?
        }
        Method::CauView => {
            let first = p
                .request(ids::BASELINE_CAUVIEW_ANALYSIS, &[("phrase", phrase), ("context", context)])
                .map_err(|e| err(e.into()))?;
            let analysis = ask(p.llm, "cauview.analysis", &first, 1, &mut log, |r| {
                let a = r.trim();
                if a.is_empty() { Err("empty analysis".to_string()) } else { Ok(a.to_string()) }
            })
            .map_err(&err)?;
            let follow = p.catalog.get(ids::BASELINE_CAUVIEW_INTERPRET).and_then(|t| t.render(&[("phrase", phrase)]));
            let follow = follow.map_err(|e| err(e.into()))?;
            let mut second = first.clone().with_prompt_id(ids::BASELINE_CAUVIEW_INTERPRET);
            second.messages.push(Message::assistant(analysis));
            second.messages.push(Message::user(follow));
            ask(p.llm, "cauview.interpret", &second, 1, &mut log, explanation_field).map_err(err)?
        }
    };
    let trace = BaselineTrace {
        sample_id: sample.id().to_string(),
        method,
        prediction: prediction.clone(),
        prompt_versions: prompt_versions(&p, &log),
        exchanges: log,
    };
    Ok((prediction, trace))
}
