//! Chat-completion and embedding clients.
//!
//! Every backend implements [`ChatBackend`] and/or [`Embedder`]. Wrappers
//! compose: a typical production stack is
//! `Cached<Retrying<Limited<HttpChatBackend>>>`, while tests use the
//! scripted and synthetic backends in [`mock`].

pub mod cache;
pub mod http;
pub mod mock;
pub mod retry;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CachedBackend, CachedEmbedder};
pub use http::{HttpChatBackend, HttpEmbedder};
pub use mock::{
    HashEmbedder, RecordingBackend, Reply, ScriptedBackend, ScriptedEmbedder, SyntheticBackend,
};
pub use retry::{ConcurrencyLimit, RetryPolicy, RetryingBackend};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    /// Network or provider failure. `retryable` marks rate limits, timeouts
    /// and 5xx responses.
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    /// The provider refused to answer (content filter, policy).
    #[error("provider refused: {0}")]
    Content(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl LlmError {
    pub fn transient(message: impl Into<String>) -> Self {
        LlmError::Transport { message: message.into(), retryable: true }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport { retryable: true, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
    /// Provider-side sampling seed, forwarded when the endpoint supports it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Catalog id of the prompt that produced this request. Never sent over
    /// the wire; used for call accounting and by the offline backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_id: model_id.into(),
            seed: None,
            prompt_id: None,
        }
    }

    pub fn with_prompt_id(mut self, id: impl Into<String>) -> Self {
        self.prompt_id = Some(id.into());
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(LlmError::InvalidRequest("at least one user message is required".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Text of the last user message.
    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub model_id: String,
    pub usage: Usage,
    #[serde(default)]
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_id: impl Into<String>) -> Result<Self, LlmError> {
        if values.is_empty() {
            return Err(LlmError::InvalidRequest("embedding has no dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LlmError::InvalidRequest("embedding contains non-finite values".into()));
        }
        Ok(EmbeddingVector { values, model_id: model_id.into() })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine of the angle between two embeddings. Zero vectors score 0.
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64, LlmError> {
        if self.dim() != other.dim() {
            return Err(LlmError::InvalidRequest(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let na = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError>;

    fn model_id(&self) -> &str;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        (**self).embed(text)
    }

    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        (**self).embed(text)
    }

    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

/// Cosine similarity of two texts under one embedder.
pub fn text_similarity(embedder: &dyn Embedder, a: &str, b: &str) -> Result<f64, LlmError> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    ea.cosine(&eb)
}

/// The two embedding roles used by scoring. They are configured
/// independently because the similarity and SimCSE columns come from
/// different sentence encoders.
#[derive(Clone)]
pub struct Embedders {
    pub similarity: Arc<dyn Embedder>,
    pub simcse: Arc<dyn Embedder>,
}

impl Embedders {
    pub fn new(similarity: Arc<dyn Embedder>, simcse: Arc<dyn Embedder>) -> Self {
        Embedders { similarity, simcse }
    }

    /// Both roles backed by the offline hash embedder.
    pub fn mock() -> Self {
        Embedders {
            similarity: Arc::new(HashEmbedder::new("mock-similarity")),
            simcse: Arc::new(HashEmbedder::new("mock-simcse")),
        }
    }
}

impl fmt::Debug for Embedders {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Embedders")
            .field("similarity", &self.similarity.model_id())
            .field("simcse", &self.simcse.model_id())
            .finish()
    }
}
