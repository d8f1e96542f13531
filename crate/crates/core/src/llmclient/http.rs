//! Chat-completions and embeddings over HTTP.
//!
//! Requests follow the widely implemented `POST {base}/chat/completions` and
//! `POST {base}/embeddings` shapes, so any compatible endpoint works.
//! Credentials and endpoints come from `FOCUS_API_KEY`, `FOCUS_API_BASE` and
//! `FOCUS_EMBED_BASE`.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, ChatResponse, Embedder, EmbeddingVector, LlmError, Usage};

pub const ENV_API_KEY: &str = "FOCUS_API_KEY";
pub const ENV_API_BASE: &str = "FOCUS_API_BASE";
pub const ENV_EMBED_BASE: &str = "FOCUS_EMBED_BASE";

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// JSON body for a chat-completions call.
pub fn chat_request_body(request: &ChatRequest) -> Value {
    let mut body = json!({
        "model": request.model_id,
        "messages": request.messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    body
}

#[derive(Deserialize)]
struct WireChoice {
    message: Option<WireMessage>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    refusal: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireChat {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.chars().take(300).collect())
}

/// Map a status code and raw body to an error, or `None` on success.
pub fn classify_status(status: u16, body: &str) -> Option<LlmError> {
    match status {
        200..=299 => None,
        408 | 409 | 429 | 500..=599 => Some(LlmError::Transport {
            message: format!("HTTP {status}: {}", error_message(body)),
            retryable: true,
        }),
        400 if body.contains("content_filter") || body.contains("content_policy") => {
            Some(LlmError::Content(error_message(body)))
        }
        401 | 403 => Some(LlmError::Config(format!("HTTP {status}: {}", error_message(body)))),
        _ => Some(LlmError::Transport {
            message: format!("HTTP {status}: {}", error_message(body)),
            retryable: false,
        }),
    }
}

/// Decode a chat-completions response body.
pub fn parse_chat_response(status: u16, body: &str, requested_model: &str) -> Result<ChatResponse, LlmError> {
    if let Some(e) = classify_status(status, body) {
        return Err(e);
    }
    let wire: WireChat = serde_json::from_str(body)
        .map_err(|e| LlmError::Transport { message: format!("malformed response: {e}"), retryable: false })?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::Transport { message: "response has no choices".into(), retryable: false })?;
    if choice.finish_reason.as_deref() == Some("content_filter") {
        return Err(LlmError::Content("response withheld by content filter".into()));
    }
    let message = choice
        .message
        .ok_or_else(|| LlmError::Transport { message: "choice has no message".into(), retryable: false })?;
    if let Some(refusal) = message.refusal.filter(|r| !r.is_empty()) {
        return Err(LlmError::Content(refusal));
    }
    let content = message
        .content
        .ok_or_else(|| LlmError::Transport { message: "message has no content".into(), retryable: false })?;
    let usage = wire
        .usage
        .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
        .unwrap_or_default();
    Ok(ChatResponse {
        content,
        model_id: wire.model.unwrap_or_else(|| requested_model.to_string()),
        usage,
        cached: false,
    })
}

pub fn embedding_request_body(model_id: &str, text: &str) -> Value {
    json!({ "model": model_id, "input": text })
}

pub fn parse_embedding_response(status: u16, body: &str, model_id: &str) -> Result<EmbeddingVector, LlmError> {
    if let Some(e) = classify_status(status, body) {
        return Err(e);
    }
    let v: Value = serde_json::from_str(body)
        .map_err(|e| LlmError::Transport { message: format!("malformed response: {e}"), retryable: false })?;
    let values: Vec<f64> = v
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::Transport { message: "response has no embedding".into(), retryable: false })?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| LlmError::Transport { message: "non-numeric embedding".into(), retryable: false }))
        .collect::<Result<_, _>>()?;
    EmbeddingVector::new(values, model_id)
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn post(agent: &ureq::Agent, url: &str, api_key: Option<&str>, body: &Value) -> Result<(u16, String), LlmError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = req
        .send(body.to_string())
        .map_err(|e| LlmError::transient(format!("request to {url} failed: {e}")))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| LlmError::transient(format!("reading response from {url} failed: {e}")))?;
    Ok((status, text))
}

fn join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

pub struct HttpChatBackend {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        HttpChatBackend { base_url: base_url.into(), api_key, agent: agent(DEFAULT_TIMEOUT) }
    }

    /// Configure from `FOCUS_API_BASE` / `FOCUS_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(ENV_API_BASE)
            .map_err(|_| LlmError::Config(format!("{ENV_API_BASE} is not set")))?;
        let key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        if key.is_none() {
            return Err(LlmError::Config(format!("{ENV_API_KEY} is not set")));
        }
        Ok(Self::new(base, key))
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let url = join(&self.base_url, "chat/completions");
        let (status, body) = post(&self.agent, &url, self.api_key.as_deref(), &chat_request_body(request))?;
        parse_chat_response(status, &body, &request.model_id)
    }
}

pub struct HttpEmbedder {
    base_url: String,
    api_key: Option<String>,
    model_id: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model_id: impl Into<String>) -> Self {
        HttpEmbedder {
            base_url: base_url.into(),
            api_key,
            model_id: model_id.into(),
            agent: agent(DEFAULT_TIMEOUT),
        }
    }

    /// Configure from `FOCUS_EMBED_BASE` (falling back to `FOCUS_API_BASE`).
    pub fn from_env(model_id: impl Into<String>) -> Result<Self, LlmError> {
        let base = std::env::var(ENV_EMBED_BASE)
            .or_else(|_| std::env::var(ENV_API_BASE))
            .map_err(|_| LlmError::Config(format!("{ENV_EMBED_BASE} is not set")))?;
        let key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(Self::new(base, key, model_id))
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::InvalidRequest("cannot embed empty text".into()));
        }
        let url = join(&self.base_url, "embeddings");
        let body = embedding_request_body(&self.model_id, text);
        let (status, resp) = post(&self.agent, &url, self.api_key.as_deref(), &body)?;
        parse_embedding_response(status, &resp, &self.model_id)
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::Message;

    #[test]
    fn request_body_has_chat_completions_shape() {
        let req = ChatRequest::new("gpt-x", vec![Message::system("s"), Message::user("u")])
            .with_prompt_id("focus.di")
            .with_seed(Some(7));
        let body = chat_request_body(&req);
        assert_eq!(body["model"], "gpt-x");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "u");
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["max_tokens"], 512);
        assert_eq!(body["seed"], 7);
        assert!(body.get("prompt_id").is_none());
    }

    #[test]
    fn parses_success_body() {
        let body = r#"{"model":"gpt-x-0613","choices":[{"message":{"role":"assistant","content":"hello"},"finish_reason":"stop"}],"usage":{"prompt_tokens":5,"completion_tokens":1}}"#;
        let r = parse_chat_response(200, body, "gpt-x").unwrap();
        assert_eq!(r.content, "hello");
        assert_eq!(r.model_id, "gpt-x-0613");
        assert_eq!(r.usage, Usage { prompt_tokens: 5, completion_tokens: 1 });
    }

    #[test]
    fn rate_limit_is_retryable_and_refusal_is_content_error() {
        let e = parse_chat_response(429, r#"{"error":{"message":"slow down"}}"#, "m").unwrap_err();
        assert!(e.is_retryable());
        assert!(e.to_string().contains("slow down"));
        let body = r#"{"choices":[{"message":{"content":null,"refusal":"I can't help"}}]}"#;
        assert_eq!(parse_chat_response(200, body, "m").unwrap_err(), LlmError::Content("I can't help".into()));
        let filtered = r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#;
        assert!(matches!(parse_chat_response(200, filtered, "m"), Err(LlmError::Content(_))));
    }

    #[test]
    fn malformed_body_is_permanent_error() {
        let e = parse_chat_response(200, "<html>", "m").unwrap_err();
        assert!(!e.is_retryable());
    }

    #[test]
    fn parses_embedding_body() {
        let body = r#"{"data":[{"embedding":[0.5,-0.25,1.0],"index":0}]}"#;
        let v = parse_embedding_response(200, body, "mpnet").unwrap();
        assert_eq!(v.values, vec![0.5, -0.25, 1.0]);
        assert_eq!(v.model_id, "mpnet");
    }
}
