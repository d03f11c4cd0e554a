//! Minimal client for chat-completion style HTTP services, shared by the
//! labeling teachers and the impression generator.
//!
//! Endpoints are configured from environment variables `<PREFIX>_BASE_URL`,
//! `<PREFIX>_MODEL` and (optionally) `<PREFIX>_API_KEY`. Requests go to
//! `{base_url}/chat/completions` with an OpenAI-compatible JSON body; replies
//! are read from `choices[*].message.content`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint not configured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
        }
    }

    pub fn from_env(prefix: &str) -> Result<Self, ChatError> {
        let var = |name: &str| std::env::var(format!("{prefix}_{name}")).ok().filter(|v| !v.is_empty());
        let base_url = var("BASE_URL").ok_or_else(|| ChatError::Config(format!("{prefix}_BASE_URL unset")))?;
        let model = var("MODEL").ok_or_else(|| ChatError::Config(format!("{prefix}_MODEL unset")))?;
        Ok(Self {
            base_url,
            model,
            api_key: var("API_KEY"),
        })
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Content {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Content,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: Content::Text(text.into()),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: Content::Text(text.into()),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: Content::Text(text.into()),
        }
    }

    /// User turn with text followed by a base64 PNG attachment.
    pub fn user_with_png(text: impl Into<String>, png_base64: &str) -> Self {
        Self {
            role: "user".into(),
            content: Content::Parts(vec![
                ContentPart::Text { text: text.into() },
                ContentPart::ImageUrl {
                    image_url: ImageUrl {
                        url: format!("data:image/png;base64,{png_base64}"),
                    },
                },
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    /// Vendor extensions merged into the top-level body.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

pub trait ChatClient: Send + Sync {
    /// Returns one reply per requested choice.
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, ChatError>;

    /// Whether image parts may be attached to user messages.
    fn supports_images(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "chat"
    }
}

pub struct HttpChatClient {
    name: String,
    endpoint: Endpoint,
    agent: ureq::Agent,
    max_attempts: u32,
    backoff: Duration,
    multimodal: bool,
    audit: Option<Mutex<BufWriter<File>>>,
}

impl HttpChatClient {
    pub fn new(name: impl Into<String>, endpoint: Endpoint, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            name: name.into(),
            endpoint,
            agent,
            max_attempts: 3,
            backoff: Duration::from_millis(250),
            multimodal: false,
            audit: None,
        }
    }

    pub fn with_retries(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn with_multimodal(mut self, on: bool) -> Self {
        self.multimodal = on;
        self
    }

    /// Appends redacted request/response records to `path` (JSON lines).
    pub fn with_audit_log(mut self, path: &Path) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.audit = Some(Mutex::new(BufWriter::new(f)));
        Ok(self)
    }

    fn redact(&self, s: &str) -> String {
        match &self.endpoint.api_key {
            Some(k) if !k.is_empty() => s.replace(k.as_str(), "[REDACTED]"),
            _ => s.to_string(),
        }
    }

    fn audit(&self, body: &Value, outcome: &str) {
        let Some(sink) = &self.audit else { return };
        let line = json!({
            "client": self.name,
            "url": self.endpoint.completions_url(),
            "request": body,
            "response": outcome,
        });
        let line = self.redact(&line.to_string());
        if let Ok(mut w) = sink.lock() {
            let _ = writeln!(w, "{line}");
            let _ = w.flush();
        }
    }

    fn attempt(&self, body: &Value) -> Result<String, ChatError> {
        let mut req = self.agent.post(&self.endpoint.completions_url());
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ChatError::Unavailable(self.redact(&e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ChatError::Unavailable(e.to_string()))?;
        if status >= 400 {
            return Err(ChatError::Status { status, body: text });
        }
        Ok(text)
    }
}

fn parse_choices(text: &str) -> Result<Vec<String>, ChatError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ChatError::Malformed(e.to_string()))?;
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| ChatError::Malformed("missing choices".into()))?;
    choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| ChatError::Malformed("choice without message content".into()))
        })
        .collect()
}

fn retryable(e: &ChatError) -> bool {
    match e {
        ChatError::Unavailable(_) => true,
        ChatError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, ChatError> {
        let mut body = serde_json::to_value(req).map_err(|e| ChatError::Malformed(e.to_string()))?;
        body["model"] = Value::String(self.endpoint.model.clone());
        let mut last = None;
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(&body).and_then(|t| parse_choices(&t).map(|c| (t, c))) {
                Ok((text, choices)) => {
                    self.audit(&body, &text);
                    return Ok(choices);
                }
                Err(e) => {
                    log::warn!("{}: attempt {} failed: {e}", self.name, attempt + 1);
                    self.audit(&body, &format!("error: {e}"));
                    let again = retryable(&e);
                    last = Some(e);
                    if !again {
                        break;
                    }
                }
            }
        }
        Err(last.unwrap_or_else(|| ChatError::Unavailable("no attempts made".into())))
    }

    fn supports_images(&self) -> bool {
        self.multimodal
    }

    fn name(&self) -> &str {
        &self.name
    }
}
