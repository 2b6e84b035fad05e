//! Chat-completion client for text-only and vision-language backends.
//!
//! Every request is fingerprinted over the fields that influence the answer
//! and resolved through a [`Cassette`], so replayed runs never open a socket.

use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cassette::{Cassette, RemoteCaller, RemoteError};
use crate::digest::{json_hash, sha256_hex};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

/// Request body layout for a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireDialect {
    /// `{"type": "image", "image_b64", "mime_type"}` content parts.
    #[default]
    Harness,
    /// `{"type": "image_url", "image_url": {"url": "data:..."}}` content parts.
    OpenAi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatBackend {
    pub id: String,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub dialect: WireDialect,
}

/// Encoded image bytes plus their media type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Arc<[u8]>,
    pub mime: String,
    sha256: String,
}

impl ImagePayload {
    pub fn new(bytes: impl Into<Arc<[u8]>>, mime: impl Into<String>) -> Self {
        let bytes = bytes.into();
        let sha256 = sha256_hex(&bytes);
        Self {
            bytes,
            mime: mime.into(),
            sha256,
        }
    }

    pub fn png(bytes: impl Into<Arc<[u8]>>) -> Self {
        Self::new(bytes, "image/png")
    }

    pub fn sha256(&self) -> &str {
        &self.sha256
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub prompt: String,
    pub image: Option<ImagePayload>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Text request with the deterministic defaults (temperature 0, 2048 tokens).
    pub fn text(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            image: None,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn vision(model_id: impl Into<String>, prompt: impl Into<String>, image: ImagePayload) -> Self {
        Self {
            image: Some(image),
            ..Self::text(model_id, prompt)
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    /// Hash of (model, prompt, image hash, temperature, max tokens).
    pub fn fingerprint(&self) -> String {
        json_hash(&json!({
            "model_id": self.model_id,
            "prompt": self.prompt,
            "image_sha256": self.image.as_ref().map(ImagePayload::sha256),
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }))
    }

    pub fn wire_body(&self, dialect: WireDialect) -> Value {
        let mut content = vec![json!({"type": "text", "text": self.prompt})];
        if let Some(img) = &self.image {
            let b64 = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
            content.push(match dialect {
                WireDialect::Harness => json!({
                    "type": "image",
                    "image_b64": b64,
                    "mime_type": img.mime,
                }),
                WireDialect::OpenAi => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{};base64,{b64}", img.mime)},
                }),
            });
        }
        json!({
            "model": self.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("malformed chat response: {0}")]
    MalformedResponse(String),
    #[error("vision request without an image")]
    MissingImage,
    #[error("text request carries an image")]
    UnexpectedImage,
}

/// Extract the assistant text from a chat-completion response body.
pub fn parse_chat_response(body: &str) -> Result<String, ClientError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ClientError::MalformedResponse("choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(ClientError::MalformedResponse("content is not text".into())),
    }
}

/// Build the response body a chat backend would return for `content`.
pub fn chat_response_body(content: &str) -> String {
    json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
    })
    .to_string()
}

pub struct ModelClient {
    backend: ChatBackend,
    cassette: Cassette,
    caller: RemoteCaller,
}

impl ModelClient {
    pub fn new(backend: ChatBackend, cassette: Cassette, caller: RemoteCaller) -> Self {
        Self {
            backend,
            cassette,
            caller,
        }
    }

    pub fn backend(&self) -> &ChatBackend {
        &self.backend
    }

    pub fn network_calls(&self) -> u64 {
        self.caller.network_calls()
    }

    /// Request pre-filled with this backend's model id.
    pub fn text_request(&self, prompt: impl Into<String>) -> ChatRequest {
        ChatRequest::text(self.backend.model.clone(), prompt)
    }

    pub fn vision_request(&self, prompt: impl Into<String>, image: ImagePayload) -> ChatRequest {
        ChatRequest::vision(self.backend.model.clone(), prompt, image)
    }

    pub fn query_vision(&self, request: &ChatRequest) -> Result<String, ClientError> {
        if request.image.is_none() {
            return Err(ClientError::MissingImage);
        }
        self.query(request)
    }

    pub fn query_text(&self, request: &ChatRequest) -> Result<String, ClientError> {
        if request.image.is_some() {
            return Err(ClientError::UnexpectedImage);
        }
        self.query(request)
    }

    fn query(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let token = self
            .backend
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        let body = self.caller.call(
            &self.cassette,
            &request.fingerprint(),
            &self.backend.endpoint,
            token.as_deref(),
            || serde_json::to_vec(&request.wire_body(self.backend.dialect)).expect("serializable"),
        )?;
        parse_chat_response(&body)
    }
}
