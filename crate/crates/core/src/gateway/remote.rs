//! Chat-completion backend speaking the common `messages` wire shape. The
//! HTTP layer is behind [`Transport`] so the engine stays I/O-agnostic and
//! tests can inject transports that count or abort.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{Backend, BackendError};
use super::request::ModelRequest;

pub const API_KEY_ENV: &str = "SENTINEL_MODEL_API_KEY";
pub const URL_ENV: &str = "SENTINEL_MODEL_URL";
pub const MODEL_ENV: &str = "SENTINEL_MODEL_NAME";

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
        timeout: Duration,
    ) -> Result<String, BackendError>;
}

/// Transport that refuses every call and counts attempts.
#[derive(Default)]
pub struct AbortTransport {
    attempts: AtomicUsize,
}

impl AbortTransport {
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl Transport for AbortTransport {
    fn post_json(&self, url: &str, _: &[(String, String)], _: &str, _: Duration) -> Result<String, BackendError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(BackendError::Fatal(format!("network use forbidden (attempted POST {url})")))
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct ChatCompletionBackend {
    url: String,
    api_key: Option<String>,
    model: String,
    transport: Arc<dyn Transport>,
}

impl ChatCompletionBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, transport: Arc<dyn Transport>) -> Self {
        ChatCompletionBackend {
            url: url.into(),
            api_key,
            model: model.into(),
            transport,
        }
    }

    /// Reads URL, model name and key from the environment.
    pub fn from_env(transport: Arc<dyn Transport>) -> Result<Self, String> {
        let url = std::env::var(URL_ENV).map_err(|_| format!("{URL_ENV} is not set"))?;
        let model = std::env::var(MODEL_ENV).unwrap_or_else(|_| "gpt-4o-mini".to_string());
        let key = std::env::var(API_KEY_ENV).ok();
        Ok(Self::new(url, model, key, transport))
    }

    pub fn request_body(&self, request: &ModelRequest) -> String {
        let body = ChatRequestBody {
            model: &self.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &request.system_prompt,
                },
                ChatMessage {
                    role: "user",
                    content: &request.user_prompt,
                },
            ],
            temperature: request.decoding.temperature,
            max_tokens: request.decoding.max_tokens,
        };
        serde_json::to_string(&body).expect("chat body serializes")
    }
}

pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let parsed: ChatResponseBody = serde_json::from_str(body)
        .map_err(|e| BackendError::Transport(format!("unreadable chat response: {e}")))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Transport("chat response has no content".into()))
}

impl Backend for ChatCompletionBackend {
    fn call(&self, request: &ModelRequest, timeout: Duration) -> Result<String, BackendError> {
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let body = self.request_body(request);
        let response = self.transport.post_json(&self.url, &headers, &body, timeout)?;
        parse_chat_response(&response)
    }
}
