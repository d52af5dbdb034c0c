//! Minimal chat-completion client for real model endpoints.
//!
//! Speaks the common `POST {base}/chat/completions` shape with a bearer key
//! taken from the environment, so any vendor exposing that wire format can
//! back either channel. Not exercised by the test suite; fixtures run on
//! scripted mocks.

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, GatewayError};

/// Environment variable holding the Brain channel API key.
pub const BRAIN_KEY_ENV: &str = "PRIVGEMO_BRAIN_KEY";

#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            agent: reqwest::blocking::Client::new(),
        }
    }

    /// Builds a backend whose key comes from [`BRAIN_KEY_ENV`].
    pub fn from_env(base_url: &str, model: &str) -> Self {
        Self::new(base_url, model, std::env::var(BRAIN_KEY_ENV).ok())
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.agent.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        if !response.status().is_success() {
            return Err(GatewayError::Network(format!(
                "{} returned {}",
                url,
                response.status()
            )));
        }
        let completion: Completion = response
            .json()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        completion
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::Network("empty choices array".to_string()))
    }

    fn name(&self) -> &str {
        &self.model
    }
}
