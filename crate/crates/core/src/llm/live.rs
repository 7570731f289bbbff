//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{LlmClient, LlmError, LlmRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Full URL of the chat completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            endpoint: String::new(),
            api_key: None,
            model: "gemini-2.5-pro".into(),
            max_retries: 4,
            backoff_ms: 500,
            timeout_secs: 180,
        }
    }
}

pub struct HttpLlmClient {
    cfg: LiveConfig,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(cfg: LiveConfig) -> Result<Self, LlmError> {
        if cfg.endpoint.is_empty() {
            return Err(LlmError::InvalidRequest("no LLM endpoint configured".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpLlmClient { cfg, http })
    }

    fn attempt(&self, request: &LlmRequest) -> Result<String, Attempt> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut req = self.http.post(&self.cfg.endpoint).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let v: Value = resp.json().map_err(|e| Attempt::Retry(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Attempt::Fatal("response has no choices[0].message.content".into()))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl LlmClient for HttpLlmClient {
    fn send(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => return Err(LlmError::Transport(msg)),
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(attempt, template = %request.template_id, %msg, "transport error");
                    last = msg;
                    if attempt < self.cfg.max_retries {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(LlmError::Transport(last))
    }
}
