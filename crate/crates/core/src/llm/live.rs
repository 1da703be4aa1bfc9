use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, ChatBackend, CompletionRequest};

pub const ENV_API_KEY: &str = "BRANCH_API_KEY";
pub const ENV_BASE_URL: &str = "BRANCH_BASE_URL";
pub const ENV_MODEL: &str = "BRANCH_MODEL";

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    /// Overrides the model named in each request when set.
    pub model: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub max_concurrency: usize,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            base_url: "https://api.openai.com/v1".to_string(),
            api_key: None,
            model: None,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            max_concurrency: 4,
        }
    }
}

impl LiveConfig {
    /// Reads `BRANCH_API_KEY`, `BRANCH_BASE_URL` and `BRANCH_MODEL`.
    pub fn from_env() -> Self {
        let mut cfg = LiveConfig::default();
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            cfg.base_url = url;
        }
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        cfg.model = std::env::var(ENV_MODEL).ok().filter(|m| !m.is_empty());
        cfg
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct LiveBackend {
    cfg: LiveConfig,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(cfg: LiveConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
        LiveBackend { cfg, agent }
    }

    pub fn from_env() -> Self {
        LiveBackend::new(LiveConfig::from_env())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    /// Request body for one exchange.
    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        let model = self.cfg.model.clone().unwrap_or_else(|| request.params.model.clone());
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": request.params.temperature,
        });
        if let Some(max) = request.params.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, BackendError> {
        let mut req = self
            .agent
            .post(&self.endpoint())
            .set("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match req.send_json(body.clone()) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(BackendError::Status { status, body });
            }
            Err(ureq::Error::Transport(t)) => return Err(BackendError::Transport(t.to_string())),
        };
        let value: Value = response
            .into_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let body = self.request_body(request);
        let mut backoff = self.cfg.initial_backoff;
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < self.cfg.max_attempts => {
                    log::warn!("chat completion attempt {attempt} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn max_concurrency(&self) -> usize {
        self.cfg.max_concurrency
    }
}
