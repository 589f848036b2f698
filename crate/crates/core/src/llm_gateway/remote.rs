use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{request_digest, ChatBackend, ChatRequest, Completion, GatewayError, Usage};

/// Exponential backoff: attempt `n` (0-based) waits `base * factor^n` before
/// the next try.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base: Duration::from_millis(500), factor: 2, max_attempts: 4 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base * self.factor.saturating_pow(attempt)
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint.
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl RemoteBackend {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`.
    pub fn new(
        base_url: &str,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let base = base_url.trim_end_matches('/');
        let endpoint =
            if base.ends_with("/chat/completions") { base.to_string() } else { format!("{base}/chat/completions") };
        Ok(Self { client, endpoint, api_key, retry })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<Completion, Attempt> {
        let mut rb = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {}", status.as_u16())));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Fatal(GatewayError::Http {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            }));
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(GatewayError::BadResponse(e.to_string())))?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(GatewayError::BadResponse("no choices".into())))?;
        let usage = wire
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(Completion { text: content, usage })
    }
}

enum Attempt {
    Retry(String),
    Fatal(GatewayError),
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        let mut body = json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let digest = request_digest(&req.messages);
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    tracing::warn!(%digest, attempt, %reason, "chat request failed, retrying");
                    last = reason;
                    if attempt + 1 < self.retry.max_attempts {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(GatewayError::Unavailable { attempts: self.retry.max_attempts, last })
    }

    fn describe(&self) -> String {
        format!("remote({})", self.endpoint)
    }
}
