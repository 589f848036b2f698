//! Chat-completion gateway.
//!
//! A [`Gateway`] wraps exactly one backend:
//!
//! * [`RemoteBackend`] talks to an OpenAI-compatible `/v1/chat/completions`
//!   endpoint with bounded exponential backoff.
//! * [`ReplayBackend`] serves responses from a recorded JSONL fixture by
//!   request sequence index, optionally verifying a digest of the prompt.
//! * [`ScriptedBackend`] pops canned responses from a queue.
//!
//! Any backend can be wrapped with a recorder that tees every exchange into a
//! replay fixture, so a run produced once against a live model (or a script)
//! can be re-executed offline.

mod remote;
mod replay;
mod scripted;
pub mod template;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use remote::{RemoteBackend, RetryPolicy};
pub use replay::{FixtureEntry, ReplayBackend};
pub use scripted::ScriptedBackend;
pub use template::{render_template, vars, TemplateError, TemplateVars};

pub const ENV_API_KEY: &str = "STACKPLANNER_LLM_API_KEY";
pub const ENV_BASE_URL: &str = "STACKPLANNER_LLM_BASE_URL";
pub const ENV_MODEL: &str = "STACKPLANNER_LLM_MODEL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self { role: Role::Tool, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl ChatRequest {
    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if let Some(m) = self.messages.iter().find(|m| m.content.is_empty() && m.role != Role::Assistant) {
            return Err(GatewayError::InvalidRequest(format!("empty {:?} message", m.role)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("gateway returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed gateway response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay mismatch at request {index}: expected digest {expected}, got {actual}")]
    ReplayMismatch { index: usize, expected: String, actual: String },
    #[error("replay fixture exhausted at request {index}")]
    ReplayExhausted { index: usize },
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("script has no reply left for `{0}` requests")]
    ScriptChannelExhausted(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

/// One concrete completion source.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError>;

    fn describe(&self) -> String;
}

/// Something that can answer a list of messages. Implemented by [`Gateway`]
/// and by metering wrappers used inside the runtime.
pub trait ChatClient {
    fn chat(&self, messages: Vec<ChatMessage>) -> Result<Completion, GatewayError>;
}

/// Request defaults applied by [`Gateway::chat`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestDefaults {
    pub model: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl Default for RequestDefaults {
    fn default() -> Self {
        Self { model: "gpt-4o-mini".into(), temperature: 0.0, seed: None, max_tokens: 2048 }
    }
}

/// Hex SHA-256 over the rendered messages of a request.
pub fn request_digest(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(serde_json::to_string(&m.role).unwrap_or_default().as_bytes());
        h.update([0u8]);
        h.update(m.content.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

struct Recorder {
    out: Mutex<(BufWriter<File>, usize)>,
}

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    defaults: RequestDefaults,
    recorder: Option<Recorder>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.describe())
            .field("defaults", &self.defaults)
            .field("recording", &self.recorder.is_some())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static, defaults: RequestDefaults) -> Self {
        Self { backend: Box::new(backend), defaults, recorder: None }
    }

    pub fn scripted<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(ScriptedBackend::new(responses), RequestDefaults::default())
    }

    /// Tee every successful exchange into a replay fixture at `path`.
    pub fn record_to(mut self, path: &Path) -> Result<Self, GatewayError> {
        let file = File::create(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        self.recorder = Some(Recorder { out: Mutex::new((BufWriter::new(file), 0)) });
        Ok(self)
    }

    pub fn defaults(&self) -> &RequestDefaults {
        &self.defaults
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        req.validate()?;
        let digest = request_digest(&req.messages);
        tracing::debug!(backend = %self.backend.describe(), %digest, "chat request");
        let completion = self.backend.complete(req)?;
        if let Some(rec) = &self.recorder {
            let mut guard = rec.out.lock().expect("recorder poisoned");
            let (writer, index) = &mut *guard;
            let entry = FixtureEntry {
                index: *index,
                request_digest: digest,
                response_text: completion.text.clone(),
                prompt_tokens: completion.usage.prompt_tokens,
                completion_tokens: completion.usage.completion_tokens,
            };
            let line = serde_json::to_string(&entry).map_err(|e| GatewayError::Fixture(e.to_string()))?;
            writeln!(writer, "{line}")
                .and_then(|_| writer.flush())
                .map_err(|e| GatewayError::Fixture(e.to_string()))?;
            *index += 1;
        }
        Ok(completion)
    }
}

impl ChatClient for Gateway {
    fn chat(&self, messages: Vec<ChatMessage>) -> Result<Completion, GatewayError> {
        let req = ChatRequest {
            model: self.defaults.model.clone(),
            messages,
            temperature: self.defaults.temperature,
            seed: self.defaults.seed,
            max_tokens: self.defaults.max_tokens,
        };
        self.complete(&req)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for &T {
    fn chat(&self, messages: Vec<ChatMessage>) -> Result<Completion, GatewayError> {
        (**self).chat(messages)
    }
}

impl<T: ChatClient + ?Sized> ChatClient for std::sync::Arc<T> {
    fn chat(&self, messages: Vec<ChatMessage>) -> Result<Completion, GatewayError> {
        (**self).chat(messages)
    }
}

/// Deterministic usage estimate for offline backends.
pub(crate) fn estimate_usage(messages: &[ChatMessage], response: &str) -> Usage {
    let est = crate::task_memory::ByteQuarterEstimator;
    use crate::task_memory::TokenEstimator;
    Usage {
        prompt_tokens: messages.iter().map(|m| est.estimate(&m.content) as u64).sum(),
        completion_tokens: est.estimate(response) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_then_exhausted() {
        let gw = Gateway::scripted(["A"]);
        let first = gw.chat(vec![ChatMessage::user("hi")]).unwrap();
        assert_eq!(first.text, "A");
        assert!(matches!(gw.chat(vec![ChatMessage::user("hi")]), Err(GatewayError::ScriptExhausted)));
    }

    #[test]
    fn rejects_empty_request() {
        let gw = Gateway::scripted(["A"]);
        assert!(matches!(gw.chat(vec![]), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn digest_depends_on_role_and_content() {
        let a = request_digest(&[ChatMessage::user("x")]);
        let b = request_digest(&[ChatMessage::system("x")]);
        let c = request_digest(&[ChatMessage::user("y")]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, request_digest(&[ChatMessage::user("x")]));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn record_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        let gw = Gateway::scripted(["one", "two"]).record_to(&path).unwrap();
        let p1 = vec![ChatMessage::user("first")];
        let p2 = vec![ChatMessage::system("s"), ChatMessage::user("second")];
        let r1 = gw.chat(p1.clone()).unwrap();
        let r2 = gw.chat(p2.clone()).unwrap();
        drop(gw);

        let replay = Gateway::new(ReplayBackend::from_file(&path, true).unwrap(), RequestDefaults::default());
        assert_eq!(replay.chat(p1).unwrap(), r1);
        assert_eq!(replay.chat(p2).unwrap(), r2);
        assert!(matches!(
            replay.chat(vec![ChatMessage::user("third")]),
            Err(GatewayError::ReplayExhausted { index: 2 })
        ));
    }

    #[test]
    fn strict_replay_detects_altered_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        let gw = Gateway::scripted(["one"]).record_to(&path).unwrap();
        gw.chat(vec![ChatMessage::user("original")]).unwrap();
        drop(gw);

        let strict = Gateway::new(ReplayBackend::from_file(&path, true).unwrap(), RequestDefaults::default());
        assert!(matches!(
            strict.chat(vec![ChatMessage::user("altered")]),
            Err(GatewayError::ReplayMismatch { index: 0, .. })
        ));

        let lenient = Gateway::new(ReplayBackend::from_file(&path, false).unwrap(), RequestDefaults::default());
        assert_eq!(lenient.chat(vec![ChatMessage::user("altered")]).unwrap().text, "one");
    }
}
