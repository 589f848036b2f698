//! Settings file with `runtime`, `gateway`, `tools`, `memory` and `grpo`
//! sections.
//!
//! Sources are layered: built-in defaults, then the TOML file, then
//! environment variables. Command-line flags are applied last by the caller.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::GrpoConfig;
use crate::llm_gateway::{ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};
use crate::tools::{ENV_SEARCH_API_KEY, ENV_SEARCH_BASE_URL};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSettings {
    pub max_steps: u32,
    pub max_reparse: u32,
    pub search_max_iters: u32,
    /// Token budget of the context excerpt handed to a sub-agent.
    pub subtask_context_budget: usize,
    pub experience_top_k: usize,
    pub locale: String,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        Self {
            max_steps: 25,
            max_reparse: 2,
            search_max_iters: 6,
            subtask_context_budget: 1024,
            experience_top_k: 5,
            locale: "en-US".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Remote,
    Replay,
    Scripted,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "remote" => Ok(Self::Remote),
            "replay" => Ok(Self::Replay),
            "scripted" => Ok(Self::Scripted),
            other => Err(format!("unknown backend `{other}` (expected remote, replay or scripted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub backend: BackendKind,
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub timeout_secs: u64,
    /// Replay fixture (replay backend).
    pub fixture: Option<PathBuf>,
    /// Canned responses (scripted backend): a JSON array or per-channel arrays.
    pub script: Option<PathBuf>,
    /// Verify prompt digests during replay.
    pub strict: bool,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Remote,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key: None,
            temperature: 0.0,
            max_tokens: 2048,
            seed: None,
            timeout_secs: 60,
            fixture: None,
            script: None,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolSettings {
    /// `remote` or `fixture:<path>`.
    pub backend: String,
    pub timeout_secs: u64,
    pub top_k: usize,
    pub wiki_base_url: Option<String>,
    pub web_base_url: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
}

impl Default for ToolSettings {
    fn default() -> Self {
        Self {
            backend: "remote".into(),
            timeout_secs: 10,
            top_k: 3,
            wiki_base_url: None,
            web_base_url: None,
            api_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySettings {
    /// Token budget for rendering the task memory into a prompt.
    pub token_budget: usize,
    /// Experience store directory; `None` keeps experience in memory only.
    pub store_dir: Option<PathBuf>,
}

impl Default for MemorySettings {
    fn default() -> Self {
        Self { token_budget: 4096, store_dir: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub runtime: RuntimeSettings,
    pub gateway: GatewaySettings,
    pub tools: ToolSettings,
    pub memory: MemorySettings,
    pub grpo: GrpoConfig,
}

impl Settings {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut s: Settings = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        // Relative paths in the file are relative to the file.
        if let Some(base) = path.parent() {
            for p in [&mut s.gateway.fixture, &mut s.gateway.script, &mut s.memory.store_dir].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Defaults overlaid with the file at `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError::Read { path: p.to_path_buf(), message: e.to_string() })?;
                Self::from_toml_str(&text, p)
            }
        }
    }

    /// Overlay environment variables read through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        let get = |k: &str| get(k).filter(|v| !v.is_empty());
        if let Some(v) = get(ENV_API_KEY) {
            self.gateway.api_key = Some(v);
        }
        if let Some(v) = get(ENV_BASE_URL) {
            self.gateway.base_url = v;
        }
        if let Some(v) = get(ENV_MODEL) {
            self.gateway.model = v;
        }
        if let Some(v) = get(ENV_SEARCH_API_KEY) {
            self.tools.api_key = Some(v);
        }
        if let Some(v) = get(ENV_SEARCH_BASE_URL) {
            self.tools.wiki_base_url.get_or_insert_with(|| v.clone());
            self.tools.web_base_url.get_or_insert(v);
        }
    }

    pub fn apply_process_env(&mut self) {
        self.apply_env(|k| std::env::var(k).ok());
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| Err(ConfigError::Invalid { key: key.into(), message: message.into() });
        if self.runtime.max_steps == 0 {
            return bad("runtime.max_steps", "must be at least 1");
        }
        if self.runtime.search_max_iters == 0 {
            return bad("runtime.search_max_iters", "must be at least 1");
        }
        if self.memory.token_budget == 0 {
            return bad("memory.token_budget", "must be positive");
        }
        if self.gateway.max_tokens == 0 {
            return bad("gateway.max_tokens", "must be positive");
        }
        if !(self.gateway.temperature >= 0.0) {
            return bad("gateway.temperature", "must be >= 0");
        }
        if self.tools.top_k == 0 {
            return bad("tools.top_k", "must be positive");
        }
        if self.tools.backend != "remote" && !self.tools.backend.starts_with("fixture:") {
            return bad("tools.backend", "expected `remote` or `fixture:<path>`");
        }
        self.grpo.validate().map_err(|e| ConfigError::Invalid { key: "grpo".into(), message: e.to_string() })
    }
}
