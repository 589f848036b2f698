//! Retrieval tools used by the search agent.
//!
//! Two logical tools are registered by default: `wiki` (encyclopedia search)
//! and `web` (web search). Each is backed either by a local fixture corpus or
//! by a remote HTTP service. All failures surface as observation text through
//! [`ToolRegistry::dispatch_tool`] so an agent can recover from them.

mod fixture;
mod remote;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fixture::{CorpusDoc, FixtureIndex};
pub use remote::{WebSearchClient, WikiRetrieverClient};

pub const ENV_SEARCH_API_KEY: &str = "STACKPLANNER_SEARCH_API_KEY";
pub const ENV_SEARCH_BASE_URL: &str = "STACKPLANNER_SEARCH_BASE_URL";

pub const WIKI: &str = "wiki";
pub const WEB: &str = "web";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    pub args: BTreeMap<String, String>,
}

impl ToolCall {
    pub fn search(tool: impl Into<String>, query: impl Into<String>) -> Self {
        Self { tool: tool.into(), args: BTreeMap::from([("query".to_string(), query.into())]) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("empty query")]
    EmptyQuery,
    #[error("k must be positive")]
    InvalidK,
    #[error("tool timed out after {0:?}")]
    ToolTimeout(Duration),
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("missing argument `{0}`")]
    MissingArgument(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("corpus error: {0}")]
    Corpus(String),
}

/// A search backend. Implementations must be safe to call concurrently.
pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError>;
}

/// Observation text returned to the agent plus source identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResult {
    pub text: String,
    pub sources: Vec<String>,
}

pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn SearchBackend>>,
    timeout: Duration,
    default_k: usize,
    snippet_chars: usize,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .field("timeout", &self.timeout)
            .field("default_k", &self.default_k)
            .finish()
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self { tools: BTreeMap::new(), timeout: DEFAULT_TIMEOUT, default_k: 3, snippet_chars: 400 }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_default_k(mut self, k: usize) -> Self {
        self.default_k = k.max(1);
        self
    }

    pub fn with_snippet_chars(mut self, n: usize) -> Self {
        self.snippet_chars = n;
        self
    }

    pub fn register(&mut self, name: &str, backend: Arc<dyn SearchBackend>) -> &mut Self {
        self.tools.insert(name.to_ascii_lowercase(), backend);
        self
    }

    /// Registry over local corpora. `path` is either a directory holding
    /// `wiki.jsonl` and/or `web.jsonl`, or a single corpus file used for both.
    pub fn from_fixture_path(path: &Path) -> Result<Self, ToolError> {
        let mut reg = Self::new();
        if path.is_dir() {
            for name in [WIKI, WEB] {
                let file = path.join(format!("{name}.jsonl"));
                if file.exists() {
                    reg.register(name, Arc::new(FixtureIndex::from_jsonl(&file)?));
                }
            }
            if reg.tools.is_empty() {
                return Err(ToolError::Corpus(format!("{} contains neither wiki.jsonl nor web.jsonl", path.display())));
            }
        } else {
            let index = Arc::new(FixtureIndex::from_jsonl(path)?);
            reg.register(WIKI, index.clone());
            reg.register(WEB, index);
        }
        Ok(reg)
    }

    pub fn tool_names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }

    fn resolve(&self, name: &str) -> Option<&Arc<dyn SearchBackend>> {
        let key = name.trim().to_ascii_lowercase();
        let canonical = match key.as_str() {
            "wiki_rag" | "wikipedia" | "wiki_search" => WIKI,
            "bocha_rag" | "bocha" | "web_search" => WEB,
            other => other,
        };
        self.tools.get(canonical)
    }

    /// Search `tool` with the per-call timeout enforced.
    pub fn search(&self, tool: &str, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        if query.trim().is_empty() {
            return Err(ToolError::EmptyQuery);
        }
        if k == 0 {
            return Err(ToolError::InvalidK);
        }
        let backend = self.resolve(tool).ok_or_else(|| ToolError::UnknownTool(tool.to_string()))?.clone();
        let (tx, rx) = mpsc::channel();
        let q = query.to_string();
        std::thread::spawn(move || {
            let _ = tx.send(backend.search(&q, k));
        });
        match rx.recv_timeout(self.timeout) {
            Ok(result) => result.map(|mut hits| {
                hits.truncate(k);
                hits
            }),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(ToolError::ToolTimeout(self.timeout)),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(ToolError::Backend("search worker panicked".into())),
        }
    }

    pub fn wiki_search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        self.search(WIKI, query, k)
    }

    pub fn web_search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        self.search(WEB, query, k)
    }

    /// Route a call and format the outcome as observation text. Never fails.
    pub fn dispatch_tool(&self, call: &ToolCall) -> ToolResult {
        if self.resolve(&call.tool).is_none() {
            return ToolResult { text: format!("tool error: unknown tool: {}", call.tool), sources: Vec::new() };
        }
        let Some(query) = call.args.get("query") else {
            return ToolResult {
                text: format!("tool error: {}", ToolError::MissingArgument("query".into())),
                sources: Vec::new(),
            };
        };
        let k = call.args.get("k").and_then(|v| v.trim().parse().ok()).unwrap_or(self.default_k);
        match self.search(&call.tool, query, k) {
            Ok(hits) if hits.is_empty() => ToolResult { text: "Observation: no results".into(), sources: Vec::new() },
            Ok(hits) => ToolResult {
                text: format_observation(&hits, self.snippet_chars),
                sources: hits.iter().map(|h| h.url.clone().unwrap_or_else(|| h.title.clone())).collect(),
            },
            Err(e) => ToolResult { text: format!("tool error: {e}"), sources: Vec::new() },
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push(' '),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

/// `Observation: {'title': '...', 'text': '...'}`, one hit per line.
pub fn format_observation(hits: &[SearchHit], snippet_chars: usize) -> String {
    let body = hits
        .iter()
        .map(|h| {
            let text: String = if h.text.chars().count() > snippet_chars {
                let cut: String = h.text.chars().take(snippet_chars).collect();
                format!("{cut}...")
            } else {
                h.text.clone()
            };
            format!("{{'title': {}, 'text': {}}}", quote(&h.title), quote(&text))
        })
        .collect::<Vec<_>>()
        .join("\n");
    format!("Observation: {body}")
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Slow;
    impl SearchBackend for Slow {
        fn search(&self, _: &str, _: usize) -> Result<Vec<SearchHit>, ToolError> {
            std::thread::sleep(Duration::from_millis(500));
            Ok(vec![])
        }
    }

    fn registry() -> ToolRegistry {
        let docs = vec![
            CorpusDoc::new(
                "d1",
                "Hydrocephalus",
                "Hydrocephalus is a condition with raised cerebrospinal fluid pressure in the brain.",
            ),
            CorpusDoc::new("d2", "Paris", "Paris is the capital of France."),
        ];
        let mut reg = ToolRegistry::new();
        reg.register(WIKI, Arc::new(FixtureIndex::new(docs)));
        reg
    }

    #[test]
    fn dispatch_formats_observation() {
        let reg = registry();
        let r = reg.dispatch_tool(&ToolCall::search("wiki", "cerebrospinal fluid pressure"));
        assert!(r.text.starts_with("Observation: {'title': 'Hydrocephalus', 'text': 'Hydrocephalus is"));
        assert_eq!(r.sources, ["Hydrocephalus"]);
        // Aliases resolve.
        let r = reg.dispatch_tool(&ToolCall::search("Wiki_RAG", "capital of France"));
        assert!(r.text.contains("'title': 'Paris'"));
    }

    #[test]
    fn dispatch_never_fails() {
        let reg = registry();
        let r = reg.dispatch_tool(&ToolCall::search("calculator", "1+1"));
        assert!(r.text.starts_with("tool error: unknown tool"));
        let r = reg.dispatch_tool(&ToolCall::search("wiki", "zebra"));
        assert_eq!(r.text, "Observation: no results");
        let r = reg.dispatch_tool(&ToolCall::search("wiki", "   "));
        assert_eq!(r.text, "tool error: empty query");
        let r = reg.dispatch_tool(&ToolCall { tool: "wiki".into(), args: BTreeMap::new() });
        assert!(r.text.starts_with("tool error: missing argument"));
    }

    #[test]
    fn preconditions() {
        let reg = registry();
        assert_eq!(reg.wiki_search("", 3), Err(ToolError::EmptyQuery));
        assert_eq!(reg.wiki_search("paris", 0), Err(ToolError::InvalidK));
        assert!(matches!(reg.web_search("paris", 1), Err(ToolError::UnknownTool(_))));
    }

    #[test]
    fn k_larger_than_corpus_returns_all_hits() {
        let reg = registry();
        let hits = reg.wiki_search("is", 50).unwrap();
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn timeout_enforced() {
        let mut reg = ToolRegistry::new().with_timeout(Duration::from_millis(20));
        reg.register(WEB, Arc::new(Slow));
        assert_eq!(reg.web_search("anything", 3), Err(ToolError::ToolTimeout(Duration::from_millis(20))));
        let r = reg.dispatch_tool(&ToolCall::search("web", "anything"));
        assert!(r.text.starts_with("tool error: tool timed out"));
    }

    #[test]
    fn observation_escapes_and_truncates() {
        let hits = vec![SearchHit { title: "It's".into(), text: "abcdef".into(), url: None, score: 1.0 }];
        assert_eq!(format_observation(&hits, 3), "Observation: {'title': 'It\\'s', 'text': 'abc...'}");
    }
}
