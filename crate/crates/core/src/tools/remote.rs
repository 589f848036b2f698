use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{SearchBackend, SearchHit, ToolError};

fn client(timeout: Duration) -> Result<reqwest::blocking::Client, ToolError> {
    reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| ToolError::Backend(e.to_string()))
}

fn map_send_err(e: reqwest::Error, timeout: Duration) -> ToolError {
    if e.is_timeout() {
        ToolError::ToolTimeout(timeout)
    } else {
        ToolError::Backend(e.to_string())
    }
}

/// Dense-retriever service over an encyclopedia snapshot.
///
/// `POST {base}/retrieve` with `{"queries": [q], "topk": k, "return_scores": true}`;
/// the response holds `result[0]` as a list of `{document: {contents}, score}`
/// where `contents` is `"Title"\nbody`.
pub struct WikiRetrieverClient {
    client: reqwest::blocking::Client,
    base_url: String,
    timeout: Duration,
}

#[derive(Deserialize)]
struct RetrieveResponse {
    result: Vec<Vec<RetrievedDoc>>,
}

#[derive(Deserialize)]
struct RetrievedDoc {
    document: RetrievedContents,
    #[serde(default)]
    score: f64,
}

#[derive(Deserialize)]
struct RetrievedContents {
    contents: String,
}

impl WikiRetrieverClient {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, ToolError> {
        Ok(Self { client: client(timeout)?, base_url: base_url.trim_end_matches('/').to_string(), timeout })
    }
}

fn split_contents(contents: &str) -> (String, String) {
    match contents.split_once('\n') {
        Some((title, text)) => (title.trim().trim_matches('"').to_string(), text.trim().to_string()),
        None => (String::new(), contents.trim().to_string()),
    }
}

impl SearchBackend for WikiRetrieverClient {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        let resp = self
            .client
            .post(format!("{}/retrieve", self.base_url))
            .json(&json!({"queries": [query], "topk": k, "return_scores": true}))
            .send()
            .map_err(|e| map_send_err(e, self.timeout))?;
        if !resp.status().is_success() {
            return Err(ToolError::Backend(format!("HTTP {}", resp.status().as_u16())));
        }
        let body: RetrieveResponse = resp.json().map_err(|e| ToolError::Backend(e.to_string()))?;
        Ok(body
            .result
            .into_iter()
            .next()
            .unwrap_or_default()
            .into_iter()
            .map(|d| {
                let (title, text) = split_contents(&d.document.contents);
                SearchHit { title, text, url: None, score: d.score }
            })
            .filter(|h| !(h.title.is_empty() && h.text.is_empty()))
            .collect())
    }
}

/// Web search API client.
///
/// `POST {base}/web-search` with `{"query": q, "count": k, "summary": true}` and a
/// bearer key; hits are read from `data.webPages.value[]` (`name`, `url`,
/// `summary` or `snippet`).
pub struct WebSearchClient {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    timeout: Duration,
}

#[derive(Deserialize)]
struct WebResponse {
    data: WebData,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct WebData {
    web_pages: Option<WebPages>,
}

#[derive(Deserialize)]
struct WebPages {
    #[serde(default)]
    value: Vec<WebPage>,
}

#[derive(Deserialize)]
struct WebPage {
    #[serde(default)]
    name: String,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    snippet: String,
    #[serde(default)]
    summary: Option<String>,
}

impl WebSearchClient {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ToolError> {
        Ok(Self { client: client(timeout)?, base_url: base_url.trim_end_matches('/').to_string(), api_key, timeout })
    }
}

impl SearchBackend for WebSearchClient {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        let mut rb = self
            .client
            .post(format!("{}/web-search", self.base_url))
            .json(&json!({"query": query, "count": k, "summary": true}));
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| map_send_err(e, self.timeout))?;
        if !resp.status().is_success() {
            return Err(ToolError::Backend(format!("HTTP {}", resp.status().as_u16())));
        }
        let body: WebResponse = resp.json().map_err(|e| ToolError::Backend(e.to_string()))?;
        let pages = body.data.web_pages.map(|p| p.value).unwrap_or_default();
        let n = pages.len();
        Ok(pages
            .into_iter()
            .enumerate()
            .map(|(rank, p)| SearchHit {
                title: p.name,
                text: p.summary.filter(|s| !s.is_empty()).unwrap_or(p.snippet),
                url: p.url,
                // The API returns hits in rank order without scores.
                score: (n - rank) as f64,
            })
            .filter(|h| !(h.title.is_empty() && h.text.is_empty()))
            .collect())
    }
}
