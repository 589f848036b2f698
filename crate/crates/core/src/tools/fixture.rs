use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SearchBackend, SearchHit, ToolError};
use crate::evaluation::normalized_tokens;

/// Corpus line: `{id, title, text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub id: String,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl CorpusDoc {
    pub fn new(id: &str, title: &str, text: &str) -> Self {
        Self { id: id.into(), title: title.into(), text: text.into(), url: None }
    }
}

/// In-memory tf-idf index over a small corpus.
///
/// score(d, q) = sum over distinct query terms t of tf(t, d) * ln(1 + N / df(t)),
/// with no document length normalization. Ties are broken by document id.
#[derive(Debug, Clone)]
pub struct FixtureIndex {
    docs: Vec<CorpusDoc>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_freq: HashMap<String, usize>,
}

impl FixtureIndex {
    pub fn new(docs: Vec<CorpusDoc>) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let term_freqs: Vec<HashMap<String, usize>> = docs
            .iter()
            .map(|d| {
                let mut tf: HashMap<String, usize> = HashMap::new();
                for t in normalized_tokens(&format!("{} {}", d.title, d.text)) {
                    *tf.entry(t).or_default() += 1;
                }
                for t in tf.keys() {
                    *doc_freq.entry(t.clone()).or_default() += 1;
                }
                tf
            })
            .collect();
        Self { docs, term_freqs, doc_freq }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, ToolError> {
        let text = std::fs::read_to_string(path).map_err(|e| ToolError::Corpus(format!("{}: {e}", path.display())))?;
        let docs = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str::<CorpusDoc>(l)
                    .map_err(|e| ToolError::Corpus(format!("{} line {}: {e}", path.display(), n + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(docs))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl SearchBackend for FixtureIndex {
    fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        if query.trim().is_empty() {
            return Err(ToolError::EmptyQuery);
        }
        if k == 0 {
            return Err(ToolError::InvalidK);
        }
        let mut terms = normalized_tokens(query);
        terms.sort();
        terms.dedup();
        let n = self.docs.len() as f64;
        let mut scored: Vec<(f64, usize)> = self
            .term_freqs
            .iter()
            .enumerate()
            .filter_map(|(i, tf)| {
                let score: f64 = terms
                    .iter()
                    .filter_map(|t| {
                        let f = *tf.get(t)?;
                        let df = self.doc_freq[t] as f64;
                        Some(f as f64 * (1.0 + n / df).ln())
                    })
                    .sum();
                (score > 0.0).then_some((score, i))
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| self.docs[a.1].id.cmp(&self.docs[b.1].id)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, i)| {
                let d = &self.docs[i];
                SearchHit { title: d.title.clone(), text: d.text.clone(), url: d.url.clone(), score }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tf_idf_by_hand() {
        // N = 2. "fluid" appears in both docs (df 2), "pressure" only in d1.
        let idx = FixtureIndex::new(vec![
            CorpusDoc::new("d1", "A", "fluid pressure pressure"),
            CorpusDoc::new("d2", "B", "fluid"),
        ]);
        let hits = idx.search("fluid pressure", 5).unwrap();
        let ln2 = (1.0f64 + 2.0 / 2.0).ln();
        let ln3 = (1.0f64 + 2.0 / 1.0).ln();
        assert_eq!(hits[0].title, "A");
        assert!((hits[0].score - (ln2 + 2.0 * ln3)).abs() < 1e-12);
        assert!((hits[1].score - ln2).abs() < 1e-12);
    }

    #[test]
    fn ties_broken_by_id() {
        let idx =
            FixtureIndex::new(vec![CorpusDoc::new("b", "x", "same words"), CorpusDoc::new("a", "y", "same words")]);
        let hits = idx.search("same", 2).unwrap();
        assert_eq!(hits[0].title, "y");
        assert_eq!(hits[1].title, "x");
    }

    #[test]
    fn normalizes_query_and_docs() {
        let idx = FixtureIndex::new(vec![CorpusDoc::new("1", "The Lumbar Puncture", "text")]);
        assert_eq!(idx.search("LUMBAR, puncture!", 1).unwrap().len(), 1);
        assert!(idx.search("the", 1).unwrap().is_empty());
    }
}
