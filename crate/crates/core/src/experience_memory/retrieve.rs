use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ExperienceRecord, ExperienceStore};
use crate::evaluation::normalized_tokens;
use crate::llm_gateway::{render_template, vars, ChatClient, ChatMessage, GatewayError};
use crate::prompts;
use crate::task_memory::{EntryKind, MemoryError, MemoryStack};

/// Injected blocks larger than this (in estimated tokens) are summarized,
/// then truncated if still too large.
pub const INJECTION_TOKEN_LIMIT: usize = 512;

pub const BLOCK_HEADER: &str = "Relevant prior experience:";
pub const EXPERIENCE_SOURCE: &str = "experience";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceQuery {
    pub task_text: String,
    pub user_id: String,
    pub top_k: usize,
}

/// Ordering is the tie-break order: Profile < Procedural < Semantic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    Profile,
    Procedural,
    Semantic,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Profile => "profile",
            Component::Procedural => "procedure",
            Component::Semantic => "fact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub component: Component,
    pub content: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedExperience {
    pub items: Vec<RetrievedItem>,
}

impl RetrievedExperience {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Relevance of a stored entry to the task text, in `[0, 1]`.
pub trait ExperienceScorer {
    fn score(&self, task_text: &str, entry_text: &str) -> f64;
}

/// Jaccard similarity of normalized token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardScorer;

impl ExperienceScorer for JaccardScorer {
    fn score(&self, task_text: &str, entry_text: &str) -> f64 {
        let a: BTreeSet<String> = normalized_tokens(task_text).into_iter().collect();
        let b: BTreeSet<String> = normalized_tokens(entry_text).into_iter().collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

struct Candidate {
    component: Component,
    index: usize,
    match_text: String,
    content: String,
}

fn candidates(record: &ExperienceRecord) -> Vec<Candidate> {
    let c = &record.components;
    let mut out = Vec::new();
    for (index, p) in c.user_profiles.iter().enumerate() {
        out.push(Candidate { component: Component::Profile, index, match_text: p.clone(), content: p.clone() });
    }
    for (index, s) in c.procedural_memory.iter().enumerate() {
        out.push(Candidate {
            component: Component::Procedural,
            index,
            match_text: format!("{} {}", s.scenario, s.procedure),
            content: format!("{}: {} (rationale: {})", s.scenario, s.procedure, s.rationale),
        });
    }
    for (index, f) in c.semantic_memory.iter().enumerate() {
        out.push(Candidate { component: Component::Semantic, index, match_text: f.clone(), content: f.clone() });
    }
    out
}

pub fn retrieve(store: &ExperienceStore, query: &ExperienceQuery) -> RetrievedExperience {
    retrieve_with(store, query, &JaccardScorer)
}

/// Rank the user's entries against the task text. Zero scores are dropped;
/// ties go to the later entry, then by component order.
pub fn retrieve_with(
    store: &ExperienceStore,
    query: &ExperienceQuery,
    scorer: &dyn ExperienceScorer,
) -> RetrievedExperience {
    let Some(record) = store.get(&query.user_id) else {
        return RetrievedExperience::default();
    };
    let mut scored: Vec<(f64, Candidate)> = candidates(&record)
        .into_iter()
        .map(|c| (scorer.score(&query.task_text, &c.match_text), c))
        .filter(|(s, _)| *s > 0.0)
        .collect();
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.total_cmp(sa).then_with(|| b.index.cmp(&a.index)).then_with(|| a.component.cmp(&b.component))
    });
    RetrievedExperience {
        items: scored
            .into_iter()
            .take(query.top_k)
            .map(|(score, c)| RetrievedItem { component: c.component, content: c.content, score })
            .collect(),
    }
}

/// Deterministic injection block, one line per item.
pub fn format_block(retrieved: &RetrievedExperience) -> String {
    let mut out = String::from(BLOCK_HEADER);
    for item in &retrieved.items {
        out.push_str(&format!("\n- [{}] {}", item.component.label(), item.content));
    }
    out
}

/// Shrinks an oversized injection block.
pub trait BlockSummarizer {
    fn summarize(&self, task_text: &str, block: &str, max_tokens: usize) -> Result<String, GatewayError>;
}

/// Summarizes through a chat model.
pub struct GatewaySummarizer<C>(pub C);

impl<C: ChatClient> BlockSummarizer for GatewaySummarizer<C> {
    fn summarize(&self, task_text: &str, block: &str, max_tokens: usize) -> Result<String, GatewayError> {
        let prompt = render_template(
            prompts::EXPERIENCE_SUMMARIZE,
            &vars([
                ("max_tokens", max_tokens.to_string()),
                ("task", task_text.to_string()),
                ("block", block.to_string()),
            ]),
        )
        .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        Ok(self.0.chat(vec![ChatMessage::user(prompt)])?.text)
    }
}

fn truncate_to_budget(stack: &MemoryStack, text: &str, budget: usize) -> String {
    if stack.estimator().estimate(text) <= budget {
        return text.to_string();
    }
    let chars: Vec<char> = text.chars().collect();
    let (mut lo, mut hi) = (0usize, chars.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        let candidate: String = chars[..mid].iter().collect();
        if stack.estimator().estimate(&candidate) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    chars[..lo].iter().collect()
}

/// Push retrieved experience as a single ExperienceInjection entry. Returns
/// the new entry id, or `None` when nothing was injected (empty retrieval, or
/// the stack already holds an injection).
pub fn inject(
    stack: &mut MemoryStack,
    retrieved: &RetrievedExperience,
    summarizer: Option<&dyn BlockSummarizer>,
    task_text: &str,
    step: u32,
) -> Result<Option<u64>, MemoryError> {
    if retrieved.is_empty() || stack.entries().iter().any(|e| e.kind == EntryKind::ExperienceInjection) {
        return Ok(None);
    }
    let mut block = format_block(retrieved);
    if stack.estimator().estimate(&block) > INJECTION_TOKEN_LIMIT {
        if let Some(s) = summarizer {
            match s.summarize(task_text, &block, INJECTION_TOKEN_LIMIT) {
                Ok(summary) if !summary.trim().is_empty() => {
                    let summary = summary.trim();
                    block = if summary.starts_with(BLOCK_HEADER) {
                        summary.to_string()
                    } else {
                        format!("{BLOCK_HEADER}\n{summary}")
                    };
                }
                Ok(_) => {}
                Err(e) => tracing::warn!(error = %e, "experience summarization failed, truncating"),
            }
        }
        block = truncate_to_budget(stack, &block, INJECTION_TOKEN_LIMIT);
    }
    stack.push(EntryKind::ExperienceInjection, &block, step, EXPERIENCE_SOURCE).map(Some)
}
