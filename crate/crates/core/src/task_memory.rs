//! Stack-structured task memory.
//!
//! The stack is the coordinator's only task-level state. Entries are pushed
//! in execution order (bottom = task specification, top = most recent) and
//! revised only at the top:
//!
//! * [`MemoryStack::condense`] pops the suffix `k..=t` (1-based) and pushes a
//!   single [`EntryKind::Condensed`] summary in its place, so the new length
//!   is exactly `k`.
//! * [`MemoryStack::prune`] pops the top `pop_count` entries and pushes one
//!   [`EntryKind::FailureRecord`] describing why they were dropped.
//!
//! A task-specification entry at the bottom can never be removed.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Token counting strategy used for budget accounting.
pub trait TokenEstimator: Send + Sync + fmt::Debug {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(byte_length / 4)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteQuarterEstimator;

impl TokenEstimator for ByteQuarterEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

/// Default token estimate for `content`.
pub fn estimate_tokens(content: &str) -> usize {
    ByteQuarterEstimator.estimate(content)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntryKind {
    TaskSpecEntry,
    CoordinatorMessage,
    SubAgentInput,
    SubAgentOutput,
    Condensed,
    FailureRecord,
    ExperienceInjection,
}

impl EntryKind {
    pub const ALL: [EntryKind; 7] = [
        EntryKind::TaskSpecEntry,
        EntryKind::CoordinatorMessage,
        EntryKind::SubAgentInput,
        EntryKind::SubAgentOutput,
        EntryKind::Condensed,
        EntryKind::FailureRecord,
        EntryKind::ExperienceInjection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::TaskSpecEntry => "TaskSpecEntry",
            EntryKind::CoordinatorMessage => "CoordinatorMessage",
            EntryKind::SubAgentInput => "SubAgentInput",
            EntryKind::SubAgentOutput => "SubAgentOutput",
            EntryKind::Condensed => "Condensed",
            EntryKind::FailureRecord => "FailureRecord",
            EntryKind::ExperienceInjection => "ExperienceInjection",
        }
    }
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryEntry {
    pub id: u64,
    pub kind: EntryKind,
    pub content: String,
    pub token_estimate: usize,
    pub created_step: u32,
    pub source: String,
}

/// Structural history of a stack: every push and every removal, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    Pushed { id: u64, kind: EntryKind, source: String, step: u32 },
    Removed { id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("memory entry content must not be empty")]
    EmptyContent,
    #[error("condensation summary must not be empty")]
    EmptySummary,
    #[error("condensation index {k} out of range for stack of length {len}")]
    IndexOutOfRange { k: usize, len: usize },
    #[error("cannot pop {pop_count} entries from stack of length {len} without removing the task specification")]
    PopTooDeep { pop_count: usize, len: usize },
    #[error("pruning requires a failure note")]
    MissingFailureNote,
    #[error("the task specification at the bottom of the stack cannot be condensed")]
    ProtectedBottom,
}

/// Result of [`MemoryStack::render`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    /// Set when the full stack exceeded the budget and entries were elided.
    pub verbose: bool,
}

pub const EMPTY_SENTINEL: &str = "(empty)";
pub const COORDINATOR_SOURCE: &str = "coordinator";

#[derive(Clone)]
pub struct MemoryStack {
    entries: Vec<MemoryEntry>,
    next_id: u64,
    token_budget: usize,
    total_tokens: usize,
    estimator: Arc<dyn TokenEstimator>,
    journal: Vec<JournalEvent>,
}

impl fmt::Debug for MemoryStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryStack")
            .field("token_budget", &self.token_budget)
            .field("total_tokens", &self.total_tokens)
            .field("entries", &self.entries)
            .finish()
    }
}

impl PartialEq for MemoryStack {
    fn eq(&self, other: &Self) -> bool {
        self.token_budget == other.token_budget && self.entries == other.entries
    }
}

impl MemoryStack {
    pub fn new(token_budget: usize) -> Self {
        Self::with_estimator(token_budget, Arc::new(ByteQuarterEstimator))
    }

    pub fn with_estimator(token_budget: usize, estimator: Arc<dyn TokenEstimator>) -> Self {
        Self { entries: Vec::new(), next_id: 1, token_budget, total_tokens: 0, estimator, journal: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn top(&self) -> Option<&MemoryEntry> {
        self.entries.last()
    }

    pub fn token_budget(&self) -> usize {
        self.token_budget
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn journal(&self) -> &[JournalEvent] {
        &self.journal
    }

    pub fn estimator(&self) -> &dyn TokenEstimator {
        self.estimator.as_ref()
    }

    fn bottom_protected(&self) -> bool {
        self.entries.first().is_some_and(|e| e.kind == EntryKind::TaskSpecEntry)
    }

    /// Push a new entry on top and return its id.
    pub fn push(
        &mut self,
        kind: EntryKind,
        content: impl Into<String>,
        step: u32,
        source: impl Into<String>,
    ) -> Result<u64, MemoryError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(MemoryError::EmptyContent);
        }
        let source = source.into();
        let id = self.next_id;
        self.next_id += 1;
        let token_estimate = self.estimator.estimate(&content);
        self.total_tokens += token_estimate;
        self.journal.push(JournalEvent::Pushed { id, kind, source: source.clone(), step });
        self.entries.push(MemoryEntry { id, kind, content, token_estimate, created_step: step, source });
        Ok(id)
    }

    fn pop_suffix(&mut self, keep: usize) -> Vec<MemoryEntry> {
        let removed = self.entries.split_off(keep);
        for e in &removed {
            self.total_tokens -= e.token_estimate;
            self.journal.push(JournalEvent::Removed { id: e.id });
        }
        removed
    }

    /// Replace entries `k..=len` (1-based) with one condensed summary.
    pub fn condense(&mut self, k: usize, summary: &str, step: u32) -> Result<u64, MemoryError> {
        let len = self.len();
        if k == 0 || k > len {
            return Err(MemoryError::IndexOutOfRange { k, len });
        }
        if summary.trim().is_empty() {
            return Err(MemoryError::EmptySummary);
        }
        if k == 1 && self.bottom_protected() {
            return Err(MemoryError::ProtectedBottom);
        }
        let removed = self.pop_suffix(k - 1);
        let first = removed.first().map(|e| e.id).unwrap_or_default();
        let last = removed.last().map(|e| e.id).unwrap_or_default();
        let content = format!("{}\n{summary}", condensed_header(first, last));
        self.push(EntryKind::Condensed, content, step, COORDINATOR_SOURCE)
    }

    /// Remove the top `pop_count` entries and record why.
    ///
    /// Returns the id of the pushed failure record, or `None` when
    /// `pop_count == 0` (the stack is left untouched).
    pub fn prune(
        &mut self,
        pop_count: usize,
        failure_note: Option<&str>,
        step: u32,
    ) -> Result<Option<u64>, MemoryError> {
        let len = self.len();
        if pop_count > len || (pop_count == len && len > 0 && self.bottom_protected()) {
            return Err(MemoryError::PopTooDeep { pop_count, len });
        }
        if pop_count == 0 {
            return Ok(None);
        }
        let note = failure_note.map(str::trim).filter(|n| !n.is_empty()).ok_or(MemoryError::MissingFailureNote)?;
        self.pop_suffix(len - pop_count);
        self.push(EntryKind::FailureRecord, note, step, COORDINATOR_SOURCE).map(Some)
    }

    /// Render bottom to top as numbered blocks, eliding the oldest
    /// non-task-spec entries when the budget is exceeded.
    pub fn render(&self, budget: usize) -> Rendered {
        if self.entries.is_empty() {
            return Rendered { text: EMPTY_SENTINEL.to_string(), verbose: false };
        }
        let blocks: Vec<(bool, String)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                (e.kind == EntryKind::TaskSpecEntry, format!("[{}][{}][{}] {}", i + 1, e.kind, e.source, e.content))
            })
            .collect();
        let full = join_blocks(&blocks, 0);
        if self.estimator.estimate(&full) <= budget {
            return Rendered { text: full, verbose: false };
        }
        let elidable = blocks.iter().filter(|(spec, _)| !spec).count();
        let mut text = full;
        for n in 1..=elidable {
            text = join_blocks(&blocks, n);
            if self.estimator.estimate(&text) <= budget {
                return Rendered { text, verbose: true };
            }
        }
        Rendered { text: truncate_to_budget(&text, budget, self.estimator.as_ref()), verbose: true }
    }

    /// Interchange document `{token_budget, entries}`.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string(self).expect("stack serializes")
    }
}

pub fn condensed_header(first_id: u64, last_id: u64) -> String {
    format!("[condensed ids {first_id}-{last_id}]")
}

// Joins blocks, eliding the `elide` oldest non-task-spec blocks behind a
// single marker line.
fn join_blocks(blocks: &[(bool, String)], elide: usize) -> String {
    let mut out: Vec<&str> = Vec::with_capacity(blocks.len() + 1);
    let mut skipped = 0;
    let marker = format!("[...] {elide} earlier entries elided");
    let mut marker_done = elide == 0;
    for (spec, text) in blocks {
        if !spec && skipped < elide {
            skipped += 1;
            continue;
        }
        if !spec && !marker_done {
            out.push(&marker);
            marker_done = true;
        }
        out.push(text);
    }
    if !marker_done {
        out.push(&marker);
    }
    out.join("\n")
}

fn truncate_to_budget(text: &str, budget: usize, est: &dyn TokenEstimator) -> String {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len())).collect();
    // Largest prefix whose estimate fits.
    let (mut lo, mut hi) = (0usize, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if est.estimate(&text[..bounds[mid]]) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    text[..bounds[lo]].to_string()
}

impl Serialize for MemoryStack {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            token_budget: usize,
            entries: &'a [MemoryEntry],
        }
        Snapshot { token_budget: self.token_budget, entries: &self.entries }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MemoryStack {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Snapshot {
            token_budget: usize,
            entries: Vec<MemoryEntry>,
        }
        let snap = Snapshot::deserialize(deserializer)?;
        if snap.entries.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(serde::de::Error::custom("entry ids must be strictly increasing"));
        }
        let mut stack = MemoryStack::new(snap.token_budget);
        stack.next_id = snap.entries.last().map_or(1, |e| e.id + 1);
        stack.total_tokens = snap.entries.iter().map(|e| e.token_estimate).sum();
        stack.entries = snap.entries;
        Ok(stack)
    }
}
