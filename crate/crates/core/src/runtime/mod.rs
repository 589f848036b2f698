//! Coordinator loop.
//!
//! A run seeds a [`MemoryStack`] with the task, optionally injects retrieved
//! experience, then alternates [`decide`] and dispatch until the coordinator
//! finishes or the step cap is reached. Each step becomes a [`StepRecord`].

mod decision;
mod dispatch;
pub mod trace;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{default_agents, AgentDescriptor, AgentResult, AgentTranscript, SubTask};
use crate::config::Settings;
use crate::experience_memory::{
    curate, inject, retrieve, ExperienceQuery, ExperienceRecord, ExperienceStore, GatewaySummarizer,
};
use crate::llm_gateway::{ChatClient, ChatMessage, Completion, GatewayError, Usage};
use crate::task_memory::{EntryKind, JournalEvent, MemoryStack, COORDINATOR_SOURCE};
use crate::tools::ToolRegistry;

pub use decision::{decide, parse_decision, DecideError, DecisionError};
pub use dispatch::extract_answer;
pub use trace::{
    compare_artifacts, replay_run, write_artifacts, ArtifactMismatch, ReplayError, ReplayOutcome, RunManifest,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub query: String,
    pub user_id: String,
    pub locale: String,
    pub max_steps: u32,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("max_steps must be at least 1")]
    ZeroSteps,
}

impl TaskSpec {
    pub fn new(query: impl Into<String>, user_id: impl Into<String>, created_at: DateTime<Utc>) -> Self {
        Self { query: query.into(), user_id: user_id.into(), locale: "en-US".into(), max_steps: 25, created_at }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.query.trim().is_empty() {
            return Err(TaskError::EmptyQuery);
        }
        if self.max_steps == 0 {
            return Err(TaskError::ZeroSteps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Plan,
    Reflect,
    Summarize,
    Delegate,
    Finish,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [Self::Plan, Self::Reflect, Self::Summarize, Self::Delegate, Self::Finish];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Plan => "plan",
            Self::Reflect => "reflect",
            Self::Summarize => "summarize",
            Self::Delegate => "delegate",
            Self::Finish => "finish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegateParams {
    pub agent_type: String,
    pub task_description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinatorDecision {
    pub action: ActionKind,
    pub reasoning: String,
    /// Present exactly for delegate decisions.
    pub params: Option<DelegateParams>,
    pub instruction: String,
    pub locale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub decision: CoordinatorDecision,
    pub outcome_digest: String,
    pub memory_len_before: usize,
    pub memory_len_after: usize,
    pub tokens_used: u64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Finished,
    StepCapReached,
    UnrecoverableError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Gateway,
    Parse,
    InvalidTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub kind: FailureKind,
    pub message: String,
}

/// One sub-agent invocation, kept out of the coordinator's memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delegation {
    pub step: u32,
    pub subtask: SubTask,
    pub result: AgentResult,
    pub transcript: AgentTranscript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurationStatus {
    Curated,
    Skipped,
    Failed,
    Disabled,
    NotFinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub status: CurationStatus,
    pub error: Option<String>,
    pub responses: usize,
    /// Short SHA-256 digest of the curator replies, when there were any.
    pub digest: Option<String>,
    pub record: Option<ExperienceRecord>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub task: TaskSpec,
    pub final_answer: String,
    pub termination: Termination,
    pub steps: Vec<StepRecord>,
    pub final_stack_snapshot: MemoryStack,
    pub failure: Option<RunFailure>,
    pub delegations: Vec<Delegation>,
    pub curation: CurationReport,
    /// Clock reading used for curation.
    pub finished_at: DateTime<Utc>,
}

impl RunResult {
    pub fn journal(&self) -> &[JournalEvent] {
        self.final_stack_snapshot.journal()
    }

    /// Every entry kind ever pushed during the run, including entries later
    /// removed by condensation or pruning.
    pub fn kinds_ever_pushed(&self) -> Vec<EntryKind> {
        self.journal()
            .iter()
            .filter_map(|e| match e {
                JournalEvent::Pushed { kind, .. } => Some(*kind),
                JournalEvent::Removed { .. } => None,
            })
            .collect()
    }
}

/// Ablation switches for the evaluation harness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Reflect and Summarize become no-ops; failures are recorded raw.
    pub no_revise: bool,
    /// No experience retrieval, injection or curation.
    pub no_experience: bool,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "no-revise" => a.no_revise = true,
                "no-experience" => a.no_experience = true,
                "none" => {}
                other => return Err(format!("unknown ablation `{other}` (expected no-revise, no-experience)")),
            }
        }
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.no_revise, "no-revise"), (self.no_experience, "no-experience")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub max_reparse: u32,
    pub search_max_iters: u32,
    pub subtask_context_budget: usize,
    pub memory_budget: usize,
    pub experience_top_k: usize,
    pub ablation: Ablation,
    pub agents: Vec<AgentDescriptor>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self::from_settings(&Settings::default())
    }
}

impl RuntimeConfig {
    pub fn from_settings(s: &Settings) -> Self {
        Self {
            max_reparse: s.runtime.max_reparse,
            search_max_iters: s.runtime.search_max_iters,
            subtask_context_budget: s.runtime.subtask_context_budget,
            memory_budget: s.memory.token_budget,
            experience_top_k: s.runtime.experience_top_k,
            ablation: Ablation::default(),
            agents: default_agents(),
        }
    }
}

/// Time source for wall-time accounting and curation timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;

    fn elapsed_ms(&self, step: u32, started: Instant) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn elapsed_ms(&self, _step: u32, started: Instant) -> u64 {
        started.elapsed().as_millis() as u64
    }
}

/// Constant time, zero elapsed time. Makes offline runs reproducible.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }

    fn elapsed_ms(&self, _step: u32, _started: Instant) -> u64 {
        0
    }
}

/// Plays back the timings of a recorded run.
#[derive(Debug, Clone)]
pub struct RecordedClock {
    pub now: DateTime<Utc>,
    pub step_ms: std::collections::BTreeMap<u32, u64>,
}

impl Clock for RecordedClock {
    fn now(&self) -> DateTime<Utc> {
        self.now
    }

    fn elapsed_ms(&self, step: u32, _started: Instant) -> u64 {
        self.step_ms.get(&step).copied().unwrap_or(0)
    }
}

/// Everything a run needs besides the task.
pub struct RuntimeContext<'a> {
    pub gateway: &'a dyn ChatClient,
    pub tools: &'a ToolRegistry,
    pub experience: &'a ExperienceStore,
    pub clock: &'a dyn Clock,
    pub config: RuntimeConfig,
}

/// Counts usage and keeps every raw reply, for step accounting.
pub(crate) struct Meter<'a> {
    inner: &'a dyn ChatClient,
    usage: Cell<Usage>,
    responses: RefCell<Vec<String>>,
}

impl<'a> Meter<'a> {
    fn new(inner: &'a dyn ChatClient) -> Self {
        Self { inner, usage: Cell::new(Usage::default()), responses: RefCell::new(Vec::new()) }
    }

    /// Usage and replies since the last call.
    fn take(&self) -> (Usage, Vec<String>) {
        (self.usage.take(), self.responses.take())
    }
}

impl ChatClient for Meter<'_> {
    fn chat(&self, messages: Vec<ChatMessage>) -> Result<Completion, GatewayError> {
        let c = self.inner.chat(messages)?;
        let mut u = self.usage.get();
        u += c.usage;
        self.usage.set(u);
        self.responses.borrow_mut().push(c.text.clone());
        Ok(c)
    }
}

/// First 8 hex digits of a SHA-256 over the replies.
pub(crate) fn responses_digest(responses: &[String]) -> String {
    let mut h = Sha256::new();
    for r in responses {
        h.update(r.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..8].to_string()
}

/// Loop state visible to [`should_terminate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopState {
    pub steps_done: u32,
    pub max_steps: u32,
    /// The last step was a Finish that was accepted.
    pub finished: bool,
}

pub fn should_terminate(state: &LoopState) -> Option<Termination> {
    if state.finished {
        Some(Termination::Finished)
    } else if state.steps_done >= state.max_steps {
        Some(Termination::StepCapReached)
    } else {
        None
    }
}

pub(crate) fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Run one task to completion.
pub fn run_task(task: &TaskSpec, ctx: &RuntimeContext) -> RunResult {
    let meter = Meter::new(ctx.gateway);
    let mut run = dispatch::Run::new(task, ctx, &meter);
    let mut failure = None;

    if let Err(e) = task.validate() {
        failure = Some(RunFailure { kind: FailureKind::InvalidTask, message: e.to_string() });
    } else {
        let spec_text = format!("Task: {}\nUser: {}\nLocale: {}", task.query, task.user_id, task.locale);
        run.stack
            .push(EntryKind::TaskSpecEntry, spec_text, 0, COORDINATOR_SOURCE)
            .expect("validated query is non-empty");
        if !ctx.config.ablation.no_experience {
            let retrieved = retrieve(
                ctx.experience,
                &ExperienceQuery {
                    task_text: task.query.clone(),
                    user_id: task.user_id.clone(),
                    top_k: ctx.config.experience_top_k.max(1),
                },
            );
            let summarizer = GatewaySummarizer(&meter);
            if let Err(e) = inject(&mut run.stack, &retrieved, Some(&summarizer), &task.query, 0) {
                tracing::warn!(error = %e, "experience injection failed");
            }
            meter.take();
        }
    }

    let mut state = LoopState { steps_done: 0, max_steps: task.max_steps, finished: false };
    let mut termination =
        if failure.is_some() { Some(Termination::UnrecoverableError) } else { should_terminate(&state) };
    while termination.is_none() {
        let step = state.steps_done + 1;
        let started = Instant::now();
        let len_before = run.stack.len();
        let decision = match decide(&meter, task, &run.stack, &ctx.config.agents, step, &ctx.config) {
            Ok(d) => d,
            Err(e) => {
                failure = Some(RunFailure {
                    kind: match e {
                        DecideError::Gateway(_) => FailureKind::Gateway,
                        DecideError::Parse { .. } => FailureKind::Parse,
                    },
                    message: e.to_string(),
                });
                termination = Some(Termination::UnrecoverableError);
                break;
            }
        };
        let outcome = run.dispatch(&decision, step);
        let (usage, responses) = meter.take();
        run.steps.push(StepRecord {
            step,
            decision,
            outcome_digest: format!("{} #{}", outcome.summary, responses_digest(&responses)),
            memory_len_before: len_before,
            memory_len_after: run.stack.len(),
            tokens_used: usage.total(),
            wall_time_ms: ctx.clock.elapsed_ms(step, started),
        });
        state.steps_done = step;
        state.finished = outcome.finished;
        if let Some(f) = outcome.fatal {
            failure = Some(f);
            termination = Some(Termination::UnrecoverableError);
            break;
        }
        termination = should_terminate(&state);
    }
    let termination = termination.expect("loop exits with a verdict");

    let finished_at = ctx.clock.now();
    let curation = if termination != Termination::Finished {
        CurationReport { status: CurationStatus::NotFinished, error: None, responses: 0, digest: None, record: None }
    } else if ctx.config.ablation.no_experience {
        CurationReport { status: CurationStatus::Disabled, error: None, responses: 0, digest: None, record: None }
    } else {
        run_curation(task, &run.stack, ctx, &meter, finished_at)
    };

    RunResult {
        task: task.clone(),
        final_answer: run.final_answer,
        termination,
        steps: run.steps,
        final_stack_snapshot: run.stack,
        failure,
        delegations: run.delegations,
        curation,
        finished_at,
    }
}

// Best effort: every failure is logged and reported, never raised.
fn run_curation(
    task: &TaskSpec,
    stack: &MemoryStack,
    ctx: &RuntimeContext,
    meter: &Meter,
    now: DateTime<Utc>,
) -> CurationReport {
    let existing =
        ctx.experience.get(&task.user_id).unwrap_or_else(|| ExperienceRecord::empty(task.user_id.clone(), now));
    let outcome = curate(stack, &existing, now, meter);
    let mut report = CurationReport {
        status: CurationStatus::Curated,
        error: None,
        responses: outcome.responses.len(),
        digest: (!outcome.responses.is_empty()).then(|| responses_digest(&outcome.responses)),
        record: None,
    };
    if outcome.skipped {
        report.status = CurationStatus::Skipped;
    } else if let Some(e) = &outcome.error {
        tracing::warn!(error = %e, "experience curation failed");
        report.status = CurationStatus::Failed;
        report.error = Some(e.to_string());
    } else {
        match ctx.experience.merge_into(&outcome.record) {
            Ok(merged) => report.record = Some(merged),
            Err(e) => {
                tracing::warn!(error = %e, "experience store update failed");
                report.status = CurationStatus::Failed;
                report.error = Some(e.to_string());
            }
        }
    }
    meter.take();
    report
}

#[cfg(test)]
mod tests;
