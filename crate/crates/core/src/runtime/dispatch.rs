use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use super::decision::coordinator_vars;
use super::{
    ActionKind, CoordinatorDecision, Delegation, FailureKind, Meter, RunFailure, RuntimeContext, StepRecord, TaskSpec,
};
use crate::agents::{
    replan_description, run_experience_search_agent, run_report_agent, run_search_agent, AgentKind, AgentRun,
    AgentStatus, AgentTranscript, SubTask,
};
use crate::document::first_json_object;
use crate::llm_gateway::{render_template, ChatClient, ChatMessage, GatewayError, TemplateVars};
use crate::prompts;
use crate::task_memory::{EntryKind, MemoryStack, COORDINATOR_SOURCE};

const REFLECT_WINDOW: usize = 4;
const NOTE_CHARS: usize = 160;

/// The answer a report states, e.g. "... Therefore, my answer is A." gives
/// "A". Falls back to the whole text.
pub fn extract_answer(report: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)my (?:final )?answer is\s*:?\s*([^\n]+)").expect("static regex"));
    match re.captures_iter(report).last() {
        Some(c) => c[1]
            .trim()
            .trim_end_matches('.')
            .trim_matches(|ch: char| ch == '*' || ch == '"' || ch == '\'' || ch.is_whitespace())
            .to_string(),
        None => report.trim().to_string(),
    }
}

fn clip(s: &str, n: usize) -> String {
    let one_line = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if one_line.chars().count() <= n {
        one_line
    } else {
        format!("{}...", one_line.chars().take(n).collect::<String>())
    }
}

pub(super) struct Outcome {
    pub summary: String,
    pub finished: bool,
    pub fatal: Option<RunFailure>,
}

impl Outcome {
    fn ok(summary: impl Into<String>) -> Self {
        Self { summary: summary.into(), finished: false, fatal: None }
    }

    fn gateway(what: &str, e: GatewayError) -> Self {
        Self {
            summary: format!("{what} failed: {e}"),
            finished: false,
            fatal: Some(RunFailure { kind: FailureKind::Gateway, message: e.to_string() }),
        }
    }
}

pub(super) struct Run<'r, 'c> {
    task: &'r TaskSpec,
    ctx: &'r RuntimeContext<'c>,
    meter: &'r Meter<'r>,
    pub stack: MemoryStack,
    pub steps: Vec<StepRecord>,
    pub delegations: Vec<Delegation>,
    pub final_answer: String,
    last_report: Option<String>,
}

impl<'r, 'c> Run<'r, 'c> {
    pub fn new(task: &'r TaskSpec, ctx: &'r RuntimeContext<'c>, meter: &'r Meter<'r>) -> Self {
        Self {
            task,
            ctx,
            meter,
            stack: MemoryStack::new(ctx.config.memory_budget),
            steps: Vec::new(),
            delegations: Vec::new(),
            final_answer: String::new(),
            last_report: None,
        }
    }

    fn no_revise(&self) -> bool {
        self.ctx.config.ablation.no_revise
    }

    fn vars(&self, step: u32, mode: &str, decision: &CoordinatorDecision) -> TemplateVars {
        let mut v = coordinator_vars(self.task, &self.stack, &self.ctx.config.agents, step, &self.ctx.config, mode);
        v.insert("decision_reasoning".into(), Value::String(decision.reasoning.clone()));
        v.insert("instruction".into(), Value::String(decision.instruction.clone()));
        v
    }

    fn ask(&self, v: &TemplateVars, request: String) -> Result<String, GatewayError> {
        let system = render_template(prompts::COORDINATOR, v).expect("coordinator template renders");
        let reply = self.meter.chat(vec![ChatMessage::system(system), ChatMessage::user(request)])?;
        Ok(reply.text.trim().to_string())
    }

    // Failure records are pruning artifacts; with revision disabled the same
    // information is kept as a raw entry instead.
    fn record_failure(&mut self, note: &str, step: u32, source: &str) {
        let (kind, content) = if self.no_revise() {
            (EntryKind::SubAgentOutput, format!("[failed] {note}"))
        } else {
            (EntryKind::FailureRecord, note.to_string())
        };
        self.stack.push(kind, content, step, source).expect("failure note is non-empty");
    }

    pub fn dispatch(&mut self, decision: &CoordinatorDecision, step: u32) -> Outcome {
        match decision.action {
            ActionKind::Plan => self.plan(decision, step),
            ActionKind::Reflect if self.no_revise() => Outcome::ok("reflect skipped (revision disabled)"),
            ActionKind::Summarize if self.no_revise() => Outcome::ok("summarize skipped (revision disabled)"),
            ActionKind::Reflect => self.reflect(decision, step),
            ActionKind::Summarize => self.summarize(decision, step),
            ActionKind::Delegate => self.delegate(decision, step),
            ActionKind::Finish => self.finish(step),
        }
    }

    fn plan(&mut self, decision: &CoordinatorDecision, step: u32) -> Outcome {
        let v = self.vars(step, "plan", decision);
        let analysis = match self.ask(&v, format!("Carry out the plan action. Step {step}.")) {
            Ok(a) => a,
            Err(e) => return Outcome::gateway("plan", e),
        };
        let content = if analysis.is_empty() { "(no analysis)".to_string() } else { analysis };
        let id = self.stack.push(EntryKind::CoordinatorMessage, content, step, COORDINATOR_SOURCE).expect("non-empty");
        Outcome::ok(format!("plan recorded as entry {id}"))
    }

    fn reflect(&mut self, decision: &CoordinatorDecision, step: u32) -> Outcome {
        let mut v = self.vars(step, "reflect", decision);
        let entries = self.stack.entries();
        let window = &entries[entries.len().saturating_sub(REFLECT_WINDOW)..];
        let offset = entries.len() - window.len();
        let context: Vec<String> = window
            .iter()
            .enumerate()
            .map(|(i, e)| format!("[{}][{}][{}] {}", offset + i + 1, e.kind, e.source, e.content))
            .collect();
        v.insert("need_reflect_context".into(), Value::String(context.join("\n")));
        v.insert("reflection_target".into(), Value::String("the most recent action and its result".into()));
        let reply = match self.ask(&v, format!("Carry out the reflect action. Step {step}.")) {
            Ok(r) => r,
            Err(e) => return Outcome::gateway("reflect", e),
        };
        let Some(obj) = first_json_object(&reply) else {
            return Outcome::ok("reflect reply unparsable, nothing removed");
        };
        let analysis = obj.get("analysis").and_then(Value::as_str).unwrap_or("").trim().to_string();
        let reasoning = obj.get("reasoning").and_then(Value::as_str).unwrap_or("").trim().to_string();
        let pop_count = match obj.get("pop_count") {
            Some(Value::Number(n)) => n.as_u64().unwrap_or(0),
            Some(Value::String(s)) => s.trim().parse().unwrap_or(0),
            _ => 0,
        } as usize;
        if pop_count == 0 {
            return Outcome::ok(format!("reflect: pop_count=0; {}", clip(&analysis, NOTE_CHARS)));
        }
        let note = [analysis.as_str(), reasoning.as_str()]
            .into_iter()
            .find(|s| !s.is_empty())
            .unwrap_or("reflection removed unproductive entries")
            .to_string();
        match self.stack.prune(pop_count, Some(&note), step) {
            Ok(_) => Outcome::ok(format!("reflect: pruned {pop_count} entries; {}", clip(&note, NOTE_CHARS))),
            Err(e) => Outcome::ok(format!("reflect: pop_count={pop_count} not applied: {e}")),
        }
    }

    // Start of the segment a summary may replace: after the task spec and
    // injected experience, and after the most recent condensed entry.
    fn summary_start(&self) -> usize {
        let entries = self.stack.entries();
        let protected = entries
            .iter()
            .take_while(|e| matches!(e.kind, EntryKind::TaskSpecEntry | EntryKind::ExperienceInjection))
            .count();
        let after_condensed = entries.iter().rposition(|e| e.kind == EntryKind::Condensed).map_or(0, |i| i + 1);
        protected.max(after_condensed)
    }

    fn summarize(&mut self, decision: &CoordinatorDecision, step: u32) -> Outcome {
        let start = self.summary_start();
        if start >= self.stack.len() {
            return Outcome::ok("summarize: nothing to condense");
        }
        let mut v = self.vars(step, "summarize", decision);
        let segment: Vec<String> = self.stack.entries()[start..]
            .iter()
            .enumerate()
            .map(|(i, e)| format!("[{}][{}][{}] {}", start + i + 1, e.kind, e.source, e.content))
            .collect();
        v.insert("need_summary_context".into(), Value::String(segment.join("\n")));
        let focus =
            if decision.instruction.is_empty() { self.task.query.clone() } else { decision.instruction.clone() };
        v.insert("summarization_focus".into(), Value::String(focus));
        let summary = match self.ask(&v, format!("Carry out the summarize action. Step {step}.")) {
            Ok(s) => s,
            Err(e) => return Outcome::gateway("summarize", e),
        };
        let (first, len) = (start + 1, self.stack.len());
        match self.stack.condense(first, &summary, step) {
            Ok(_) => Outcome::ok(format!("summarize: condensed entries {first}-{len}")),
            Err(e) => Outcome::ok(format!("summarize: not applied: {e}")),
        }
    }

    fn delegate(&mut self, decision: &CoordinatorDecision, step: u32) -> Outcome {
        let params = decision.params.as_ref().expect("delegate decisions carry params");
        let Some(kind) = AgentKind::resolve(&params.agent_type) else {
            let note = format!("DelegationError: unknown agent type `{}`", params.agent_type);
            self.record_failure(&note, step, COORDINATOR_SOURCE);
            return Outcome::ok(format!("delegate: unknown agent `{}`", params.agent_type));
        };
        let locale = if decision.locale.is_empty() { self.task.locale.clone() } else { decision.locale.clone() };
        let subtask = SubTask {
            agent_type: kind.source().to_string(),
            description: params.task_description.clone(),
            context: self.stack.render(self.ctx.config.subtask_context_budget).text,
            locale,
        };
        self.stack
            .push(
                EntryKind::SubAgentInput,
                format!("to {}: {}", kind.source(), subtask.description),
                step,
                COORDINATOR_SOURCE,
            )
            .expect("non-empty");
        let run = match kind {
            AgentKind::Search => {
                run_search_agent(&subtask, self.ctx.tools, self.meter, self.ctx.config.search_max_iters)
            }
            AgentKind::Replan => {
                let mut t = subtask.clone();
                t.description = replan_description(&t.description);
                run_search_agent(&t, self.ctx.tools, self.meter, self.ctx.config.search_max_iters)
            }
            AgentKind::Report => run_report_agent(&subtask, self.meter),
            AgentKind::ExperienceSearch => AgentRun {
                result: run_experience_search_agent(
                    &self.task.query,
                    &self.task.user_id,
                    self.ctx.experience,
                    self.ctx.config.experience_top_k,
                ),
                transcript: AgentTranscript { agent: kind.source().to_string(), ..Default::default() },
            },
        };
        let result = &run.result;
        match result.status {
            AgentStatus::Ok => {
                self.stack
                    .push(EntryKind::SubAgentOutput, result.content.clone(), step, kind.source())
                    .expect("non-empty");
                if kind == AgentKind::Report {
                    self.last_report = Some(result.content.clone());
                }
            }
            AgentStatus::ToolBudgetExhausted => {
                self.stack
                    .push(
                        EntryKind::SubAgentOutput,
                        format!("(tool budget exhausted) {}", result.content),
                        step,
                        kind.source(),
                    )
                    .expect("non-empty");
            }
            AgentStatus::Failed => {
                let note = format!("{} failed: {}", kind.source(), result.content);
                self.record_failure(&note, step, kind.source());
            }
        }
        let summary = format!("delegate {}: {:?} after {} step(s)", kind.source(), result.status, result.steps_taken);
        self.delegations.push(Delegation { step, subtask, result: run.result, transcript: run.transcript });
        Outcome::ok(summary)
    }

    fn finish(&mut self, step: u32) -> Outcome {
        if self.delegations.is_empty() {
            let note = "Finish rejected: no sub-agent has produced a result yet";
            if self.no_revise() {
                self.stack.push(EntryKind::CoordinatorMessage, note, step, COORDINATOR_SOURCE).expect("non-empty");
            } else {
                self.record_failure(note, step, COORDINATOR_SOURCE);
            }
            return Outcome::ok("finish rejected: no delegation yet");
        }
        let source = self.last_report.clone().or_else(|| {
            self.stack.entries().iter().rev().find(|e| e.kind == EntryKind::SubAgentOutput).map(|e| e.content.clone())
        });
        self.final_answer = source.as_deref().map(extract_answer).unwrap_or_default();
        Outcome {
            summary: format!("finish: answer {:?}", clip(&self.final_answer, NOTE_CHARS)),
            finished: true,
            fatal: None,
        }
    }
}
