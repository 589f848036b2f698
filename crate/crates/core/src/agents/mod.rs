//! Sub-agents. Each runs in a private context and hands back only an
//! [`AgentResult`]; its transcript goes to the debug trace, never to the
//! coordinator's memory.

mod report;
mod search;

use serde::{Deserialize, Serialize};

use crate::experience_memory::{format_block, retrieve, ExperienceQuery, ExperienceStore};
use crate::llm_gateway::ChatMessage;
use crate::tools::ToolCall;

pub use report::{report_mode, run_report_agent, ReportMode};
pub use search::{parse_react_reply, run_search_agent, ReactReply, DEFAULT_MAX_ITERS};

pub const NO_EXPERIENCE_SENTINEL: &str = "no relevant prior experience";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub agent_type: String,
    pub description: String,
    /// Excerpt chosen by the coordinator. Never the raw stack.
    pub context: String,
    pub locale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactStep {
    pub thought: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentStatus {
    Ok,
    ToolBudgetExhausted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResult {
    pub status: AgentStatus,
    pub content: String,
    pub citations: Vec<String>,
    pub steps_taken: u32,
}

impl AgentResult {
    fn failed(content: impl Into<String>, steps_taken: u32) -> Self {
        Self { status: AgentStatus::Failed, content: content.into(), citations: Vec::new(), steps_taken }
    }
}

/// Private record of one agent invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub agent: String,
    pub steps: Vec<ReactStep>,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRun {
    pub result: AgentResult,
    pub transcript: AgentTranscript,
}

/// Which implementation serves a requested `agent_type`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Search,
    /// Served by the search agent with a decomposition instruction.
    Replan,
    Report,
    ExperienceSearch,
}

impl AgentKind {
    pub fn resolve(agent_type: &str) -> Option<Self> {
        let key = agent_type.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match key.as_str() {
            "searcher" | "search" | "researcher" | "search_agent" => Some(Self::Search),
            "replanner" | "planner" => Some(Self::Replan),
            "reporter" | "report" | "writer" | "report_agent" => Some(Self::Report),
            "experience" | "experience_search" | "experience_search_agent" => Some(Self::ExperienceSearch),
            _ => None,
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Self::Search => "searcher",
            Self::Replan => "replanner",
            Self::Report => "reporter",
            Self::ExperienceSearch => "experience_search",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub name: String,
    pub description: String,
}

pub fn default_agents() -> Vec<AgentDescriptor> {
    let d = |name: &str, description: &str| AgentDescriptor { name: name.into(), description: description.into() };
    vec![
        d("searcher", "gathers evidence with encyclopedia and web search"),
        d("replanner", "decomposes a retrieval problem into search steps, only at the start of a task"),
        d("reporter", "organizes gathered information into an answer or a structured report"),
    ]
}

/// Instruction prefix used when a replanner request is served by the search agent.
pub fn replan_description(description: &str) -> String {
    format!("Break this problem into retrieval steps and carry out the first of them: {description}")
}

/// Query the user's experience and format it for the coordinator.
pub fn run_experience_search_agent(
    task_text: &str,
    user_id: &str,
    store: &ExperienceStore,
    top_k: usize,
) -> AgentResult {
    let retrieved = retrieve(
        store,
        &ExperienceQuery { task_text: task_text.to_string(), user_id: user_id.to_string(), top_k: top_k.max(1) },
    );
    if retrieved.is_empty() {
        return AgentResult {
            status: AgentStatus::Ok,
            content: NO_EXPERIENCE_SENTINEL.into(),
            citations: Vec::new(),
            steps_taken: 1,
        };
    }
    AgentResult {
        status: AgentStatus::Ok,
        content: format_block(&retrieved),
        citations: retrieved.items.iter().map(|i| format!("experience:{}", i.component.label())).collect(),
        steps_taken: 1,
    }
}
