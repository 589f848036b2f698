use serde_json::{Map, Value};
use thiserror::Error;

use super::{timestamp, ActionKind, CoordinatorDecision, DelegateParams, RuntimeConfig, TaskSpec};
use crate::agents::AgentDescriptor;
use crate::document::first_json_object;
use crate::llm_gateway::{render_template, vars, ChatClient, ChatMessage, GatewayError, TemplateVars};
use crate::prompts;
use crate::task_memory::MemoryStack;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecisionError {
    #[error("no JSON object found in the reply")]
    MalformedDocument,
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("missing or empty field `{0}`")]
    MissingField(&'static str),
}

#[derive(Debug, Error)]
pub enum DecideError {
    #[error("decision unparsable after {attempts} attempt(s): {last}")]
    Parse { attempts: u32, last: DecisionError },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn text_field(obj: &Map<String, Value>, key: &str) -> Option<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Some(s.trim().to_string()),
        _ => None,
    }
}

/// Parse the first JSON object in `raw` as a coordinator decision.
///
/// Delegate parameters may also be spelled `handsoff` / `subtask`, either
/// inside `params` or at the top level.
pub fn parse_decision(raw: &str) -> Result<CoordinatorDecision, DecisionError> {
    let obj = first_json_object(raw).ok_or(DecisionError::MalformedDocument)?;
    let action = match obj.get("action") {
        Some(Value::String(s)) => ActionKind::parse(s).ok_or_else(|| DecisionError::UnknownAction(s.clone()))?,
        Some(other) => return Err(DecisionError::UnknownAction(other.to_string())),
        None => return Err(DecisionError::MissingField("action")),
    };
    let reasoning = text_field(&obj, "reasoning").ok_or(DecisionError::MissingField("reasoning"))?;
    let params = if action == ActionKind::Delegate {
        let inner = match obj.get("params") {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        };
        let pick = |keys: &[&str]| {
            keys.iter().find_map(|k| text_field(&inner, k).or_else(|| text_field(&obj, k))).filter(|s| !s.is_empty())
        };
        Some(DelegateParams {
            agent_type: pick(&["agent_type", "handsoff"]).ok_or(DecisionError::MissingField("params.agent_type"))?,
            task_description: pick(&["task_description", "subtask"])
                .ok_or(DecisionError::MissingField("params.task_description"))?,
        })
    } else {
        None
    };
    Ok(CoordinatorDecision {
        action,
        reasoning,
        params,
        instruction: text_field(&obj, "instruction").unwrap_or_default(),
        locale: text_field(&obj, "locale").unwrap_or_default(),
    })
}

/// Variables shared by every coordinator mode. Mode-specific values are
/// overlaid by the caller.
pub(super) fn coordinator_vars(
    task: &TaskSpec,
    stack: &MemoryStack,
    agents: &[AgentDescriptor],
    step: u32,
    cfg: &RuntimeConfig,
    mode: &str,
) -> TemplateVars {
    let names: Vec<&str> = agents.iter().map(|a| a.name.as_str()).collect();
    let descriptions: Vec<String> = agents.iter().map(|a| format!("{}: {}", a.name, a.description)).collect();
    let actions: Vec<&str> = ActionKind::ALL.iter().map(|a| a.as_str()).collect();
    vars([
        ("CURRENT_TIME", timestamp(task.created_at)),
        ("current_node", "coordinator".to_string()),
        ("current_action", mode.to_string()),
        ("memory_stack", stack.render(cfg.memory_budget).text),
        ("available_actions", actions.join(", ")),
        ("available_sub_agents", names.join(", ")),
        ("sub_agents_description", descriptions.join("; ")),
        ("current_progress", format!("step {step} of at most {}", task.max_steps)),
        ("decision_reasoning", String::new()),
        ("instruction", String::new()),
        ("summarization_focus", String::new()),
        ("reflection_target", String::new()),
        ("need_reflect_context", String::new()),
        ("need_summary_context", String::new()),
    ])
}

/// Ask the model for the next action, re-prompting on unparsable replies.
pub fn decide(
    client: &dyn ChatClient,
    task: &TaskSpec,
    stack: &MemoryStack,
    agents: &[AgentDescriptor],
    step: u32,
    cfg: &RuntimeConfig,
) -> Result<CoordinatorDecision, DecideError> {
    let system = render_template(prompts::COORDINATOR, &coordinator_vars(task, stack, agents, step, cfg, "decision"))
        .expect("coordinator template renders");
    let mut messages =
        vec![ChatMessage::system(system), ChatMessage::user(format!("Decide the next action. Step {step}."))];
    let mut attempts = 0;
    loop {
        attempts += 1;
        let reply = client.chat(messages.clone())?.text;
        match parse_decision(&reply) {
            Ok(d) => return Ok(d),
            Err(e) if attempts > cfg.max_reparse => return Err(DecideError::Parse { attempts, last: e }),
            Err(e) => {
                tracing::debug!(error = %e, attempt = attempts, "re-prompting for a decision");
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be used: {e}. Reply with a single JSON object with the fields action, reasoning, params, instruction and locale."
                )));
            }
        }
    }
}
