use std::sync::OnceLock;

use regex::Regex;

use super::{AgentResult, AgentRun, AgentStatus, AgentTranscript, ReactStep, SubTask};
use crate::llm_gateway::{render_template, vars, ChatClient, ChatMessage};
use crate::prompts;
use crate::tools::{ToolCall, ToolRegistry};

pub const DEFAULT_MAX_ITERS: u32 = 6;

/// One parsed search-agent reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReactReply {
    Tool {
        thought: String,
        tool: String,
        query: String,
    },
    Answer {
        thought: String,
        answer: String,
    },
    /// A `<tool>` block without the `name|query` shape.
    MalformedTool {
        thought: String,
        body: String,
    },
    Unparsed,
}

fn tag_re(tag: &str) -> Regex {
    // Closing tags are optional: a reply may stop right after the payload.
    Regex::new(&format!(r"(?s)<{tag}>\s*(.*?)\s*(?:</{tag}>|<thought>|<tool>|<answer>|\z)")).expect("static regex")
}

fn tags() -> &'static [Regex; 3] {
    static RE: OnceLock<[Regex; 3]> = OnceLock::new();
    RE.get_or_init(|| [tag_re("thought"), tag_re("tool"), tag_re("answer")])
}

pub fn parse_react_reply(reply: &str) -> ReactReply {
    let [thought_re, tool_re, answer_re] = tags();
    let thought = thought_re.captures(reply).map(|c| c[1].trim().to_string()).unwrap_or_default();
    let tool = tool_re.captures(reply).map(|c| (c.get(0).unwrap().start(), c[1].trim().to_string()));
    let answer = answer_re.captures(reply).map(|c| (c.get(0).unwrap().start(), c[1].trim().to_string()));
    let tool_first = match (&tool, &answer) {
        (Some((t, _)), Some((a, _))) => t < a,
        (Some(_), None) => true,
        _ => false,
    };
    if tool_first {
        let body = tool.expect("checked").1;
        return match body.split_once('|') {
            Some((name, query)) if !name.trim().is_empty() => {
                ReactReply::Tool { thought, tool: name.trim().to_string(), query: query.trim().to_string() }
            }
            _ => ReactReply::MalformedTool { thought, body },
        };
    }
    match answer {
        Some((_, answer)) => ReactReply::Answer { thought, answer },
        None => ReactReply::Unparsed,
    }
}

/// ReAct loop over the registry's tools. At least one tool call must precede
/// an accepted answer; the loop stops after `max_iters` model calls.
pub fn run_search_agent(subtask: &SubTask, tools: &ToolRegistry, client: &dyn ChatClient, max_iters: u32) -> AgentRun {
    let max_iters = max_iters.max(1);
    let system = render_template(
        prompts::SEARCH_AGENT,
        &vars([("tools", tools.tool_names().join(", ")), ("locale", subtask.locale.clone())]),
    )
    .expect("search agent template renders");
    let task = render_template(
        prompts::SEARCH_TASK,
        &vars([("description", subtask.description.clone()), ("context", subtask.context.clone())]),
    )
    .expect("search task template renders");
    let mut transcript = AgentTranscript { agent: subtask.agent_type.clone(), ..Default::default() };
    let mut messages = vec![ChatMessage::system(system), ChatMessage::user(task)];
    let mut observations: Vec<String> = Vec::new();
    let mut citations: Vec<String> = Vec::new();
    let mut tool_calls = 0u32;

    for iter in 1..=max_iters {
        let reply = match client.chat(messages.clone()) {
            Ok(c) => c.text,
            Err(e) => {
                transcript.messages = messages;
                return AgentRun {
                    result: AgentResult::failed(format!("search agent failed: {e}"), iter - 1),
                    transcript,
                };
            }
        };
        messages.push(ChatMessage::assistant(reply.clone()));
        let feedback = match parse_react_reply(&reply) {
            ReactReply::Tool { thought, tool, query } => {
                let call = ToolCall::search(tool, query);
                let result = tools.dispatch_tool(&call);
                tool_calls += 1;
                for s in result.sources {
                    if !citations.contains(&s) {
                        citations.push(s);
                    }
                }
                observations.push(result.text.clone());
                transcript.steps.push(ReactStep {
                    thought,
                    tool_call: Some(call),
                    observation: Some(result.text.clone()),
                    answer: None,
                });
                result.text
            }
            ReactReply::Answer { thought, answer } if tool_calls > 0 && !answer.is_empty() => {
                transcript.steps.push(ReactStep {
                    thought,
                    tool_call: None,
                    observation: None,
                    answer: Some(answer.clone()),
                });
                transcript.messages = messages;
                return AgentRun {
                    result: AgentResult { status: AgentStatus::Ok, content: answer, citations, steps_taken: iter },
                    transcript,
                };
            }
            ReactReply::Answer { .. } if tool_calls == 0 => {
                "Search with a tool before answering: reply with <tool>TOOL_NAME|query</tool>.".to_string()
            }
            ReactReply::Answer { .. } => "The answer was empty. Reply with <answer>your findings</answer>.".to_string(),
            ReactReply::MalformedTool { thought, body } => {
                let text = format!("tool error: malformed tool call `{body}`, expected TOOL_NAME|query");
                transcript.steps.push(ReactStep {
                    thought,
                    tool_call: None,
                    observation: Some(text.clone()),
                    answer: None,
                });
                text
            }
            ReactReply::Unparsed => {
                "Reply with a <thought> block followed by either <tool>TOOL_NAME|query</tool> or <answer>...</answer>."
                    .to_string()
            }
        };
        messages.push(ChatMessage::user(feedback));
    }

    transcript.messages = messages;
    let content = if observations.is_empty() {
        "Findings so far: none".to_string()
    } else {
        format!("Findings so far:\n{}", observations.join("\n"))
    };
    AgentRun {
        result: AgentResult { status: AgentStatus::ToolBudgetExhausted, content, citations, steps_taken: max_iters },
        transcript,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::Gateway;
    use crate::tools::{CorpusDoc, FixtureIndex, WIKI};
    use std::sync::Arc;

    fn tools() -> ToolRegistry {
        let mut reg = ToolRegistry::new();
        reg.register(
            WIKI,
            Arc::new(FixtureIndex::new(vec![
                CorpusDoc::new("1", "Hydrocephalus", "Raised cerebrospinal fluid pressure in the ventricles."),
                CorpusDoc::new("2", "Paris", "Capital of France."),
            ])),
        );
        reg
    }

    fn subtask() -> SubTask {
        SubTask {
            agent_type: "searcher".into(),
            description: "find CSF pressure standard".into(),
            context: String::new(),
            locale: "en-US".into(),
        }
    }

    #[test]
    fn parses_tagged_replies() {
        assert_eq!(
            parse_react_reply("<thought>look</thought>\n<tool>wiki|CSF pressure</tool>"),
            ReactReply::Tool { thought: "look".into(), tool: "wiki".into(), query: "CSF pressure".into() }
        );
        assert_eq!(
            parse_react_reply("<thought>done</thought><answer>It is 42"),
            ReactReply::Answer { thought: "done".into(), answer: "It is 42".into() }
        );
        assert!(matches!(parse_react_reply("<tool>wiki</tool>"), ReactReply::MalformedTool { .. }));
        assert_eq!(parse_react_reply("just prose"), ReactReply::Unparsed);
    }

    #[test]
    fn tool_then_answer() {
        let gw = Gateway::scripted([
            "<thought>MARKER-THOUGHT-1</thought><tool>wiki|Cerebrospinal fluid pressure</tool>",
            "<thought>enough</thought><answer>Hydrocephalus article found; no reference value.</answer>",
        ]);
        let run = run_search_agent(&subtask(), &tools(), &gw, 6);
        assert_eq!(run.result.status, AgentStatus::Ok);
        assert_eq!(run.result.steps_taken, 2);
        assert_eq!(run.result.citations, ["Hydrocephalus"]);
        assert!(run.transcript.steps[0].observation.as_ref().unwrap().contains("'title': 'Hydrocephalus'"));
        assert!(!run.result.content.contains("MARKER-THOUGHT-1"));
    }

    #[test]
    fn answer_without_search_is_refused() {
        let gw = Gateway::scripted([
            "<answer>From memory: 42</answer>",
            "<tool>wiki|Paris</tool>",
            "<answer>Paris is the capital of France.</answer>",
        ]);
        let run = run_search_agent(&subtask(), &tools(), &gw, 6);
        assert_eq!(run.result.status, AgentStatus::Ok);
        assert_eq!(run.result.steps_taken, 3);
        assert_eq!(run.result.content, "Paris is the capital of France.");
    }

    #[test]
    fn budget_exhausted() {
        let gw = Gateway::scripted(["<tool>wiki|Paris</tool>"]);
        let run = run_search_agent(&subtask(), &tools(), &gw, 1);
        assert_eq!(run.result.status, AgentStatus::ToolBudgetExhausted);
        assert_eq!(run.result.steps_taken, 1);
        assert!(run.result.content.starts_with("Findings so far:\nObservation:"));
    }

    #[test]
    fn tool_errors_become_observations() {
        let gw = Gateway::scripted(["<tool>calculator|1+1</tool>", "<answer>gave up</answer>"]);
        let run = run_search_agent(&subtask(), &tools(), &gw, 6);
        assert_eq!(run.result.status, AgentStatus::Ok);
        assert!(run.transcript.steps[0].observation.as_ref().unwrap().starts_with("tool error: unknown tool"));
    }

    #[test]
    fn gateway_failure_is_failed() {
        let gw = Gateway::scripted(["<tool>wiki|Paris</tool>"]);
        let run = run_search_agent(&subtask(), &tools(), &gw, 6);
        assert_eq!(run.result.status, AgentStatus::Failed);
        assert_eq!(run.result.steps_taken, 1);
    }
}
