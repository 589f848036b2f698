//! Prompt templates, embedded from `templates/`.

use crate::llm_gateway::ChatMessage;

pub const COORDINATOR: &str = include_str!("../templates/coordinator.txt");
pub const CURATOR: &str = include_str!("../templates/curator.txt");
pub const SEARCH_AGENT: &str = include_str!("../templates/search_agent.txt");
pub const SEARCH_TASK: &str = include_str!("../templates/search_task.txt");
pub const REPORT_ANSWER: &str = include_str!("../templates/report_answer.txt");
pub const REPORT_OUTLINE: &str = include_str!("../templates/report_outline.txt");
pub const REPORT_SECTION: &str = include_str!("../templates/report_section.txt");
pub const EXPERIENCE_SUMMARIZE: &str = include_str!("../templates/experience_summarize.txt");

/// Which kind of request a message list is, judged from its first message:
/// `decision`, `plan`, `reflect`, `summarize`, `search`, `report`, `curator`,
/// `experience` or `other`.
pub fn channel(messages: &[ChatMessage]) -> &'static str {
    let Some(first) = messages.first() else {
        return "other";
    };
    let text = first.content.as_str();
    if text.starts_with("---\nCURRENT_TIME") {
        let mode = text.lines().find_map(|l| l.trim().strip_prefix("- Current Action: ")).unwrap_or("");
        return match mode.trim() {
            "decision" => "decision",
            "plan" => "plan",
            "reflect" => "reflect",
            "summarize" => "summarize",
            _ => "other",
        };
    }
    [
        ("You are a search agent", "search"),
        ("You are a report agent", "report"),
        ("You maintain a structured experience memory", "curator"),
        ("Summarize the following prior experience", "experience"),
    ]
    .into_iter()
    .find_map(|(prefix, name)| text.starts_with(prefix).then_some(name))
    .unwrap_or("other")
}
