use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use super::{AgentResult, AgentRun, AgentStatus, AgentTranscript, SubTask};
use crate::llm_gateway::{render_template, vars, ChatClient, ChatMessage, TemplateVars};
use crate::prompts;

pub const INSUFFICIENT_CONTEXT: &str = "insufficient context";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    /// One organize-and-answer call.
    Answer,
    /// Outline call, then one call per section.
    Structured,
}

pub fn report_mode(description: &str) -> ReportMode {
    let d = description.to_lowercase();
    if d.contains("report") || d.contains("outline") {
        ReportMode::Structured
    } else {
        ReportMode::Answer
    }
}

fn outline_sections(outline: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*\d+[.)]\s+(.+?)\s*$").expect("static regex"));
    outline
        .lines()
        .filter_map(|l| re.captures(l).map(|c| c[1].trim_matches(['#', '*', ' ']).to_string()))
        .filter(|s| !s.is_empty())
        .collect()
}

struct Session<'a> {
    client: &'a dyn ChatClient,
    transcript: AgentTranscript,
    calls: u32,
}

impl Session<'_> {
    fn ask(&mut self, template: &str, v: &TemplateVars) -> Result<String, String> {
        let prompt = render_template(template, v).map_err(|e| e.to_string())?;
        self.transcript.messages.push(ChatMessage::user(prompt.clone()));
        self.calls += 1;
        let reply =
            self.client.chat(vec![ChatMessage::user(prompt)]).map_err(|e| format!("report agent failed: {e}"))?.text;
        self.transcript.messages.push(ChatMessage::assistant(reply.clone()));
        Ok(reply.trim().to_string())
    }
}

/// Write an answer or a sectioned report from the delegated context only.
pub fn run_report_agent(subtask: &SubTask, client: &dyn ChatClient) -> AgentRun {
    let mut session = Session {
        client,
        transcript: AgentTranscript { agent: subtask.agent_type.clone(), ..Default::default() },
        calls: 0,
    };
    let outcome = match report_mode(&subtask.description) {
        ReportMode::Answer => answer(subtask, &mut session),
        ReportMode::Structured => structured(subtask, &mut session),
    };
    let result = match outcome {
        Ok(content) if !content.trim().is_empty() => {
            AgentResult { status: AgentStatus::Ok, content, citations: Vec::new(), steps_taken: session.calls }
        }
        Ok(_) => AgentResult::failed("report agent returned an empty response", session.calls),
        Err(e) => AgentResult::failed(e, session.calls),
    };
    AgentRun { result, transcript: session.transcript }
}

fn answer(subtask: &SubTask, session: &mut Session) -> Result<String, String> {
    let insufficient = subtask.context.trim().is_empty();
    let mut v = vars([("description", subtask.description.clone()), ("context", subtask.context.clone())]);
    v.insert("insufficient_context".into(), Value::Bool(insufficient));
    let reply = session.ask(prompts::REPORT_ANSWER, &v)?;
    if insufficient && !reply.to_lowercase().starts_with(INSUFFICIENT_CONTEXT) {
        return Ok(format!("{INSUFFICIENT_CONTEXT}: {reply}"));
    }
    Ok(reply)
}

fn structured(subtask: &SubTask, session: &mut Session) -> Result<String, String> {
    let base = vars([("description", subtask.description.clone()), ("context", subtask.context.clone())]);
    let outline = session.ask(prompts::REPORT_OUTLINE, &base)?;
    let sections = outline_sections(&outline);
    if sections.is_empty() {
        return Err(format!("report outline has no numbered sections: {outline:?}"));
    }
    let mut parts = Vec::with_capacity(sections.len());
    for section in &sections {
        let mut v = base.clone();
        v.insert("outline".into(), outline.clone().into());
        v.insert("section".into(), section.clone().into());
        let body = session.ask(prompts::REPORT_SECTION, &v)?;
        parts.push(format!("## {section}\n\n{body}"));
    }
    Ok(parts.join("\n\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::Gateway;

    fn subtask(description: &str, context: &str) -> SubTask {
        SubTask {
            agent_type: "reporter".into(),
            description: description.into(),
            context: context.into(),
            locale: "en-US".into(),
        }
    }

    #[test]
    fn mode_heuristic() {
        assert_eq!(report_mode("Write a REPORT on X"), ReportMode::Structured);
        assert_eq!(report_mode("Draft an outline"), ReportMode::Structured);
        assert_eq!(report_mode("Answer initial query based on previous observations."), ReportMode::Answer);
    }

    #[test]
    fn answer_mode() {
        let gw = Gateway::scripted(["The normal range is 80 to 180 mmH2O. Therefore, my answer is A."]);
        let run = run_report_agent(&subtask("Answer the query", "CSF 80 to 180 mmH2O"), &gw);
        assert_eq!(run.result.status, AgentStatus::Ok);
        assert!(run.result.content.contains("Therefore, my answer is A"));
        assert_eq!(run.result.steps_taken, 1);
    }

    #[test]
    fn structured_mode_sections() {
        let gw = Gateway::scripted([
            "1. Background\n2. Findings\n3. Conclusion",
            "bg body",
            "findings body",
            "conclusion body",
        ]);
        let run = run_report_agent(&subtask("Write a report on CSF pressure", "ctx"), &gw);
        assert_eq!(run.result.status, AgentStatus::Ok);
        assert_eq!(run.result.content.matches("\n## ").count() + 1, 3);
        assert!(run.result.content.starts_with("## Background\n\nbg body"));
        assert_eq!(run.result.steps_taken, 4);
    }

    #[test]
    fn empty_context_flagged() {
        let gw = Gateway::scripted(["I cannot tell."]);
        let run = run_report_agent(&subtask("Answer the query", ""), &gw);
        assert_eq!(run.result.status, AgentStatus::Ok);
        assert!(run.result.content.starts_with("insufficient context"));
        let prompt = &run.transcript.messages[0].content;
        assert!(prompt.contains("Begin your reply with \"insufficient context\""));
    }

    #[test]
    fn failures() {
        let gw = Gateway::scripted(Vec::<String>::new());
        assert_eq!(run_report_agent(&subtask("Answer", "c"), &gw).result.status, AgentStatus::Failed);
        let gw = Gateway::scripted(["no numbered lines"]);
        assert_eq!(run_report_agent(&subtask("report", "c"), &gw).result.status, AgentStatus::Failed);
    }
}
