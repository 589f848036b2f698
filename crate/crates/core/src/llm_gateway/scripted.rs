use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{estimate_usage, ChatBackend, ChatRequest, Completion, GatewayError};
use crate::prompts;

#[derive(Debug)]
enum Script {
    Sequential(VecDeque<String>),
    /// One queue per request channel, see [`prompts::channel`].
    Routed(BTreeMap<String, VecDeque<String>>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Sequential(Vec<String>),
    Routed(BTreeMap<String, Vec<String>>),
}

/// Pops canned responses, either in order or per request channel. Usage is
/// estimated from text length.
#[derive(Debug)]
pub struct ScriptedBackend {
    queue: Mutex<Script>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { queue: Mutex::new(Script::Sequential(responses.into_iter().map(Into::into).collect())) }
    }

    /// Replies keyed by channel (`decision`, `plan`, `reflect`, `summarize`,
    /// `search`, `report`, `curator`, `experience`).
    pub fn routed<I, K, V>(channels: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: IntoIterator,
        V::Item: Into<String>,
    {
        Self {
            queue: Mutex::new(Script::Routed(
                channels.into_iter().map(|(k, v)| (k.into(), v.into_iter().map(Into::into).collect())).collect(),
            )),
        }
    }

    /// Load a script file: a JSON array of replies served in order, or an
    /// object mapping channel names to arrays of replies.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let file: ScriptFile = serde_json::from_str(&text).map_err(|e| {
            GatewayError::Fixture(format!(
                "{}: expected an array of strings or an object of string arrays: {e}",
                path.display()
            ))
        })?;
        Ok(match file {
            ScriptFile::Sequential(v) => Self::new(v),
            ScriptFile::Routed(m) => Self::routed(m),
        })
    }

    pub fn remaining(&self) -> usize {
        match &*self.queue.lock().expect("script poisoned") {
            Script::Sequential(q) => q.len(),
            Script::Routed(m) => m.values().map(VecDeque::len).sum(),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        let text = match &mut *self.queue.lock().expect("script poisoned") {
            Script::Sequential(q) => q.pop_front().ok_or(GatewayError::ScriptExhausted)?,
            Script::Routed(m) => {
                let channel = prompts::channel(&req.messages);
                m.get_mut(channel)
                    .and_then(VecDeque::pop_front)
                    .ok_or_else(|| GatewayError::ScriptChannelExhausted(channel.to_string()))?
            }
        };
        let usage = estimate_usage(&req.messages, &text);
        Ok(Completion { text, usage })
    }

    fn describe(&self) -> String {
        "scripted".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{ChatClient, ChatMessage, Gateway, RequestDefaults};

    #[test]
    fn routed_by_channel() {
        let gw = Gateway::new(
            ScriptedBackend::routed([("report", vec!["r1"]), ("other", vec!["o1", "o2"])]),
            RequestDefaults::default(),
        );
        let report = ChatMessage::user("You are a report agent. Answer.");
        assert_eq!(gw.chat(vec![ChatMessage::user("hello")]).unwrap().text, "o1");
        assert_eq!(gw.chat(vec![report.clone()]).unwrap().text, "r1");
        assert!(matches!(gw.chat(vec![report]), Err(GatewayError::ScriptChannelExhausted(c)) if c == "report"));
        assert_eq!(gw.chat(vec![ChatMessage::user("hello")]).unwrap().text, "o2");
    }

    #[test]
    fn file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let seq = dir.path().join("s.json");
        std::fs::write(&seq, r#"["a","b"]"#).unwrap();
        assert_eq!(ScriptedBackend::from_file(&seq).unwrap().remaining(), 2);
        let routed = dir.path().join("r.json");
        std::fs::write(&routed, r#"{"decision":["a"],"search":["b","c"]}"#).unwrap();
        assert_eq!(ScriptedBackend::from_file(&routed).unwrap().remaining(), 3);
        std::fs::write(&routed, r#"{"decision":"a"}"#).unwrap();
        assert!(ScriptedBackend::from_file(&routed).is_err());
    }
}
