use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{request_digest, ChatBackend, ChatRequest, Completion, GatewayError, Usage};

/// One line of a replay fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub index: usize,
    pub request_digest: String,
    pub response_text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Serves recorded responses by request sequence index.
#[derive(Debug)]
pub struct ReplayBackend {
    entries: Vec<FixtureEntry>,
    cursor: Mutex<usize>,
    strict: bool,
}

impl ReplayBackend {
    pub fn new(entries: Vec<FixtureEntry>, strict: bool) -> Result<Self, GatewayError> {
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(GatewayError::Fixture(format!(
                    "fixture line {} has index {}, expected {i}",
                    i + 1,
                    e.index
                )));
            }
        }
        Ok(Self { entries, cursor: Mutex::new(0), strict })
    }

    pub fn from_file(path: &Path, strict: bool) -> Result<Self, GatewayError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str::<FixtureEntry>(l)
                    .map_err(|e| GatewayError::Fixture(format!("{} line {}: {e}", path.display(), n + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries, strict)
    }

    /// Number of recorded responses not yet served.
    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.cursor.lock().expect("replay poisoned")
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        let mut cursor = self.cursor.lock().expect("replay poisoned");
        let index = *cursor;
        let entry = self.entries.get(index).ok_or(GatewayError::ReplayExhausted { index })?;
        if self.strict {
            let actual = request_digest(&req.messages);
            if actual != entry.request_digest {
                return Err(GatewayError::ReplayMismatch { index, expected: entry.request_digest.clone(), actual });
            }
        }
        *cursor += 1;
        Ok(Completion {
            text: entry.response_text.clone(),
            usage: Usage { prompt_tokens: entry.prompt_tokens, completion_tokens: entry.completion_tokens },
        })
    }

    fn describe(&self) -> String {
        format!("replay(strict={})", self.strict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_order_indices() {
        let e = FixtureEntry {
            index: 1,
            request_digest: String::new(),
            response_text: "x".into(),
            prompt_tokens: 0,
            completion_tokens: 0,
        };
        assert!(ReplayBackend::new(vec![e], true).is_err());
    }
}
