use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use super::{merge, validate_record, ExperienceRecord, MergeError};
use crate::document::first_json_object;
use crate::llm_gateway::{render_template, vars, ChatClient, ChatMessage, GatewayError};
use crate::prompts;
use crate::task_memory::MemoryStack;

/// Re-prompts allowed after the first invalid curator reply.
pub const CURATION_RETRIES: usize = 2;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("curator output unusable after {attempts} attempt(s): {last}")]
    CurationParseFailure { attempts: usize, last: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Merge(#[from] MergeError),
}

#[derive(Debug)]
pub struct CurationOutcome {
    /// Merged record, or the existing record unchanged on failure.
    pub record: ExperienceRecord,
    /// Every raw curator reply, in order.
    pub responses: Vec<String>,
    /// Why curation did not apply, when it did not.
    pub error: Option<CurationError>,
    /// The task stack was empty, so no model call was made.
    pub skipped: bool,
}

impl CurationOutcome {
    pub fn is_curated(&self) -> bool {
        self.error.is_none() && !self.skipped
    }
}

/// Distill a finished run's task memory into the user's experience record.
///
/// Never fails outright: any failure yields `existing` unchanged with the
/// error attached to the outcome.
pub fn curate(
    task_stack: &MemoryStack,
    existing: &ExperienceRecord,
    now: DateTime<Utc>,
    client: &dyn ChatClient,
) -> CurationOutcome {
    let mut outcome = CurationOutcome { record: existing.clone(), responses: Vec::new(), error: None, skipped: false };
    if task_stack.is_empty() {
        outcome.skipped = true;
        return outcome;
    }
    let prompt = render_template(
        prompts::CURATOR,
        &vars([
            ("task_memory_json", task_stack.snapshot_json()),
            (
                "existing_long_term_memory_json",
                serde_json::to_string_pretty(&existing.components).expect("components serialize"),
            ),
            ("now_timestamp", now.to_rfc3339_opts(SecondsFormat::Secs, true)),
        ]),
    )
    .expect("curator template renders");
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut last_error = String::new();
    for attempt in 0..=CURATION_RETRIES {
        let reply = match client.chat(messages.clone()) {
            Ok(c) => c.text,
            Err(e) => {
                tracing::warn!(error = %e, "curation gateway call failed");
                outcome.error = Some(e.into());
                return outcome;
            }
        };
        outcome.responses.push(reply.clone());
        let problem = match first_json_object(&reply) {
            None => "no JSON object found".to_string(),
            Some(doc) => match validate_record(&serde_json::Value::Object(doc)) {
                Ok(components) => {
                    let fresh = ExperienceRecord { user_id: existing.user_id.clone(), updated_at: now, components };
                    match merge(existing, &fresh) {
                        Ok(mut merged) => {
                            merged.updated_at = now;
                            outcome.record = merged;
                        }
                        Err(e) => outcome.error = Some(e.into()),
                    }
                    return outcome;
                }
                Err(errs) => errs.to_string(),
            },
        };
        tracing::debug!(attempt, %problem, "curator reply rejected");
        last_error = problem;
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(format!(
            "Your reply could not be used: {last_error}. Return JSON only, exactly in the required schema."
        )));
    }
    tracing::warn!(%last_error, "curation failed, keeping existing experience");
    outcome.error = Some(CurationError::CurationParseFailure { attempts: CURATION_RETRIES + 1, last: last_error });
    outcome
}
