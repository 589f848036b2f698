//! Persistent, per-user experience memory.
//!
//! Each user owns one [`ExperienceRecord`] holding three components: user
//! profile signals, semantic facts, and procedural SOPs. Records are curated
//! from completed task memory by a model (see [`curate`]), merged by exact-text
//! union, persisted one document per user, and retrieved lexically at the
//! start of a new run.

mod curate;
mod retrieve;
mod store;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use curate::{curate, CurationError, CurationOutcome, CURATION_RETRIES};
pub use retrieve::{
    format_block, inject, retrieve, retrieve_with, BlockSummarizer, Component, ExperienceQuery, ExperienceScorer,
    GatewaySummarizer, JaccardScorer, RetrievedExperience, RetrievedItem, INJECTION_TOKEN_LIMIT,
};
pub use store::{user_file_stem, ExperienceStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcedureSop {
    pub scenario: String,
    pub procedure: String,
    pub rationale: String,
}

/// The three curated components, exactly as the curator returns them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryComponents {
    pub user_profiles: Vec<String>,
    pub semantic_memory: Vec<String>,
    pub procedural_memory: Vec<ProcedureSop>,
}

impl MemoryComponents {
    pub fn is_empty(&self) -> bool {
        self.user_profiles.is_empty() && self.semantic_memory.is_empty() && self.procedural_memory.is_empty()
    }
}

/// Stored per-user document: `{user_id, updated_at, user_profiles,
/// semantic_memory, procedural_memory}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub user_id: String,
    pub updated_at: DateTime<Utc>,
    #[serde(flatten)]
    pub components: MemoryComponents,
}

impl ExperienceRecord {
    pub fn empty(user_id: impl Into<String>, now: DateTime<Utc>) -> Self {
        Self { user_id: user_id.into(), updated_at: now, components: MemoryComponents::default() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("expected a JSON object at `{0}`")]
    NotAnObject(String),
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("unexpected key `{0}`")]
    ExtraKey(String),
    #[error("`{path}` must be {expected}")]
    WrongType { path: String, expected: &'static str },
    #[error("empty element at `{0}`")]
    EmptyElement(String),
    #[error("duplicate element at `{0}`")]
    DuplicateElement(String),
    #[error("invalid timestamp at `{0}`")]
    BadTimestamp(String),
}

/// All violations found in one document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct SchemaErrors(pub Vec<SchemaError>);

impl SchemaErrors {
    pub fn contains(&self, e: &SchemaError) -> bool {
        self.0.contains(e)
    }
}

const COMPONENT_KEYS: [&str; 3] = ["user_profiles", "semantic_memory", "procedural_memory"];
const SOP_KEYS: [&str; 3] = ["scenario", "procedure", "rationale"];

fn check_keys(map: &Map<String, Value>, allowed: &[&str], prefix: &str, errs: &mut Vec<SchemaError>) {
    let path = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    for k in allowed {
        if !map.contains_key(*k) {
            errs.push(SchemaError::MissingKey(path(k)));
        }
    }
    for k in map.keys() {
        if !allowed.contains(&k.as_str()) {
            errs.push(SchemaError::ExtraKey(path(k)));
        }
    }
}

fn string_list(v: Option<&Value>, path: &str, dedupe: bool, errs: &mut Vec<SchemaError>) -> Vec<String> {
    let Some(v) = v else { return Vec::new() };
    let Some(items) = v.as_array() else {
        errs.push(SchemaError::WrongType { path: path.into(), expected: "an array of strings" });
        return Vec::new();
    };
    let mut out: Vec<String> = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let p = format!("{path}[{i}]");
        match item.as_str() {
            None => errs.push(SchemaError::WrongType { path: p, expected: "a string" }),
            Some(s) if s.trim().is_empty() => errs.push(SchemaError::EmptyElement(p)),
            Some(s) if out.iter().any(|o| o == s) => {
                if !dedupe {
                    errs.push(SchemaError::DuplicateElement(p));
                }
            }
            Some(s) => out.push(s.to_string()),
        }
    }
    out
}

fn sop_list(v: Option<&Value>, dedupe: bool, errs: &mut Vec<SchemaError>) -> Vec<ProcedureSop> {
    let path = "procedural_memory";
    let Some(v) = v else { return Vec::new() };
    let Some(items) = v.as_array() else {
        errs.push(SchemaError::WrongType { path: path.into(), expected: "an array of objects" });
        return Vec::new();
    };
    let mut out: Vec<ProcedureSop> = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let p = format!("{path}[{i}]");
        let Some(obj) = item.as_object() else {
            errs.push(SchemaError::NotAnObject(p));
            continue;
        };
        let before = errs.len();
        check_keys(obj, &SOP_KEYS, &p, errs);
        let mut field = |k: &str| -> String {
            match obj.get(k) {
                None => String::new(),
                Some(Value::String(s)) if s.trim().is_empty() => {
                    errs.push(SchemaError::EmptyElement(format!("{p}.{k}")));
                    String::new()
                }
                Some(Value::String(s)) => s.clone(),
                Some(_) => {
                    errs.push(SchemaError::WrongType { path: format!("{p}.{k}"), expected: "a string" });
                    String::new()
                }
            }
        };
        let sop =
            ProcedureSop { scenario: field("scenario"), procedure: field("procedure"), rationale: field("rationale") };
        if errs.len() > before {
            continue;
        }
        if out.contains(&sop) {
            if !dedupe {
                errs.push(SchemaError::DuplicateElement(p));
            }
            continue;
        }
        out.push(sop);
    }
    out
}

fn components_from(map: &Map<String, Value>, dedupe: bool, errs: &mut Vec<SchemaError>) -> MemoryComponents {
    MemoryComponents {
        user_profiles: string_list(map.get("user_profiles"), "user_profiles", dedupe, errs),
        semantic_memory: string_list(map.get("semantic_memory"), "semantic_memory", dedupe, errs),
        procedural_memory: sop_list(map.get("procedural_memory"), dedupe, errs),
    }
}

/// Validate curator output: exactly `user_profiles`, `semantic_memory` and
/// `procedural_memory`, with SOP objects of exactly `scenario`, `procedure`,
/// `rationale`. Exact duplicates are dropped.
pub fn validate_record(doc: &Value) -> Result<MemoryComponents, SchemaErrors> {
    let Some(map) = doc.as_object() else {
        return Err(SchemaErrors(vec![SchemaError::NotAnObject("$".into())]));
    };
    let mut errs = Vec::new();
    check_keys(map, &COMPONENT_KEYS, "", &mut errs);
    let components = components_from(map, true, &mut errs);
    if errs.is_empty() {
        Ok(components)
    } else {
        Err(SchemaErrors(errs))
    }
}

/// Validate a stored per-user document. Duplicates are errors here.
pub fn validate_store_document(doc: &Value) -> Result<ExperienceRecord, SchemaErrors> {
    let Some(map) = doc.as_object() else {
        return Err(SchemaErrors(vec![SchemaError::NotAnObject("$".into())]));
    };
    let mut errs = Vec::new();
    let mut keys = vec!["user_id", "updated_at"];
    keys.extend(COMPONENT_KEYS);
    check_keys(map, &keys, "", &mut errs);
    let user_id = match map.get("user_id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => {
            errs.push(SchemaError::EmptyElement("user_id".into()));
            String::new()
        }
        Some(_) => {
            errs.push(SchemaError::WrongType { path: "user_id".into(), expected: "a string" });
            String::new()
        }
        None => String::new(),
    };
    let updated_at = match map.get("updated_at") {
        Some(Value::String(s)) => DateTime::parse_from_rfc3339(s)
            .map(|d| d.with_timezone(&Utc))
            .map_err(|_| errs.push(SchemaError::BadTimestamp("updated_at".into())))
            .ok(),
        Some(_) => {
            errs.push(SchemaError::WrongType { path: "updated_at".into(), expected: "an RFC 3339 string" });
            None
        }
        None => None,
    };
    let components = components_from(map, false, &mut errs);
    match (errs.is_empty(), updated_at) {
        (true, Some(updated_at)) => Ok(ExperienceRecord { user_id, updated_at, components }),
        _ => Err(SchemaErrors(errs)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MergeError {
    #[error("cannot merge records of different users (`{existing}` vs `{fresh}`)")]
    UserMismatch { existing: String, fresh: String },
}

fn union<T: Clone + PartialEq>(existing: &[T], fresh: &[T]) -> Vec<T> {
    let mut out = existing.to_vec();
    for item in fresh {
        if !out.contains(item) {
            out.push(item.clone());
        }
    }
    out
}

/// Exact-text union per component; existing entries first, in order.
pub fn merge(existing: &ExperienceRecord, fresh: &ExperienceRecord) -> Result<ExperienceRecord, MergeError> {
    if existing.user_id != fresh.user_id {
        return Err(MergeError::UserMismatch { existing: existing.user_id.clone(), fresh: fresh.user_id.clone() });
    }
    Ok(ExperienceRecord {
        user_id: existing.user_id.clone(),
        updated_at: existing.updated_at.max(fresh.updated_at),
        components: MemoryComponents {
            user_profiles: union(&existing.components.user_profiles, &fresh.components.user_profiles),
            semantic_memory: union(&existing.components.semantic_memory, &fresh.components.semantic_memory),
            procedural_memory: union(&existing.components.procedural_memory, &fresh.components.procedural_memory),
        },
    })
}
