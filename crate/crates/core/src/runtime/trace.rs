//! Trace files and offline replay.
//!
//! A run written to `t.jsonl` gets companions beside it:
//!
//! | file | content |
//! |------|---------|
//! | `t.jsonl` | one line per step |
//! | `t.memory.jsonl` | stack journal, then the final stack |
//! | `t.agents.jsonl` | one line per sub-agent invocation |
//! | `t.curation.json` | experience curation outcome |
//! | `t.run.json` | manifest needed to re-execute the run |
//!
//! Replay rebuilds the run from the manifest against the recorded gateway
//! fixture and compares every artifact except the manifest byte for byte.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{run_task, RecordedClock, RunResult, RuntimeConfig, RuntimeContext, TaskSpec};
use crate::experience_memory::{ExperienceRecord, ExperienceStore};
use crate::llm_gateway::{Gateway, ReplayBackend, RequestDefaults};
use crate::tools::ToolRegistry;

/// Path of the companion `name` for `trace` (`t.jsonl` -> `t.<name>`).
pub fn companion(trace: &Path, name: &str) -> PathBuf {
    trace.with_extension(name)
}

pub const MEMORY: &str = "memory.jsonl";
pub const AGENTS: &str = "agents.jsonl";
pub const CURATION: &str = "curation.json";
pub const MANIFEST: &str = "run.json";
pub const GATEWAY: &str = "gateway.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: TaskSpec,
    pub config: RuntimeConfig,
    pub gateway: RequestDefaults,
    /// Recorded gateway exchanges, relative to the manifest.
    pub gateway_fixture: Option<String>,
    /// `remote` or `fixture:<path relative to the manifest>`.
    pub tools: String,
    pub tool_top_k: usize,
    pub finished_at: DateTime<Utc>,
    /// The user's experience record before the run.
    pub experience_before: Option<ExperienceRecord>,
}

/// `path` relative to directory `base` when both are absolute or both
/// relative; otherwise `path` unchanged.
pub fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    let pc: Vec<Component> = p.components().collect();
    let bc: Vec<Component> = b.components().collect();
    if pc.first() != bc.first() {
        return path.to_path_buf();
    }
    let common = pc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &pc[common..] {
        out.push(c.as_os_str());
    }
    out
}

fn jsonl<I: IntoIterator<Item = Value>>(lines: I) -> String {
    lines.into_iter().map(|v| format!("{v}\n")).collect()
}

/// Step lines with exactly the trace fields, in order.
pub fn trace_text(result: &RunResult) -> String {
    jsonl(result.steps.iter().map(|s| {
        json!({
            "step": s.step,
            "action": s.decision.action.as_str(),
            "reasoning": s.decision.reasoning,
            "params": s.decision.params,
            "outcome_digest": s.outcome_digest,
            "memory_len_before": s.memory_len_before,
            "memory_len_after": s.memory_len_after,
            "tokens_used": s.tokens_used,
            "wall_time_ms": s.wall_time_ms,
        })
    }))
}

fn memory_text(result: &RunResult) -> String {
    let snapshot: Value = serde_json::from_str(&result.final_stack_snapshot.snapshot_json()).expect("snapshot is JSON");
    jsonl(
        result
            .journal()
            .iter()
            .map(|e| serde_json::to_value(e).expect("journal serializes"))
            .chain(std::iter::once(json!({ "final_stack": snapshot }))),
    )
}

fn agents_text(result: &RunResult) -> String {
    jsonl(result.delegations.iter().map(|d| serde_json::to_value(d).expect("delegation serializes")))
}

fn curation_text(result: &RunResult) -> String {
    let mut s = serde_json::to_string_pretty(&json!({
        "termination": result.termination,
        "final_answer": result.final_answer,
        "failure": result.failure,
        "curation": result.curation,
    }))
    .expect("curation serializes");
    s.push('\n');
    s
}

/// Compared artifacts as `(companion name, text)`; the trace itself has an
/// empty name.
pub fn artifact_texts(result: &RunResult) -> Vec<(&'static str, String)> {
    vec![
        ("", trace_text(result)),
        (MEMORY, memory_text(result)),
        (AGENTS, agents_text(result)),
        (CURATION, curation_text(result)),
    ]
}

fn artifact_path(trace: &Path, name: &str) -> PathBuf {
    if name.is_empty() {
        trace.to_path_buf()
    } else {
        companion(trace, name)
    }
}

pub fn write_artifacts(trace: &Path, result: &RunResult, manifest: &RunManifest) -> std::io::Result<()> {
    if let Some(dir) = trace.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    for (name, text) in artifact_texts(result) {
        std::fs::write(artifact_path(trace, name), text)?;
    }
    let mut m = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    m.push('\n');
    std::fs::write(companion(trace, MANIFEST), m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactMismatch {
    pub file: PathBuf,
    /// 1-based.
    pub line: usize,
    pub expected: Option<String>,
    pub actual: Option<String>,
}

impl std::fmt::Display for ArtifactMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |s: &Option<String>| s.clone().unwrap_or_else(|| "<end of file>".into());
        write!(
            f,
            "{} line {}:\n- expected: {}\n+ actual:   {}",
            self.file.display(),
            self.line,
            show(&self.expected),
            show(&self.actual)
        )
    }
}

/// First line where the artifacts on disk differ from `result`.
pub fn compare_artifacts(trace: &Path, result: &RunResult) -> std::io::Result<Option<ArtifactMismatch>> {
    for (name, actual) in artifact_texts(result) {
        let path = artifact_path(trace, name);
        let expected = std::fs::read_to_string(&path)?;
        if expected == actual {
            continue;
        }
        let (mut e, mut a) = (expected.split_inclusive('\n'), actual.split_inclusive('\n'));
        let mut line = 1;
        loop {
            match (e.next(), a.next()) {
                (Some(x), Some(y)) if x == y => line += 1,
                (x, y) => {
                    return Ok(Some(ArtifactMismatch {
                        file: path,
                        line,
                        expected: x.map(|s| s.trim_end_matches('\n').to_string()),
                        actual: y.map(|s| s.trim_end_matches('\n').to_string()),
                    }))
                }
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },
    #[error("unreadable manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("cannot replay: {0}")]
    Unsupported(String),
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub result: RunResult,
    pub mismatch: Option<ArtifactMismatch>,
}

fn recorded_step_ms(trace: &Path) -> Result<BTreeMap<u32, u64>, ReplayError> {
    let text = std::fs::read_to_string(trace)?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| ReplayError::Setup(format!("bad trace line: {e}")))?;
        if let (Some(step), Some(ms)) = (v["step"].as_u64(), v["wall_time_ms"].as_u64()) {
            out.insert(step as u32, ms);
        }
    }
    Ok(out)
}

/// Re-execute the run recorded at `trace` and compare its artifacts.
pub fn replay_run(trace: &Path) -> Result<ReplayOutcome, ReplayError> {
    let manifest_path = companion(trace, MANIFEST);
    for (what, path) in [("trace", trace.to_path_buf()), ("run manifest", manifest_path.clone())] {
        if !path.exists() {
            return Err(ReplayError::Missing { what, path });
        }
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| ReplayError::Manifest { path: manifest_path.clone(), message: e.to_string() })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let fixture = manifest
        .gateway_fixture
        .as_ref()
        .map(|f| base.join(f))
        .ok_or_else(|| ReplayError::Unsupported("the run recorded no gateway fixture".into()))?;
    if !fixture.exists() {
        return Err(ReplayError::Missing { what: "gateway fixture", path: fixture });
    }
    let corpus = manifest
        .tools
        .strip_prefix("fixture:")
        .ok_or_else(|| ReplayError::Unsupported("the run used remote search tools".into()))?;
    let corpus = base.join(corpus);
    if !corpus.exists() {
        return Err(ReplayError::Missing { what: "tool corpus", path: corpus });
    }
    let tools = ToolRegistry::from_fixture_path(&corpus)
        .map_err(|e| ReplayError::Setup(e.to_string()))?
        .with_default_k(manifest.tool_top_k);
    let backend = ReplayBackend::from_file(&fixture, true).map_err(|e| ReplayError::Setup(e.to_string()))?;
    let gateway = Gateway::new(backend, manifest.gateway.clone());
    let store = ExperienceStore::in_memory();
    if let Some(r) = &manifest.experience_before {
        store.put(r.clone()).map_err(|e| ReplayError::Setup(e.to_string()))?;
    }
    let clock = RecordedClock { now: manifest.finished_at, step_ms: recorded_step_ms(trace)? };
    let ctx = RuntimeContext {
        gateway: &gateway,
        tools: &tools,
        experience: &store,
        clock: &clock,
        config: manifest.config.clone(),
    };
    let result = run_task(&manifest.task, &ctx);
    let mismatch = compare_artifacts(trace, &result)?;
    Ok(ReplayOutcome { result, mismatch })
}
