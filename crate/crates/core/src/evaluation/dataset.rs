use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    TwoWiki,
    Musique,
    Gaia,
    Frames,
    Generic,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "twowiki" | "2wiki" | "2wikimultihopqa" => Ok(Self::TwoWiki),
            "musique" => Ok(Self::Musique),
            "gaia" => Ok(Self::Gaia),
            "frames" => Ok(Self::Frames),
            "generic" => Ok(Self::Generic),
            other => {
                Err(format!("unknown dataset format `{other}` (expected twowiki, musique, gaia, frames or generic)"))
            }
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoWiki => "twowiki",
            Self::Musique => "musique",
            Self::Gaia => "gaia",
            Self::Frames => "frames",
            Self::Generic => "generic",
        })
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {message}")]
    Io { path: PathBuf, message: String },
    /// `line` is the 1-based line of a JSONL file, or the 1-based record of a
    /// JSON array file.
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

impl DatasetError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Parse { line, .. } => Some(*line),
            Self::Io { .. } => None,
        }
    }
}

fn string_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn take_str(row: &mut Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| row.remove(*k).as_ref().and_then(string_of))
}

fn strings(v: Option<Value>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items.iter().filter_map(string_of).collect(),
        Some(other) => string_of(&other).into_iter().collect(),
        None => Vec::new(),
    }
}

fn adapt(format: DatasetFormat, mut row: Map<String, Value>, ordinal: usize) -> Result<QaExample, String> {
    let (id, question, mut gold) = match format {
        DatasetFormat::Generic => {
            let id = take_str(&mut row, &["id"]);
            let question = take_str(&mut row, &["question"]);
            let mut gold = strings(row.remove("answers"));
            gold.extend(strings(row.remove("answer")));
            (id, question, gold)
        }
        DatasetFormat::TwoWiki => {
            let id = take_str(&mut row, &["_id", "id"]);
            let question = take_str(&mut row, &["question"]);
            let mut gold = strings(row.remove("answer"));
            gold.extend(strings(row.remove("answer_aliases")));
            for bulky in ["context", "evidences", "supporting_facts"] {
                row.remove(bulky);
            }
            (id, question, gold)
        }
        DatasetFormat::Musique => {
            let id = take_str(&mut row, &["id"]);
            let question = take_str(&mut row, &["question"]);
            let mut gold = strings(row.remove("answer"));
            gold.extend(strings(row.remove("answer_aliases")));
            if let Some(Value::Array(steps)) = row.remove("question_decomposition") {
                row.insert("hops".into(), Value::from(steps.len()));
            }
            row.remove("paragraphs");
            (id, question, gold)
        }
        DatasetFormat::Gaia => {
            let id = take_str(&mut row, &["task_id", "id"]);
            let question = take_str(&mut row, &["Question", "question"]);
            let gold = strings(row.remove("Final answer").or_else(|| row.remove("final_answer")));
            if let Some(level) = row.remove("Level").or_else(|| row.remove("level")) {
                row.insert("level".into(), level);
            }
            row.remove("Annotator Metadata");
            (id, question, gold)
        }
        DatasetFormat::Frames => {
            let id = take_str(&mut row, &["id", "index", "Unnamed: 0"]).or_else(|| Some(ordinal.to_string()));
            let question = take_str(&mut row, &["Prompt", "prompt", "question"]);
            let gold = strings(row.remove("Answer").or_else(|| row.remove("answer")));
            (id, question, gold)
        }
    };
    let mut seen = std::collections::HashSet::new();
    gold.retain(|g| seen.insert(g.clone()));
    let id = id.ok_or("missing id")?;
    let question = question.ok_or("missing question")?;
    if gold.is_empty() {
        return Err("no gold answer".into());
    }
    Ok(QaExample { id, question, gold_answers: gold, metadata: row.into_iter().collect() })
}

/// Load a dataset file as [`QaExample`]s. JSONL is accepted for every format;
/// a file whose content starts with `[` is read as one JSON array.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<QaExample>, DatasetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DatasetError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let err = |line: usize, message: String| DatasetError::Parse { path: path.to_path_buf(), line, message };
    let rows: Vec<(usize, Value)> = if text.trim_start().starts_with('[') {
        let items: Vec<Value> = serde_json::from_str(&text).map_err(|e| err(e.line(), e.to_string()))?;
        items.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
    } else {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            rows.push((i + 1, v));
        }
        rows
    };
    rows.into_iter()
        .enumerate()
        .map(|(ordinal, (line, v))| match v {
            Value::Object(row) => adapt(format, row, ordinal).map_err(|m| err(line, m)),
            _ => Err(err(line, "expected a JSON object".into())),
        })
        .collect()
}
