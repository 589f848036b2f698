use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::dataset::QaExample;
use super::metrics::{exact_match, token_f1};
use crate::runtime::{Ablation, RunResult, Termination};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub disable_task_memory_revise: bool,
    pub disable_experience_memory: bool,
    pub limit: Option<usize>,
    pub seed: u64,
}

impl EvalConfig {
    pub fn ablation(&self) -> Ablation {
        Ablation { no_revise: self.disable_task_memory_revise, no_experience: self.disable_experience_memory }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub prediction: String,
    pub f1: f64,
    pub em: u8,
    pub steps: usize,
    pub termination: Termination,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub examples: usize,
    pub mean_f1: f64,
    pub mean_em: f64,
    pub finished_rate: f64,
}

impl EvalAggregates {
    /// Means over `rows`, summed in row order. All zero for no rows.
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        let n = rows.len();
        if n == 0 {
            return Self { examples: 0, mean_f1: 0.0, mean_em: 0.0, finished_rate: 0.0 };
        }
        let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
        Self {
            examples: n,
            mean_f1: mean(&|r| r.f1),
            mean_em: mean(&|r| f64::from(r.em)),
            finished_rate: mean(&|r| if r.termination == Termination::Finished { 1.0 } else { 0.0 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Sorted by id.
    pub rows: Vec<EvalRow>,
    pub aggregates: EvalAggregates,
}

impl EvalReport {
    pub fn new(config: EvalConfig, mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let aggregates = EvalAggregates::from_rows(&rows);
        Self { config, rows, aggregates }
    }

    pub fn aggregates_consistent(&self) -> bool {
        EvalAggregates::from_rows(&self.rows) == self.aggregates
    }
}

/// Score one run against an example. Failed runs score zero.
pub fn score(example: &QaExample, outcome: &Result<RunResult, String>) -> EvalRow {
    match outcome {
        Ok(run) => {
            let failed = run.termination == Termination::UnrecoverableError;
            let prediction = run.final_answer.clone();
            EvalRow {
                id: example.id.clone(),
                f1: if failed { 0.0 } else { token_f1(&prediction, &example.gold_answers) },
                em: if failed { 0 } else { exact_match(&prediction, &example.gold_answers) },
                prediction,
                steps: run.steps.len(),
                termination: run.termination,
                error: run.failure.as_ref().map(|f| f.message.clone()),
            }
        }
        Err(e) => EvalRow {
            id: example.id.clone(),
            prediction: String::new(),
            f1: 0.0,
            em: 0,
            steps: 0,
            termination: Termination::UnrecoverableError,
            error: Some(e.clone()),
        },
    }
}

/// Run every example (up to `cfg.limit`) through `run_one` on `jobs` worker
/// threads and score the results. A failing example never aborts the rest.
pub fn run_eval<F>(dataset: &[QaExample], cfg: &EvalConfig, jobs: usize, run_one: F) -> EvalReport
where
    F: Fn(&QaExample, Ablation) -> Result<RunResult, String> + Sync,
{
    let examples = &dataset[..cfg.limit.map_or(dataset.len(), |l| l.min(dataset.len()))];
    let ablation = cfg.ablation();
    let next = AtomicUsize::new(0);
    let rows = Mutex::new(Vec::with_capacity(examples.len()));
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(example) = examples.get(i) else { break };
        let outcome = run_one(example, ablation);
        if let Err(e) = &outcome {
            tracing::warn!(id = %example.id, error = %e, "example failed");
        }
        let row = score(example, &outcome);
        rows.lock().expect("rows poisoned").push(row);
    };
    let jobs = jobs.clamp(1, examples.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    EvalReport::new(cfg.clone(), rows.into_inner().expect("rows poisoned"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::Gateway;
    use crate::runtime::{run_task, FixedClock, RuntimeConfig, RuntimeContext, TaskSpec};
    use crate::tools::{CorpusDoc, FixtureIndex, ToolRegistry, WIKI};
    use crate::ExperienceStore;
    use chrono::{TimeZone, Utc};
    use std::sync::Arc;

    fn example(id: &str, q: &str, gold: &str) -> QaExample {
        QaExample { id: id.into(), question: q.into(), gold_answers: vec![gold.into()], metadata: Default::default() }
    }

    fn scripted_run(answer: &str, ex: &QaExample, ablation: Ablation) -> Result<RunResult, String> {
        let gw = Gateway::new(
            crate::llm_gateway::ScriptedBackend::routed([
                (
                    "decision",
                    vec![
                        r#"{"action":"delegate","reasoning":"r","params":{"agent_type":"reporter","task_description":"answer"}}"#.to_string(),
                        r#"{"action":"finish","reasoning":"r"}"#.to_string(),
                    ],
                ),
                ("report", vec![format!("my answer is {answer}")]),
                ("curator", vec![r#"{"user_profiles":[],"semantic_memory":[],"procedural_memory":[]}"#.to_string()]),
            ]),
            Default::default(),
        );
        let mut tools = ToolRegistry::new();
        tools.register(WIKI, Arc::new(FixtureIndex::new(vec![CorpusDoc::new("1", "t", "x")])));
        let store = ExperienceStore::in_memory();
        let t = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
        let mut config = RuntimeConfig::default();
        config.ablation = ablation;
        let ctx = RuntimeContext { gateway: &gw, tools: &tools, experience: &store, clock: &FixedClock(t), config };
        Ok(run_task(&TaskSpec::new(ex.question.clone(), "u", t), &ctx))
    }

    fn dataset() -> Vec<QaExample> {
        vec![
            example("c", "capital of Italy?", "Rome"),
            example("a", "who was president?", "Barack Obama"),
            example("b", "largest planet?", "Jupiter"),
        ]
    }

    #[test]
    fn three_examples_scored() {
        let answers = [("a", "Obama"), ("b", "Saturn"), ("c", "Rome")];
        let run = |ex: &QaExample, ab: Ablation| {
            let ans = answers.iter().find(|(id, _)| *id == ex.id).unwrap().1;
            scripted_run(ans, ex, ab)
        };
        let report = run_eval(&dataset(), &EvalConfig::default(), 1, run);
        assert_eq!(report.rows.len(), 3);
        let ids: Vec<&str> = report.rows.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!((report.rows[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.rows[2].em, 1);
        assert!(report.aggregates_consistent());
        assert_eq!(report.aggregates.finished_rate, 1.0);

        let parallel = run_eval(&dataset(), &EvalConfig::default(), 3, run);
        assert_eq!(parallel.rows, report.rows);
    }

    #[test]
    fn limit_and_failures() {
        let cfg = EvalConfig { limit: Some(1), ..Default::default() };
        let report = run_eval(&dataset(), &cfg, 4, |ex, ab| scripted_run("Rome", ex, ab));
        assert_eq!(report.rows.len(), 1);

        let report = run_eval(&dataset(), &EvalConfig::default(), 2, |ex, _| {
            if ex.id == "b" {
                Err("backend down".into())
            } else {
                scripted_run("Rome", ex, Ablation::default())
            }
        });
        let b = &report.rows[1];
        assert_eq!((b.f1, b.em, b.termination), (0.0, 0, Termination::UnrecoverableError));
        assert_eq!(report.rows.len(), 3);
        assert!(report.aggregates_consistent());
    }

    #[test]
    fn empty_report() {
        let r = EvalReport::new(EvalConfig::default(), vec![]);
        assert_eq!(r.aggregates.examples, 0);
        assert!(r.aggregates_consistent());
    }
}
