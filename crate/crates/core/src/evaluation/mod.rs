//! Answer scoring, dataset adapters and the benchmark harness.

mod dataset;
mod harness;
mod metrics;

pub use dataset::{load_dataset, DatasetError, DatasetFormat, QaExample};
pub use harness::{run_eval, score, EvalAggregates, EvalConfig, EvalReport, EvalRow};
pub use metrics::{exact_match, normalize_answer, normalized_tokens, token_f1};
