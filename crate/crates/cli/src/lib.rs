//! Argument parsing and command handlers for the `stackplanner` binary.
//!
//! Settings are resolved as flag > environment > config file > default.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stackplanner_core::config::{BackendKind, Settings};
use stackplanner_core::grpo::RewardScope;

pub use commands::execute;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_GATEWAY: u8 = 3;
pub const EXIT_DATASET: u8 = 4;
pub const EXIT_MISMATCH: u8 = 1;

pub const ENV_CONFIG: &str = "STACKPLANNER_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "stackplanner", version, about = "Hierarchical coordinator runtime with stack-structured task memory")]
pub struct Cli {
    /// Config file (TOML with runtime/gateway/tools/memory/grpo sections).
    #[arg(long, global = true, env = ENV_CONFIG, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Log debug output to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,

    /// Worker threads for `eval`.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

/// Gateway, tool and store overrides shared by commands that execute runs.
#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// Chat backend: remote, replay or scripted.
    #[arg(long, value_name = "KIND")]
    pub backend: Option<BackendKind>,
    /// Scripted backend responses: a JSON array, or an object of per-channel
    /// arrays. For `eval`, may be a directory of `<id>.json` files.
    #[arg(long, value_name = "PATH")]
    pub script: Option<PathBuf>,
    /// Replay backend fixture (JSONL). For `eval`, may be a directory of
    /// `<id>.jsonl` files.
    #[arg(long, value_name = "PATH")]
    pub fixture: Option<PathBuf>,
    /// Model name sent to the remote backend.
    #[arg(long, value_name = "NAME")]
    pub model: Option<String>,
    /// Remote API root, e.g. https://api.openai.com/v1.
    #[arg(long, value_name = "URL")]
    pub base_url: Option<String>,
    /// Search tools: `remote` or `fixture:<path>`.
    #[arg(long, value_name = "SPEC")]
    pub tools: Option<String>,
    /// Experience store directory.
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// Coordinator step cap.
    #[arg(long, value_name = "N")]
    pub max_steps: Option<u32>,
    /// Ablations: no-revise, no-experience (comma separated).
    #[arg(long, value_name = "LIST", default_value = "none")]
    pub ablation: stackplanner_core::runtime::Ablation,
    /// Task timestamp (RFC 3339). Defaults to now.
    #[arg(long, value_name = "TIME")]
    pub created_at: Option<chrono::DateTime<chrono::Utc>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one task through the coordinator.
    Run(RunArgs),
    /// Evaluate a QA dataset.
    Eval(EvalArgs),
    /// Inspect or maintain the experience store.
    #[command(subcommand)]
    Experience(ExperienceCommand),
    /// Re-execute a recorded run and compare its artifacts byte for byte.
    Replay(ReplayArgs),
    /// Train the toy coordination policy with GRPO and write its reward curve.
    GrpoDemo(GrpoDemoArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// The user query.
    #[arg(long)]
    pub query: String,
    /// User id for experience memory.
    #[arg(long, default_value = "default")]
    pub user: String,
    /// Locale tag of the query.
    #[arg(long)]
    pub locale: Option<String>,
    /// Write the step trace (JSONL) here, with companions beside it.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Write the run result as JSON here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset file.
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    /// Dataset layout: twowiki, musique, gaia, frames or generic.
    #[arg(long, default_value = "generic", value_name = "FORMAT")]
    pub format: stackplanner_core::evaluation::DatasetFormat,
    /// Evaluate at most N examples.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Seed forwarded to the chat backend.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report JSON here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Write one trace per example into this directory.
    #[arg(long, value_name = "DIR")]
    pub trace_dir: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Subcommand)]
pub enum ExperienceCommand {
    /// Print a user's experience record.
    Show {
        #[arg(long)]
        user: String,
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
    },
    /// Curate experience from a recorded run's final task memory.
    Curate {
        #[arg(long)]
        user: String,
        /// Trace of the run; its `.memory.jsonl` companion is read.
        #[arg(long, value_name = "PATH")]
        trace: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Delete one user's record, or all records.
    Clear {
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        user: Option<String>,
        #[arg(long)]
        all: bool,
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Trace written by `run --trace`.
    pub trace: PathBuf,
}

#[derive(Debug, Args)]
pub struct GrpoDemoArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub iterations: usize,
    /// Rollouts per group (K).
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Clipping range.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// KL penalty weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Reward statistics scope: token or trajectory.
    #[arg(long, value_parser = parse_scope)]
    pub scope: Option<RewardScope>,
    /// Write the `iteration,mean_reward` curve here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn parse_scope(s: &str) -> Result<RewardScope, String> {
    match s {
        "token" => Ok(RewardScope::Token),
        "trajectory" => Ok(RewardScope::Trajectory),
        other => Err(format!("unknown scope `{other}` (expected token or trajectory)")),
    }
}

/// Defaults, then the config file, then the environment (read through
/// `env`), then the flags in `b`.
pub fn resolve_settings(
    config: Option<&std::path::Path>,
    env: impl Fn(&str) -> Option<String>,
    b: &BackendArgs,
) -> Result<Settings, stackplanner_core::config::ConfigError> {
    let mut s = Settings::load(config)?;
    s.apply_env(env);
    if let Some(v) = b.backend {
        s.gateway.backend = v;
    }
    if let Some(v) = &b.script {
        s.gateway.script = Some(v.clone());
    }
    if let Some(v) = &b.fixture {
        s.gateway.fixture = Some(v.clone());
    }
    if let Some(v) = &b.model {
        s.gateway.model = v.clone();
    }
    if let Some(v) = &b.base_url {
        s.gateway.base_url = v.clone();
    }
    if let Some(v) = &b.tools {
        s.tools.backend = v.clone();
    }
    if let Some(v) = &b.store {
        s.memory.store_dir = Some(v.clone());
    }
    if let Some(v) = b.max_steps {
        s.runtime.max_steps = v;
    }
    s.validate()?;
    Ok(s)
}
