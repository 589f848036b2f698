use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use chrono::{DateTime, SubsecRound, Utc};
use serde_json::json;
use stackplanner_core::config::{BackendKind, Settings};
use stackplanner_core::evaluation::{load_dataset, run_eval, EvalConfig, EvalReport, QaExample};
use stackplanner_core::experience_memory::{curate, user_file_stem, ExperienceRecord};
use stackplanner_core::grpo::{curve_to_csv, train_toy, GrpoConfig, SyntheticCoordinationEnv};
use stackplanner_core::llm_gateway::{
    Gateway, RemoteBackend, ReplayBackend, RequestDefaults, RetryPolicy, ScriptedBackend,
};
use stackplanner_core::runtime::trace::{companion, relative_to, GATEWAY, MEMORY};
use stackplanner_core::runtime::{
    replay_run, run_task, write_artifacts, Ablation, Clock, FailureKind, FixedClock, ReplayError, RunManifest,
    RunResult, RuntimeConfig, RuntimeContext, SystemClock, TaskSpec,
};
use stackplanner_core::tools::{ToolRegistry, WebSearchClient, WikiRetrieverClient, WEB, WIKI};
use stackplanner_core::{ExperienceStore, MemoryStack};

use crate::{
    resolve_settings, BackendArgs, Cli, Command, EvalArgs, ExperienceCommand, GrpoDemoArgs, RunArgs, EXIT_CONFIG,
    EXIT_DATASET, EXIT_GATEWAY, EXIT_MISMATCH, EXIT_OK,
};

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome = Result<u8, Failure>;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

/// Run the parsed command. Returns the process exit code.
pub fn execute(cli: Cli) -> u8 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Experience(c) => cmd_experience(&cli, c),
        Command::Replay(a) => cmd_replay(&a.trace),
        Command::GrpoDemo(a) => cmd_grpo(&cli, a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn settings(cli: &Cli, b: &BackendArgs) -> Result<Settings, Failure> {
    resolve_settings(cli.config.as_deref(), |k| std::env::var(k).ok(), b).map_err(|e| fail(EXIT_CONFIG)(e.into()))
}

fn build_gateway(s: &Settings, script: Option<&Path>, fixture: Option<&Path>) -> Result<Gateway, Failure> {
    let defaults = RequestDefaults {
        model: s.gateway.model.clone(),
        temperature: s.gateway.temperature,
        seed: s.gateway.seed,
        max_tokens: s.gateway.max_tokens,
    };
    let gateway = match s.gateway.backend {
        BackendKind::Remote => Gateway::new(
            RemoteBackend::new(
                &s.gateway.base_url,
                s.gateway.api_key.clone(),
                Duration::from_secs(s.gateway.timeout_secs),
                RetryPolicy::default(),
            )
            .map_err(|e| fail(EXIT_GATEWAY)(e.into()))?,
            defaults,
        ),
        BackendKind::Scripted => {
            let path = script.ok_or_else(|| fail(EXIT_CONFIG)(anyhow!("the scripted backend needs --script")))?;
            Gateway::new(ScriptedBackend::from_file(path).map_err(|e| fail(EXIT_GATEWAY)(e.into()))?, defaults)
        }
        BackendKind::Replay => {
            let path = fixture.ok_or_else(|| fail(EXIT_CONFIG)(anyhow!("the replay backend needs --fixture")))?;
            Gateway::new(
                ReplayBackend::from_file(path, s.gateway.strict).map_err(|e| fail(EXIT_GATEWAY)(e.into()))?,
                defaults,
            )
        }
    };
    Ok(gateway)
}

fn build_tools(s: &Settings) -> Result<ToolRegistry, Failure> {
    let timeout = Duration::from_secs(s.tools.timeout_secs);
    let reg = if let Some(path) = s.tools.backend.strip_prefix("fixture:") {
        ToolRegistry::from_fixture_path(Path::new(path)).map_err(|e| fail(EXIT_CONFIG)(e.into()))?
    } else {
        let mut reg = ToolRegistry::new();
        if let Some(url) = &s.tools.wiki_base_url {
            let c = WikiRetrieverClient::new(url, timeout).map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
            reg.register(WIKI, std::sync::Arc::new(c));
        }
        if let Some(url) = &s.tools.web_base_url {
            let c =
                WebSearchClient::new(url, s.tools.api_key.clone(), timeout).map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
            reg.register(WEB, std::sync::Arc::new(c));
        }
        if reg.tool_names().is_empty() {
            return Err(fail(EXIT_CONFIG)(anyhow!(
                "remote tools need tools.wiki_base_url or tools.web_base_url (or use --tools fixture:<path>)"
            )));
        }
        reg
    };
    Ok(reg.with_timeout(timeout).with_default_k(s.tools.top_k))
}

fn open_store(s: &Settings) -> Result<ExperienceStore, Failure> {
    match &s.memory.store_dir {
        Some(dir) => ExperienceStore::open(dir).map_err(|e| fail(EXIT_CONFIG)(e.into())),
        None => Ok(ExperienceStore::in_memory()),
    }
}

fn runtime_config(s: &Settings, ablation: Ablation) -> RuntimeConfig {
    let mut c = RuntimeConfig::from_settings(s);
    c.ablation = ablation;
    c
}

fn created_at(b: &BackendArgs) -> DateTime<Utc> {
    b.created_at.unwrap_or_else(|| Utc::now().trunc_subsecs(0))
}

// Offline runs use a fixed clock so that their traces are reproducible.
fn clock_for(s: &Settings, at: DateTime<Utc>) -> Box<dyn Clock> {
    match s.gateway.backend {
        BackendKind::Remote => Box::new(SystemClock),
        _ => Box::new(FixedClock(at)),
    }
}

fn run_exit_code(r: &RunResult) -> u8 {
    match r.failure.as_ref().map(|f| f.kind) {
        Some(FailureKind::Gateway | FailureKind::Parse) => EXIT_GATEWAY,
        Some(FailureKind::InvalidTask) => EXIT_CONFIG,
        None => EXIT_OK,
    }
}

fn manifest_tools(s: &Settings, base: &Path) -> String {
    match s.tools.backend.strip_prefix("fixture:") {
        Some(p) => format!("fixture:{}", relative_to(Path::new(p), base).display()),
        None => "remote".into(),
    }
}

struct RunSetup<'a> {
    settings: &'a Settings,
    tools: &'a ToolRegistry,
    store: &'a ExperienceStore,
    ablation: Ablation,
}

/// Execute one task, recording the gateway and writing artifacts when a
/// trace path is given.
fn execute_run(
    setup: &RunSetup,
    task: &TaskSpec,
    script: Option<&Path>,
    fixture: Option<&Path>,
    trace: Option<&Path>,
) -> Result<RunResult, Failure> {
    let s = setup.settings;
    let mut gateway = build_gateway(s, script, fixture)?;
    let recorded = match (trace, s.gateway.backend) {
        (Some(_), BackendKind::Replay) => fixture.map(Path::to_path_buf),
        (Some(t), _) => {
            let path = companion(t, GATEWAY);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
            }
            gateway = gateway.record_to(&path).map_err(|e| fail(EXIT_GATEWAY)(e.into()))?;
            Some(path)
        }
        (None, _) => None,
    };
    let experience_before = setup.store.get(&task.user_id);
    let clock = clock_for(s, task.created_at);
    let ctx = RuntimeContext {
        gateway: &gateway,
        tools: setup.tools,
        experience: setup.store,
        clock: clock.as_ref(),
        config: runtime_config(s, setup.ablation),
    };
    let result = run_task(task, &ctx);
    if let Some(t) = trace {
        let base = t.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let manifest = RunManifest {
            task: task.clone(),
            config: ctx.config.clone(),
            gateway: gateway.defaults().clone(),
            gateway_fixture: recorded.map(|p| relative_to(&p, base).display().to_string()),
            tools: manifest_tools(s, base),
            tool_top_k: s.tools.top_k,
            finished_at: result.finished_at,
            experience_before,
        };
        drop(gateway);
        write_artifacts(t, &result, &manifest)
            .with_context(|| format!("writing trace {}", t.display()))
            .map_err(fail(EXIT_CONFIG))?;
    }
    Ok(result)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(fail(EXIT_CONFIG))
}

fn cmd_run(cli: &Cli, a: &RunArgs) -> Outcome {
    let s = settings(cli, &a.backend)?;
    let tools = build_tools(&s)?;
    let store = open_store(&s)?;
    let mut task = TaskSpec::new(a.query.clone(), a.user.clone(), created_at(&a.backend));
    task.locale = a.locale.clone().unwrap_or_else(|| s.runtime.locale.clone());
    task.max_steps = s.runtime.max_steps;
    let setup = RunSetup { settings: &s, tools: &tools, store: &store, ablation: a.backend.ablation };
    let result =
        execute_run(&setup, &task, s.gateway.script.as_deref(), s.gateway.fixture.as_deref(), a.trace.as_deref())?;
    println!("termination: {:?}", result.termination);
    println!("steps: {}", result.steps.len());
    for st in &result.steps {
        println!("  {:>2} {:<9} {}", st.step, st.decision.action, st.outcome_digest);
    }
    println!("answer: {}", result.final_answer);
    if let Some(f) = &result.failure {
        println!("failure: {}", f.message);
    }
    if let Some(t) = &a.trace {
        println!("trace: {}", t.display());
    }
    if let Some(out) = &a.out {
        write_json(
            out,
            &json!({
                "final_answer": result.final_answer,
                "termination": result.termination,
                "steps": result.steps,
                "failure": result.failure,
                "curation": result.curation,
            }),
        )?;
    }
    Ok(run_exit_code(&result))
}

// A directory holds one file per example; a file is shared by all examples.
fn per_example(path: Option<&Path>, id: &str, ext: &str) -> Option<PathBuf> {
    path.map(|p| if p.is_dir() { p.join(format!("{}.{ext}", user_file_stem(id))) } else { p.to_path_buf() })
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Outcome {
    let mut s = settings(cli, &a.backend)?;
    s.gateway.seed = Some(a.seed);
    let dataset = load_dataset(&a.dataset, a.format).map_err(|e| fail(EXIT_DATASET)(e.into()))?;
    let tools = build_tools(&s)?;
    let store = open_store(&s)?;
    let cfg = EvalConfig {
        disable_task_memory_revise: a.backend.ablation.no_revise,
        disable_experience_memory: a.backend.ablation.no_experience,
        limit: a.limit,
        seed: a.seed,
    };
    // A single shared script or fixture is consumed in order, so it forces
    // sequential execution.
    let shared = [s.gateway.script.as_deref(), s.gateway.fixture.as_deref()].into_iter().flatten().any(|p| !p.is_dir())
        && s.gateway.backend != BackendKind::Remote;
    let jobs = if shared { 1 } else { cli.jobs };
    if shared && cli.jobs > 1 {
        tracing::warn!("a shared script or fixture forces --jobs 1");
    }
    if let Some(dir) = &a.trace_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(fail(EXIT_CONFIG))?;
    }
    let at = created_at(&a.backend);
    let setup = RunSetup { settings: &s, tools: &tools, store: &store, ablation: cfg.ablation() };
    let shared_gateway = if shared && a.trace_dir.is_none() {
        Some(build_gateway(&s, s.gateway.script.as_deref(), s.gateway.fixture.as_deref())?)
    } else {
        None
    };
    let run_one = |ex: &QaExample, _ablation: Ablation| -> Result<RunResult, String> {
        let mut task = TaskSpec::new(ex.question.clone(), user_of(ex), at);
        task.locale = s.runtime.locale.clone();
        task.max_steps = s.runtime.max_steps;
        if let Some(gw) = &shared_gateway {
            let clock = clock_for(&s, at);
            let ctx = RuntimeContext {
                gateway: gw,
                tools: &tools,
                experience: &store,
                clock: clock.as_ref(),
                config: runtime_config(&s, setup.ablation),
            };
            return Ok(run_task(&task, &ctx));
        }
        let script = per_example(s.gateway.script.as_deref(), &ex.id, "json");
        let fixture = per_example(s.gateway.fixture.as_deref(), &ex.id, "jsonl");
        let trace = a.trace_dir.as_ref().map(|d| d.join(format!("{}.jsonl", user_file_stem(&ex.id))));
        execute_run(&setup, &task, script.as_deref(), fixture.as_deref(), trace.as_deref())
            .map_err(|f| format!("{:#}", f.error))
    };
    let report = if shared && a.trace_dir.is_some() {
        // Traces record per-example gateway fixtures, so a shared script is
        // split by running examples one after another against one backend.
        eval_shared_with_traces(&s, &dataset, &cfg, &setup, at, a.trace_dir.as_deref().expect("checked"))?
    } else {
        run_eval(&dataset, &cfg, jobs, run_one)
    };
    print_report(&report);
    if let Some(out) = &a.out {
        write_json(out, &serde_json::to_value(&report).expect("report serializes"))?;
    }
    Ok(EXIT_OK)
}

fn user_of(ex: &QaExample) -> String {
    ex.metadata.get("user_id").and_then(|v| v.as_str()).unwrap_or("eval").to_string()
}

fn eval_shared_with_traces(
    s: &Settings,
    dataset: &[QaExample],
    cfg: &EvalConfig,
    setup: &RunSetup,
    at: DateTime<Utc>,
    dir: &Path,
) -> Result<EvalReport, Failure> {
    let base = build_gateway(s, s.gateway.script.as_deref(), s.gateway.fixture.as_deref())?;
    let run_one = |ex: &QaExample, ablation: Ablation| -> Result<RunResult, String> {
        let mut task = TaskSpec::new(ex.question.clone(), user_of(ex), at);
        task.locale = s.runtime.locale.clone();
        task.max_steps = s.runtime.max_steps;
        let trace = dir.join(format!("{}.jsonl", user_file_stem(&ex.id)));
        let experience_before = setup.store.get(&task.user_id);
        let clock = clock_for(s, at);
        let ctx = RuntimeContext {
            gateway: &base,
            tools: setup.tools,
            experience: setup.store,
            clock: clock.as_ref(),
            config: runtime_config(s, ablation),
        };
        let result = run_task(&task, &ctx);
        let manifest = RunManifest {
            task: task.clone(),
            config: ctx.config.clone(),
            gateway: base.defaults().clone(),
            gateway_fixture: None,
            tools: manifest_tools(s, dir),
            tool_top_k: s.tools.top_k,
            finished_at: result.finished_at,
            experience_before,
        };
        write_artifacts(&trace, &result, &manifest).map_err(|e| e.to_string())?;
        Ok(result)
    };
    Ok(run_eval(dataset, cfg, 1, run_one))
}

fn print_report(r: &EvalReport) {
    println!("{:<24} {:>6} {:>3} {:>5}  {:<18} prediction", "id", "f1", "em", "steps", "termination");
    for row in &r.rows {
        println!(
            "{:<24} {:>6.3} {:>3} {:>5}  {:<18} {}",
            row.id,
            row.f1,
            row.em,
            row.steps,
            format!("{:?}", row.termination),
            row.prediction
        );
    }
    let a = &r.aggregates;
    println!(
        "examples: {}  mean_f1: {:.4}  mean_em: {:.4}  finished_rate: {:.4}",
        a.examples, a.mean_f1, a.mean_em, a.finished_rate
    );
}

fn cmd_experience(cli: &Cli, c: &ExperienceCommand) -> Outcome {
    match c {
        ExperienceCommand::Show { user, store } => {
            let s = settings(cli, &BackendArgs { store: store.clone(), ..Default::default() })?;
            let store = open_store(&s)?;
            match store.get(user) {
                Some(r) => println!("{}", serde_json::to_string_pretty(&r).expect("record serializes")),
                None => println!("no experience recorded for user {user:?}"),
            }
            Ok(EXIT_OK)
        }
        ExperienceCommand::Clear { user, all, store } => {
            let s = settings(cli, &BackendArgs { store: store.clone(), ..Default::default() })?;
            let store = open_store(&s)?;
            if *all {
                let n = store.clear_all().map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
                println!("cleared {n} record(s)");
            } else {
                let user = user.as_deref().expect("clap requires --user without --all");
                let removed = store.clear(user).map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
                println!("{}", if removed { "cleared" } else { "nothing to clear" });
            }
            Ok(EXIT_OK)
        }
        ExperienceCommand::Curate { user, trace, backend } => {
            let s = settings(cli, backend)?;
            let store = open_store(&s)?;
            let stack = final_stack(&companion(trace, MEMORY)).map_err(fail(EXIT_CONFIG))?;
            let gateway = build_gateway(&s, s.gateway.script.as_deref(), s.gateway.fixture.as_deref())?;
            let now = Utc::now().trunc_subsecs(0);
            let existing = store.get(user).unwrap_or_else(|| ExperienceRecord::empty(user.clone(), now));
            let outcome = curate(&stack, &existing, now, &gateway);
            if let Some(e) = outcome.error {
                return Err(fail(EXIT_GATEWAY)(anyhow!(e).context("curation failed")));
            }
            let merged = store.merge_into(&outcome.record).map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
            println!("{}", serde_json::to_string_pretty(&merged).expect("record serializes"));
            Ok(EXIT_OK)
        }
    }
}

fn final_stack(path: &Path) -> anyhow::Result<MemoryStack> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let last =
        text.lines().rev().find(|l| !l.trim().is_empty()).ok_or_else(|| anyhow!("{} is empty", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(last)?;
    let stack = v.get("final_stack").ok_or_else(|| anyhow!("{} has no final_stack line", path.display()))?;
    Ok(serde_json::from_value(stack.clone())?)
}

fn cmd_replay(trace: &Path) -> Outcome {
    match replay_run(trace) {
        Ok(out) => match out.mismatch {
            None => {
                println!("replay identical: {} ({} steps)", trace.display(), out.result.steps.len());
                Ok(EXIT_OK)
            }
            Some(m) => {
                println!("replay differs at {m}");
                Ok(EXIT_MISMATCH)
            }
        },
        Err(e @ ReplayError::Missing { .. }) => Err(fail(EXIT_GATEWAY)(e.into())),
        Err(e) => Err(fail(EXIT_CONFIG)(e.into())),
    }
}

fn cmd_grpo(cli: &Cli, a: &GrpoDemoArgs) -> Outcome {
    let s = settings(cli, &BackendArgs::default())?;
    let cfg = GrpoConfig {
        group_size: a.group_size.unwrap_or(s.grpo.group_size),
        epsilon: a.epsilon.unwrap_or(s.grpo.epsilon),
        beta: a.beta.unwrap_or(s.grpo.beta),
        reward_stat_scope: a.scope.unwrap_or(s.grpo.reward_stat_scope),
        ..s.grpo.clone()
    };
    cfg.validate().map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
    let env = SyntheticCoordinationEnv::default();
    let baseline = stackplanner_core::grpo::ToyPolicy::uniform(env).expected_reward();
    let run = train_toy(env, &cfg, a.seed, a.iterations).map_err(|e| fail(EXIT_CONFIG)(e.into()))?;
    println!(
        "seed {} iterations {} K {} epsilon {} beta {}",
        a.seed, a.iterations, cfg.group_size, cfg.epsilon, cfg.beta
    );
    println!("uniform policy expected reward: {baseline:.4}");
    println!("trained policy expected reward: {:.4}", run.policy.expected_reward());
    println!("final mean reward (last 10 iterations): {:.4}", run.tail_mean(10));
    println!("total variation to reference: {:.4}", run.policy.total_variation(&run.reference));
    if let Some(out) = &a.out {
        std::fs::write(out, curve_to_csv(&run.curve))
            .with_context(|| format!("writing {}", out.display()))
            .map_err(fail(EXIT_CONFIG))?;
        println!("curve: {}", out.display());
    }
    Ok(EXIT_OK)
}
