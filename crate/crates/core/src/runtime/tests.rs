use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::TimeZone;

use super::*;
use crate::llm_gateway::Gateway;
use crate::tools::{CorpusDoc, FixtureIndex, WEB, WIKI};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap()
}

fn tools() -> ToolRegistry {
    let mut reg = ToolRegistry::new();
    let index = Arc::new(FixtureIndex::new(vec![
        CorpusDoc::new("1", "Hydrocephalus", "Hydrocephalus is a build-up of cerebrospinal fluid in the brain."),
        CorpusDoc::new("2", "Paris", "Paris is the capital and largest city of France."),
    ]));
    reg.register(WIKI, index.clone());
    reg.register(WEB, index);
    reg
}

fn decision(action: &str) -> String {
    format!(r#"{{"action":"{action}","reasoning":"r-{action}","params":null,"instruction":"i","locale":"en-US"}}"#)
}

fn delegate(agent: &str, desc: &str) -> String {
    format!(
        r#"{{"action":"delegate","reasoning":"need {agent}","params":{{"agent_type":"{agent}","task_description":"{desc}"}},"instruction":"assign","locale":"en-US"}}"#
    )
}

fn run_script(script: Vec<String>, max_steps: u32, ablation: Ablation) -> RunResult {
    let gw = Gateway::scripted(script);
    let tools = tools();
    let store = ExperienceStore::in_memory();
    let clock = FixedClock(t0());
    let mut config = RuntimeConfig::default();
    config.ablation = ablation;
    let ctx = RuntimeContext { gateway: &gw, tools: &tools, experience: &store, clock: &clock, config };
    let mut task = TaskSpec::new("What is the capital of France?", "u1", t0());
    task.max_steps = max_steps;
    run_task(&task, &ctx)
}

fn happy_script() -> Vec<String> {
    vec![
        delegate("searcher", "find the capital of France"),
        "<thought>SECRET-THOUGHT</thought><tool>wiki|capital of France</tool>".into(),
        "<answer>Paris is the capital of France.</answer>".into(),
        decision("summarize"),
        "- Paris is the capital of France.".into(),
        delegate("reporter", "Answer initial query based on previous observations."),
        "Paris is the capital. Therefore, my answer is Paris.".into(),
        decision("finish"),
        r#"{"user_profiles":[],"semantic_memory":["Paris is the capital of France"],"procedural_memory":[]}"#.into(),
    ]
}

#[test]
fn parse_plan_and_finish() {
    let d = parse_decision(&decision("plan")).unwrap();
    assert_eq!((d.action, d.locale.as_str(), d.params), (ActionKind::Plan, "en-US", None));
    let d = parse_decision(
        r#"{"action":"finish","reasoning":"done","params":null,"instruction":"Task completed","locale":"en-US"}"#,
    )
    .unwrap();
    assert_eq!(d.action, ActionKind::Finish);
    assert_eq!(d.instruction, "Task completed");
}

#[test]
fn parse_delegate_shapes() {
    let d = parse_decision(&format!("Sure.\n```json\n{}\n```", delegate("researcher", "look it up"))).unwrap();
    let p = d.params.unwrap();
    assert_eq!((p.agent_type.as_str(), p.task_description.as_str()), ("researcher", "look it up"));

    let d = parse_decision(r#"{"action":"delegate","reasoning":"x","handsoff":"Search Agent","subtask":"find it"}"#)
        .unwrap();
    let p = d.params.unwrap();
    assert_eq!((p.agent_type.as_str(), p.task_description.as_str()), ("Search Agent", "find it"));
    assert_eq!(d.instruction, "");
}

#[test]
fn parse_errors() {
    assert_eq!(parse_decision(r#"{"action":"dance"}"#), Err(DecisionError::UnknownAction("dance".into())));
    assert_eq!(parse_decision("I think we should plan."), Err(DecisionError::MalformedDocument));
    assert_eq!(parse_decision(r#"{"reasoning":"x"}"#), Err(DecisionError::MissingField("action")));
    assert_eq!(
        parse_decision(r#"{"action":"delegate","reasoning":"x","params":{"agent_type":"searcher"}}"#),
        Err(DecisionError::MissingField("params.task_description"))
    );
    assert_eq!(
        parse_decision(r#"{"action":"delegate","reasoning":"x","params":{"agent_type":"","task_description":"d"}}"#),
        Err(DecisionError::MissingField("params.agent_type"))
    );
}

#[test]
fn non_delegate_params_dropped() {
    let d = parse_decision(r#"{"action":"plan","reasoning":"x","params":{"agent_type":"searcher"}}"#).unwrap();
    assert_eq!(d.params, None);
}

#[test]
fn decide_reprompts_then_fails() {
    let task = TaskSpec::new("q", "u", t0());
    let stack = MemoryStack::new(4096);
    let cfg = RuntimeConfig::default();
    let gw = Gateway::scripted(["prose".to_string(), "more prose".into(), decision("plan")]);
    assert_eq!(decide(&gw, &task, &stack, &cfg.agents, 1, &cfg).unwrap().action, ActionKind::Plan);

    let gw = Gateway::scripted(["a", "b", "c", "never reached"]);
    match decide(&gw, &task, &stack, &cfg.agents, 1, &cfg) {
        Err(DecideError::Parse { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn terminate_verdicts() {
    let s = |steps_done, finished| LoopState { steps_done, max_steps: 3, finished };
    assert_eq!(should_terminate(&s(1, true)), Some(Termination::Finished));
    assert_eq!(should_terminate(&s(3, false)), Some(Termination::StepCapReached));
    assert_eq!(should_terminate(&s(2, false)), None);
}

#[test]
fn scripted_run_finishes() {
    let r = run_script(happy_script(), 25, Ablation::default());
    assert_eq!(r.termination, Termination::Finished);
    assert_eq!(r.final_answer, "Paris");
    let actions: Vec<ActionKind> = r.steps.iter().map(|s| s.decision.action).collect();
    assert_eq!(actions, [ActionKind::Delegate, ActionKind::Summarize, ActionKind::Delegate, ActionKind::Finish]);
    assert_eq!(r.curation.status, CurationStatus::Curated);
    for (i, s) in r.steps.iter().enumerate() {
        assert_eq!(s.step, i as u32 + 1);
        assert!(s.tokens_used > 0);
    }
    // TaskSpec, condensed(input, output), input, output
    assert_eq!(r.final_stack_snapshot.len(), 4);
}

#[test]
fn memory_lengths_track_stack() {
    let r = run_script(happy_script(), 25, Ablation::default());
    let lens: Vec<(usize, usize)> = r.steps.iter().map(|s| (s.memory_len_before, s.memory_len_after)).collect();
    assert_eq!(lens, [(1, 3), (3, 2), (2, 4), (4, 4)]);
    for w in r.steps.windows(2) {
        assert_eq!(w[0].memory_len_after, w[1].memory_len_before);
    }
}

#[test]
fn sub_agent_internals_stay_private() {
    let r = run_script(happy_script(), 25, Ablation::default());
    for e in r.final_stack_snapshot.entries() {
        assert!(!e.content.contains("SECRET-THOUGHT"));
        assert!(!e.content.contains("<tool>"));
    }
    assert!(r.delegations[0].transcript.steps[0].thought.contains("SECRET-THOUGHT"));
    let sub_sources: Vec<&str> = r
        .final_stack_snapshot
        .entries()
        .iter()
        .filter(|e| e.kind == EntryKind::SubAgentOutput)
        .map(|e| e.source.as_str())
        .collect();
    assert_eq!(sub_sources, ["reporter"]);
}

#[test]
fn step_cap() {
    let r = run_script(vec![decision("plan"), "analysis".into()], 1, Ablation::default());
    assert_eq!(r.termination, Termination::StepCapReached);
    assert_eq!(r.final_answer, "");
    assert_eq!(r.steps.len(), 1);
    assert_eq!(r.curation.status, CurationStatus::NotFinished);
}

#[test]
fn finish_without_delegation_rejected() {
    let r = run_script(vec![decision("finish"), decision("finish")], 2, Ablation::default());
    assert_eq!(r.termination, Termination::StepCapReached);
    assert_eq!(r.final_stack_snapshot.top().unwrap().kind, EntryKind::FailureRecord);
}

#[test]
fn reflect_prunes_and_pop_zero_keeps() {
    let script = vec![
        decision("plan"),
        "plan text".into(),
        delegate("searcher", "capital"),
        "<tool>wiki|capital of France</tool>".into(),
        "<answer>Not found.</answer>".into(),
        decision("reflect"),
        r#"{"analysis":"search missed","pop_count":0,"reasoning":"keep"}"#.into(),
        decision("reflect"),
        r#"{"analysis":"search missed the point","pop_count":2,"reasoning":"drop it"}"#.into(),
    ];
    let r = run_script(script, 4, Ablation::default());
    assert_eq!(r.steps[2].memory_len_before, r.steps[2].memory_len_after);
    assert!(r.steps[2].outcome_digest.contains("search missed"));
    assert_eq!((r.steps[3].memory_len_before, r.steps[3].memory_len_after), (4, 3));
    let top = r.final_stack_snapshot.top().unwrap();
    assert_eq!((top.kind, top.content.as_str()), (EntryKind::FailureRecord, "search missed the point"));
}

#[test]
fn reflect_too_deep_is_noop() {
    let script = vec![decision("reflect"), r#"{"analysis":"a","pop_count":9,"reasoning":"r"}"#.into()];
    let r = run_script(script, 1, Ablation::default());
    assert_eq!(r.final_stack_snapshot.len(), 1);
    assert!(r.steps[0].outcome_digest.contains("not applied"));
}

#[test]
fn unknown_agent_is_failure_record() {
    let r = run_script(vec![delegate("calculator", "2+2")], 1, Ablation::default());
    assert_eq!(r.final_stack_snapshot.top().unwrap().kind, EntryKind::FailureRecord);
    let r = run_script(vec![delegate("calculator", "2+2")], 1, Ablation { no_revise: true, no_experience: false });
    assert_eq!(r.final_stack_snapshot.top().unwrap().kind, EntryKind::SubAgentOutput);
}

#[test]
fn no_revise_skips_condensation() {
    let mut script = happy_script();
    script.remove(4); // summary text is never requested
    let r = run_script(script, 25, Ablation { no_revise: true, no_experience: false });
    assert_eq!(r.termination, Termination::Finished);
    assert!(!r.kinds_ever_pushed().contains(&EntryKind::Condensed));
    assert_eq!(r.steps[1].memory_len_before, r.steps[1].memory_len_after);
}

#[test]
fn no_experience_skips_curation() {
    let mut script = happy_script();
    script.pop();
    let r = run_script(script, 25, Ablation { no_revise: false, no_experience: true });
    assert_eq!(r.curation.status, CurationStatus::Disabled);
}

#[test]
fn gateway_exhaustion_is_unrecoverable() {
    let r = run_script(vec![decision("plan")], 5, Ablation::default());
    assert_eq!(r.termination, Termination::UnrecoverableError);
    assert_eq!(r.failure.unwrap().kind, FailureKind::Gateway);
    let r = run_script(vec!["x".into(), "y".into(), "z".into()], 5, Ablation::default());
    assert_eq!(r.failure.unwrap().kind, FailureKind::Parse);
    assert!(r.steps.is_empty());
}

#[test]
fn experience_injected_once() {
    let gw = Gateway::scripted(vec![decision("plan"), "p".into()]);
    let tools = tools();
    let store = ExperienceStore::in_memory();
    let mut rec = ExperienceRecord::empty("u1", t0());
    rec.components.semantic_memory.push("the capital of France is Paris".into());
    store.put(rec).unwrap();
    let clock = FixedClock(t0());
    let ctx = RuntimeContext {
        gateway: &gw,
        tools: &tools,
        experience: &store,
        clock: &clock,
        config: RuntimeConfig::default(),
    };
    let mut task = TaskSpec::new("What is the capital of France?", "u1", t0());
    task.max_steps = 1;
    let r = run_task(&task, &ctx);
    let kinds: Vec<EntryKind> = r.final_stack_snapshot.entries().iter().map(|e| e.kind).collect();
    assert_eq!(kinds, [EntryKind::TaskSpecEntry, EntryKind::ExperienceInjection, EntryKind::CoordinatorMessage]);
}

#[test]
fn invalid_task() {
    let r = run_script(vec![], 0, Ablation::default());
    assert_eq!(r.termination, Termination::UnrecoverableError);
    assert_eq!(r.failure.unwrap().kind, FailureKind::InvalidTask);
}

#[test]
fn answer_extraction() {
    assert_eq!(extract_answer("Reasoning... Therefore, my answer is A."), "A");
    assert_eq!(extract_answer("My final answer is: **Paris**"), "Paris");
    assert_eq!(extract_answer("  just text "), "just text");
}

#[test]
fn ablation_parse_and_display() {
    let a: Ablation = "no-revise,no-experience".parse().unwrap();
    assert!(a.no_revise && a.no_experience);
    assert_eq!(a.to_string(), "no-revise,no-experience");
    assert_eq!(Ablation::default().to_string(), "none");
    assert!("no-memory".parse::<Ablation>().is_err());
}

#[test]
fn traces_are_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    std::fs::write(
        &corpus,
        concat!(
            "{\"id\":\"1\",\"title\":\"Hydrocephalus\",\"text\":\"Hydrocephalus is a build-up of cerebrospinal fluid in the brain.\"}\n",
            "{\"id\":\"2\",\"title\":\"Paris\",\"text\":\"Paris is the capital and largest city of France.\"}\n",
        ),
    )
    .unwrap();
    let tools = ToolRegistry::from_fixture_path(&corpus).unwrap();
    let store = ExperienceStore::in_memory();
    let clock = FixedClock(t0());
    let task = TaskSpec::new("What is the capital of France?", "u1", t0());
    let fixture = dir.path().join("run.gateway.jsonl");
    let trace_path = dir.path().join("run.jsonl");

    let gw = Gateway::scripted(happy_script()).record_to(&fixture).unwrap();
    let ctx = RuntimeContext {
        gateway: &gw,
        tools: &tools,
        experience: &store,
        clock: &clock,
        config: RuntimeConfig::default(),
    };
    let result = run_task(&task, &ctx);
    let manifest = RunManifest {
        task: task.clone(),
        config: ctx.config.clone(),
        gateway: gw.defaults().clone(),
        gateway_fixture: Some("run.gateway.jsonl".into()),
        tools: "fixture:corpus.jsonl".into(),
        tool_top_k: 3,
        finished_at: result.finished_at,
        experience_before: None,
    };
    drop(gw);
    write_artifacts(&trace_path, &result, &manifest).unwrap();

    let again = run_script(happy_script(), 25, Ablation::default());
    assert_eq!(trace::trace_text(&again), std::fs::read_to_string(&trace_path).unwrap());

    let out = replay_run(&trace_path).unwrap();
    assert_eq!(out.mismatch, None);

    std::fs::remove_file(&fixture).unwrap();
    assert!(matches!(replay_run(&trace_path), Err(ReplayError::Missing { .. })));
}

#[test]
fn relative_paths() {
    assert_eq!(trace::relative_to(Path::new("/a/b/c.txt"), Path::new("/a/d")), PathBuf::from("../b/c.txt"));
    assert_eq!(trace::relative_to(Path::new("/a/b"), Path::new("/a")), PathBuf::from("b"));
}
