use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stackplanner_bench::{memory_stack, rollout_group};
use stackplanner_core::evaluation::token_f1;
use stackplanner_core::grpo::{compute_advantages, grpo_objective, GrpoConfig};
use stackplanner_core::llm_gateway::{render_template, vars};
use stackplanner_core::prompts;

fn advantages(c: &mut Criterion) {
    let cfg = GrpoConfig { beta: 0.1, ..GrpoConfig::default() };
    let mut g = c.benchmark_group("grpo");
    for (k, len) in [(8, 32), (16, 256)] {
        let group = rollout_group(k, len);
        g.bench_with_input(BenchmarkId::new("advantages", format!("{k}x{len}")), &group, |b, group| {
            b.iter(|| compute_advantages(black_box(group), &cfg).expect("non-degenerate"))
        });
        g.bench_with_input(BenchmarkId::new("objective", format!("{k}x{len}")), &group, |b, group| {
            b.iter(|| grpo_objective(black_box(group), &cfg).expect("valid group"))
        });
    }
    g.finish();
}

fn memory(c: &mut Criterion) {
    let mut g = c.benchmark_group("memory");
    for n in [4, 64] {
        let stack = memory_stack(n);
        g.bench_with_input(BenchmarkId::new("render", n), &stack, |b, s| b.iter(|| s.render(black_box(1024))));
        g.bench_with_input(BenchmarkId::new("condense", n), &stack, |b, s| {
            b.iter_batched(
                || s.clone(),
                |mut s| s.condense(2, "- condensed", n as u32 + 1).expect("valid index"),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let gold = ["the Danube river", "Danube", "Duna"];
    c.bench_function("token_f1", |b| {
        b.iter(|| token_f1(black_box("The river is the Danube, which flows through Budapest."), &gold))
    });
}

fn templates(c: &mut Criterion) {
    let v = vars([
        ("task_memory_json", "[]".to_string()),
        ("existing_long_term_memory_json", "{}".to_string()),
        ("now_timestamp", "2025-03-01T09:00:00Z".to_string()),
    ]);
    c.bench_function("render_curator_template", |b| b.iter(|| render_template(prompts::CURATOR, black_box(&v))));
}

criterion_group!(benches, advantages, memory, scoring, templates);
criterion_main!(benches);
