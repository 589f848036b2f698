//! Input builders shared by the benchmarks.

use stackplanner_core::grpo::{assign_token_rewards, RolloutGroup, Trajectory};
use stackplanner_core::{EntryKind, MemoryStack};

/// `k` trajectories of `len` tokens with rewards spread over `[0, 1]`.
pub fn rollout_group(k: usize, len: usize) -> RolloutGroup {
    let mut g = RolloutGroup {
        query_id: "bench".into(),
        trajectories: (0..k)
            .map(|i| Trajectory {
                tokens: (0..len as u32).collect(),
                logp_current: (0..len).map(|t| -0.5 - 0.01 * t as f64).collect(),
                logp_old: (0..len).map(|t| -0.52 - 0.01 * t as f64).collect(),
                logp_ref: vec![-0.6; len],
                outcome_reward: i as f64 / (k - 1).max(1) as f64,
                token_rewards: Vec::new(),
            })
            .collect(),
    };
    assign_token_rewards(&mut g);
    g
}

/// A task stack with `n` delegated exchanges on top of the task spec.
pub fn memory_stack(n: usize) -> MemoryStack {
    let mut s = MemoryStack::new(4096);
    s.push(EntryKind::TaskSpecEntry, "Task: which river flows through the capital of Hungary?", 0, "coordinator")
        .expect("non-empty");
    for i in 0..n {
        let step = i as u32 + 1;
        s.push(EntryKind::SubAgentInput, format!("to searcher: find fact {i}"), step, "coordinator")
            .expect("non-empty");
        s.push(EntryKind::SubAgentOutput, "The Danube flows through Budapest. ".repeat(8), step, "searcher")
            .expect("non-empty");
    }
    s
}
