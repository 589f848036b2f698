//! Hierarchical coordinator runtime with stack-structured task memory.
//!
//! A central coordinator keeps an explicit [`MemoryStack`] and chooses one of
//! five actions per step (plan, reflect, summarize, delegate, finish).
//! Delegated subtasks run in sub-agents with private contexts; only their
//! final results reach the stack. Completed runs are distilled into a
//! persistent per-user [`ExperienceRecord`]. The [`grpo`] module holds the
//! group-relative policy optimization math together with a toy environment
//! used to check it.

pub mod agents;
pub mod config;
pub mod document;
pub mod evaluation;
pub mod experience_memory;
pub mod grpo;
pub mod llm_gateway;
pub mod prompts;
pub mod runtime;
pub mod task_memory;
pub mod tools;

#[cfg(test)]
mod test_support;

pub use experience_memory::{ExperienceRecord, ExperienceStore, ProcedureSop};
pub use llm_gateway::{ChatClient, ChatMessage, Gateway, GatewayError};
pub use runtime::{
    run_task, ActionKind, CoordinatorDecision, RunResult, RuntimeConfig, RuntimeContext, StepRecord, TaskSpec,
    Termination,
};
pub use task_memory::{EntryKind, MemoryEntry, MemoryError, MemoryStack};
pub use tools::{SearchHit, ToolCall, ToolRegistry};
