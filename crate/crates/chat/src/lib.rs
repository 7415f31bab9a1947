//! Client for OpenAI-compatible chat-completion endpoints, plus adapters that
//! plug a remote model into caption generation, pair building and judging.

mod blocking;
mod client;
#[cfg(feature = "mock")]
pub mod mock;
mod template;

pub use blocking::{gen_sft_seed, parse_judge_reply, BlockingChat, HttpGenerator, HttpJudge, SeedOutcome};
pub use client::{
    is_retryable, AuditLog, AuditRecord, ChatClient, ChatError, ChatMessage, ChatOutcome, ChatSampling, RetryPolicy,
    Usage,
};
pub use template::{PromptTemplate, TemplateError};
