//! Chat-model backends, prompt templates and output extraction.
//!
//! Every pipeline stage renders a [`PromptTemplate`], sends the resulting
//! messages through a [`ChatBackend`], and pulls its answer out of tagged
//! regions of the completion with [`extract_tagged`] and friends.

mod backend;
mod extract;
mod live;
mod scripted;
mod template;

pub use backend::{
    digest_messages, CallCounter, ChatBackend, ChatMessage, CompletionParams, CompletionRequest, Role, TaskHint,
};
pub use extract::{extract_list, extract_tagged, parse_numeric, wrap, ExtractError, ListItem};
pub use live::{LiveBackend, LiveConfig};
pub use scripted::{FixtureEntry, FnBackend, ScriptedBackend, ScriptedFixture};
pub use template::{render_prompt, PromptLibrary, PromptTemplate, TemplateError, TemplateId};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no fixture for template `{template}` with digest {digest}")]
    FixtureMiss {
        template: TemplateId,
        digest: String,
        sample: u32,
    },
    #[error("oracle cannot answer: {0}")]
    Oracle(String),
}

impl BackendError {
    /// Transport failures, rate limiting and server errors may succeed on retry.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}
