use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, TemplateId};
use crate::model::{Disclosure, QueryKind, QuerySemantics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

/// Structured side channel describing what a stage is asking.
///
/// Live backends ignore it and see only the rendered messages. The synthetic
/// oracle answers from it so that it never has to parse prose.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TaskHint {
    #[default]
    None,
    Selection {
        candidates: Vec<Disclosure>,
    },
    Ordering {
        subset: Vec<Disclosure>,
    },
    Dependencies {
        target: Disclosure,
        priors: Vec<Disclosure>,
    },
    QueryGeneration {
        kind: QueryKind,
        semantics: QuerySemantics,
    },
    Decomposition {
        semantics: QuerySemantics,
    },
    Estimation {
        kind: QueryKind,
        semantics: QuerySemantics,
    },
    Review {
        kind: QueryKind,
        semantics: QuerySemantics,
    },
    Simplify {
        kind: QueryKind,
        semantics: QuerySemantics,
    },
    Baseline {
        disclosures: Vec<Disclosure>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub template: TemplateId,
    pub messages: Vec<ChatMessage>,
    pub params: CompletionParams,
    /// Draw index for repeated sampling of the same prompt.
    pub sample: u32,
    pub hint: TaskHint,
}

impl CompletionRequest {
    pub fn digest(&self) -> String {
        digest_messages(&self.messages)
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Content digest of a conversation: the first 16 hex digits of SHA-256 over
/// `role\0content\0` for every message.
pub fn digest_messages(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m.role.as_str().as_bytes());
        h.update([0]);
        h.update(m.content.as_bytes());
        h.update([0]);
    }
    let out = h.finalize();
    out.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;

    /// Upper bound on in-flight requests the caller should issue.
    fn max_concurrency(&self) -> usize {
        4
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

/// Counts calls made through the wrapped backend.
pub struct CallCounter<B> {
    inner: B,
    calls: AtomicU64,
}

impl<B: ChatBackend> CallCounter<B> {
    pub fn new(inner: B) -> Self {
        CallCounter {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<B: ChatBackend> ChatBackend for CallCounter<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }
}
