//! Conversation state, the ReAct envelope, and model backends.

pub mod backend;
pub mod conversation;
pub mod react;

use thiserror::Error;

pub use backend::{
    build_request_body, check_context, complete, request_digest, BackendFactory, BackendParams, ChatBackend,
    LiveBackend, LiveConfig, RecordingBackend, RecordingFactory, ReplayBackend, ReplayDir, ReplayRecord, ScriptDir,
    ScriptedBackend, SpyBackend,
};
pub use conversation::{assemble_prompt, Conversation, Message, Role};
pub use react::{parse_react, ReactTurn};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentIoError {
    #[error("unknown checkpoint label {0:?}")]
    UnknownLabel(String),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("unknown action {action:?}; allowed: {}", allowed.join(", "))]
    UnknownAction { action: String, allowed: Vec<String> },
    #[error("http failure: {0}")]
    HttpFailure(String),
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
    #[error("context overflow: ~{estimate} prompt tokens + {max_tokens} completion tokens exceeds {limit}")]
    ContextOverflow {
        estimate: usize,
        max_tokens: usize,
        limit: usize,
    },
    #[error("model call budget of {0} exhausted")]
    CallBudgetExhausted(usize),
    #[error("invalid backend parameters: {0}")]
    InvalidParams(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// A backend plus the run's call accounting and context guard.
pub struct ModelClient {
    backend: Box<dyn ChatBackend>,
    pub params: BackendParams,
    pub context_limit: usize,
    pub max_calls: usize,
    calls: usize,
}

impl ModelClient {
    pub fn new(backend: Box<dyn ChatBackend>, params: BackendParams, context_limit: usize, max_calls: usize) -> Self {
        Self {
            backend,
            params,
            context_limit,
            max_calls,
            calls: 0,
        }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn budget_left(&self) -> bool {
        self.calls < self.max_calls
    }

    /// Counts every request that reaches the backend, failed or not.
    pub fn complete(&mut self, messages: &[Message]) -> Result<String, AgentIoError> {
        if !self.budget_left() {
            return Err(AgentIoError::CallBudgetExhausted(self.max_calls));
        }
        self.params.validate()?;
        check_context(messages, &self.params, self.context_limit)?;
        self.calls += 1;
        self.backend.complete(messages, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_counts_and_caps_calls() {
        let mut client = ModelClient::new(
            Box::new(ScriptedBackend::new(["a", "b", "c"])),
            BackendParams::default(),
            backend::DEFAULT_CONTEXT_LIMIT,
            2,
        );
        let m = [Message::new(Role::User, "q")];
        assert_eq!(client.complete(&m).unwrap(), "a");
        assert_eq!(client.complete(&m).unwrap(), "b");
        assert_eq!(client.complete(&m), Err(AgentIoError::CallBudgetExhausted(2)));
        assert_eq!(client.calls(), 2);
    }
}
