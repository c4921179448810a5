use serde::{Deserialize, Serialize};

use super::AgentIoError;

pub const DEFAULT_WINDOW: usize = 8;

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

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default)]
    pub pinned: bool,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            pinned: false,
        }
    }

    pub fn pinned(role: Role, content: impl Into<String>) -> Self {
        Self {
            pinned: true,
            ..Self::new(role, content)
        }
    }

    pub fn token_estimate(&self) -> usize {
        self.content.chars().count().div_ceil(4)
    }
}

pub fn estimate_tokens(messages: &[Message]) -> usize {
    messages.iter().map(Message::token_estimate).sum()
}

/// Full message history with named length checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    messages: Vec<Message>,
    checkpoints: Vec<(String, usize)>,
}

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn push_user(&mut self, content: impl Into<String>) {
        self.push(Message::new(Role::User, content));
    }

    pub fn push_assistant(&mut self, content: impl Into<String>) {
        self.push(Message::new(Role::Assistant, content));
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn token_estimate(&self) -> usize {
        estimate_tokens(&self.messages)
    }

    pub fn checkpoints(&self) -> &[(String, usize)] {
        &self.checkpoints
    }

    pub fn checkpoint_len(&self, label: &str) -> Option<usize> {
        self.checkpoints.iter().find(|(l, _)| l == label).map(|(_, n)| *n)
    }

    /// Record the current length under `label`. Re-using a label moves it to
    /// the end of the creation order.
    pub fn checkpoint(&mut self, label: &str) {
        self.checkpoints.retain(|(l, _)| l != label);
        self.checkpoints.push((label.to_string(), self.messages.len()));
    }

    /// Truncate to the length recorded at `label` and forget every
    /// checkpoint created after it.
    pub fn rollback_to(&mut self, label: &str) -> Result<(), AgentIoError> {
        let pos = self
            .checkpoints
            .iter()
            .position(|(l, _)| l == label)
            .ok_or_else(|| AgentIoError::UnknownLabel(label.to_string()))?;
        let len = self.checkpoints[pos].1;
        self.messages.truncate(len);
        self.checkpoints.truncate(pos + 1);
        Ok(())
    }

    pub fn assemble_prompt(&self, window_k: usize) -> Vec<Message> {
        assemble_prompt(&self.messages, window_k)
    }
}

/// Pinned messages in order, then the last `window_k` exchanges of the
/// unpinned history. An exchange opens at a user message; a trailing user
/// message without a reply is always kept and does not use up the window.
pub fn assemble_prompt(messages: &[Message], window_k: usize) -> Vec<Message> {
    let window_k = window_k.max(1);
    let mut out: Vec<Message> = messages.iter().filter(|m| m.pinned).cloned().collect();
    let rest: Vec<&Message> = messages.iter().filter(|m| !m.pinned).collect();

    // group into exchanges
    let mut groups: Vec<Vec<&Message>> = Vec::new();
    for m in rest {
        if m.role == Role::User || groups.is_empty() {
            groups.push(vec![m]);
        } else {
            groups.last_mut().expect("non-empty").push(m);
        }
    }
    let partial = match groups.last() {
        Some(g) if g.iter().all(|m| m.role != Role::Assistant) && g[0].role == Role::User => groups.pop(),
        _ => None,
    };
    let skip = groups.len().saturating_sub(window_k);
    for group in groups.into_iter().skip(skip).chain(partial) {
        out.extend(group.into_iter().cloned());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(pinned: usize, exchanges: usize, trailing_user: bool) -> Vec<Message> {
        let mut v: Vec<Message> = (0..pinned).map(|i| Message::pinned(Role::System, format!("p{i}"))).collect();
        for i in 0..exchanges {
            v.push(Message::new(Role::User, format!("u{i}")));
            v.push(Message::new(Role::Assistant, format!("a{i}")));
        }
        if trailing_user {
            v.push(Message::new(Role::User, "tail"));
        }
        v
    }

    #[test]
    fn window_keeps_last_exchanges() {
        let h = history(2, 12, false);
        let p = assemble_prompt(&h, 8);
        assert_eq!(p.len(), 2 + 16);
        assert_eq!(p[2].content, "u4");
        assert_eq!(p.last().unwrap().content, "a11");
    }

    #[test]
    fn short_history_is_returned_whole() {
        let h = history(1, 3, false);
        assert_eq!(assemble_prompt(&h, 8), h);
        let only = history(2, 0, false);
        assert_eq!(assemble_prompt(&only, 8), only);
    }

    #[test]
    fn trailing_user_is_kept_on_top_of_window() {
        let h = history(1, 5, true);
        let p = assemble_prompt(&h, 2);
        let contents: Vec<&str> = p.iter().map(|m| m.content.as_str()).collect();
        assert_eq!(contents, ["p0", "u3", "a3", "u4", "a4", "tail"]);
    }

    #[test]
    fn checkpoints_and_rollback() {
        let mut c = Conversation::new();
        for i in 0..5 {
            c.push_user(format!("m{i}"));
        }
        c.checkpoint("s2");
        for i in 0..6 {
            c.push_assistant(format!("n{i}"));
        }
        c.checkpoint("later");
        c.rollback_to("s2").unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.checkpoint_len("later").is_none());
        c.rollback_to("s2").unwrap();
        assert_eq!(c.len(), 5);
        assert!(matches!(c.rollback_to("nope"), Err(AgentIoError::UnknownLabel(_))));
    }

    #[test]
    fn token_estimate_rounds_up() {
        let mut c = Conversation::new();
        c.push_user("abcde"); // 2
        c.push_user("abcd"); // 1
        c.push_user(""); // 0
        assert_eq!(c.token_estimate(), 3);
    }
}
