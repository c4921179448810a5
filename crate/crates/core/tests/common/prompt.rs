use proptest::prelude::*;
use repeton::agentio::{Message, Role};

/// Independent model of prompt truncation: pinned first, then everything
/// from the k-th user message counting back from the end, then a trailing
/// unanswered user message.
pub fn oracle(messages: &[Message], k: usize) -> Vec<Message> {
    let mut out: Vec<Message> = messages.iter().filter(|m| m.pinned).cloned().collect();
    let mut rest: Vec<Message> = messages.iter().filter(|m| !m.pinned).cloned().collect();
    let tail = match rest.last() {
        Some(m) if m.role == Role::User => rest.pop(),
        _ => None,
    };
    let mut cut = 0;
    let mut seen = 0;
    for i in (0..rest.len()).rev() {
        if rest[i].role == Role::User {
            seen += 1;
            if seen == k {
                cut = i;
                break;
            }
        }
    }
    out.extend(rest.drain(cut..));
    out.extend(tail);
    out
}

pub fn message() -> impl Strategy<Value = Message> {
    (0u8..5, "[a-z]{0,6}").prop_map(|(kind, text)| match kind {
        0 => Message::pinned(Role::System, text),
        1 | 2 => Message::new(Role::User, text),
        _ => Message::new(Role::Assistant, text),
    })
}

pub fn conversation() -> impl Strategy<Value = (Vec<Message>, usize)> {
    (prop::collection::vec(message(), 0..40), 1usize..10)
}
