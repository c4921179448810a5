use serde::{Deserialize, Serialize};

use super::prompts;
use super::OrchestratorError;
use crate::agentio::{Message, ModelClient, Role};

pub const MAX_SUMMARY_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub original_statement: String,
    pub summary_text: String,
    pub expected_signature: Option<String>,
    /// True when the model gave nothing usable and the statement stands in.
    pub degraded: bool,
}

fn truncate_chars(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

/// Apply the `SUMMARY:` / `SIGNATURE:` grammar. Text outside a SUMMARY line
/// counts as summary when no SUMMARY line exists.
pub fn parse_summary(statement: &str, reply: &str) -> ProblemSummary {
    let mut summary_lines: Vec<&str> = Vec::new();
    let mut loose_lines: Vec<&str> = Vec::new();
    let mut signature = None;
    let mut in_summary = false;
    for line in reply.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("SUMMARY:") {
            in_summary = true;
            summary_lines.push(rest.trim());
        } else if let Some(rest) = trimmed.strip_prefix("SIGNATURE:") {
            in_summary = false;
            let rest = rest.trim();
            if !rest.is_empty() {
                signature = Some(rest.to_string());
            }
        } else if in_summary {
            summary_lines.push(trimmed);
        } else {
            loose_lines.push(trimmed);
        }
    }
    let chosen = if summary_lines.is_empty() { loose_lines } else { summary_lines };
    let text = chosen.join("\n").trim().to_string();
    let degraded = text.is_empty();
    let summary_text = if degraded {
        truncate_chars(statement.trim(), MAX_SUMMARY_CHARS)
    } else {
        truncate_chars(&text, MAX_SUMMARY_CHARS)
    };
    ProblemSummary {
        original_statement: statement.to_string(),
        summary_text,
        expected_signature: signature,
        degraded,
    }
}

/// One model call, outside the run's conversation.
pub fn summarize_problem(statement: &str, client: &mut ModelClient) -> Result<ProblemSummary, OrchestratorError> {
    if statement.trim().is_empty() {
        return Err(OrchestratorError::EmptyStatement);
    }
    let messages = [
        Message::new(Role::System, prompts::SUMMARY_SYSTEM),
        Message::new(Role::User, statement),
    ];
    let reply = client.complete(&messages)?;
    Ok(parse_summary(statement, &reply))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentio::{BackendParams, ScriptedBackend};

    fn client(replies: &[&str]) -> ModelClient {
        let replies: Vec<String> = replies.iter().map(|s| s.to_string()).collect();
        ModelClient::new(Box::new(ScriptedBackend::new(replies)), BackendParams::default(), 128_000, 10)
    }

    #[test]
    fn grammar_extracts_both_fields() {
        let mut c = client(&["SUMMARY: off-by-one in g\nSIGNATURE: AssertionError"]);
        let s = summarize_problem("g is wrong", &mut c).unwrap();
        assert_eq!(s.summary_text, "off-by-one in g");
        assert_eq!(s.expected_signature.as_deref(), Some("AssertionError"));
        assert!(!s.degraded);
        assert_eq!(c.calls(), 1);
    }

    #[test]
    fn missing_signature_line() {
        let s = parse_summary("p", "SUMMARY: g returns 1\nbut should return 2");
        assert_eq!(s.summary_text, "g returns 1\nbut should return 2");
        assert_eq!(s.expected_signature, None);
        let s = parse_summary("p", "just prose");
        assert_eq!(s.summary_text, "just prose");
    }

    #[test]
    fn empty_reply_degrades_to_statement() {
        let statement = "x".repeat(2500);
        let s = parse_summary(&statement, "  \n");
        assert!(s.degraded);
        assert_eq!(s.summary_text.chars().count(), MAX_SUMMARY_CHARS);
        let s = parse_summary("stmt", "SIGNATURE: Boom");
        assert!(s.degraded);
        assert_eq!((s.summary_text.as_str(), s.expected_signature.as_deref()), ("stmt", Some("Boom")));
    }

    #[test]
    fn empty_statement_is_rejected_without_a_call() {
        let mut c = client(&["SUMMARY: x"]);
        assert!(matches!(summarize_problem("  ", &mut c), Err(OrchestratorError::EmptyStatement)));
        assert_eq!(c.calls(), 0);
    }
}
