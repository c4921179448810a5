use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AgentIoError;

const FENCE_OPEN: &str = "```action";
const FENCE: &str = "```";

/// One parsed model turn: a thought and a single action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactTurn {
    pub thought: String,
    pub action: String,
    pub args: BTreeMap<String, String>,
}

impl ReactTurn {
    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).map(String::as_str)
    }
}

fn arg_to_string(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        Value::Array(items) => items.iter().map(arg_to_string).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Extract the last ```action fenced block and validate it against the
/// stage vocabulary.
pub fn parse_react(raw: &str, vocabulary: &[&str]) -> Result<ReactTurn, AgentIoError> {
    let malformed = |why: &str| AgentIoError::MalformedAction(why.to_string());

    let open = raw.rfind(FENCE_OPEN).ok_or_else(|| malformed("no ```action block found"))?;
    let after = &raw[open + FENCE_OPEN.len()..];
    let body_start = after.find('\n').ok_or_else(|| malformed("action block has no body"))?;
    if !after[..body_start].trim().is_empty() {
        return Err(malformed("unexpected text after the ```action label"));
    }
    let body = &after[body_start + 1..];
    let close = body.find(FENCE).ok_or_else(|| malformed("action block is not closed"))?;
    let body = body[..close].trim();

    let value: Value =
        serde_json::from_str(body).map_err(|e| AgentIoError::MalformedAction(format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| malformed("action body is not a JSON object"))?;

    let thought = obj
        .get("thought")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string key \"thought\""))?;
    let action = obj
        .get("action")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string key \"action\""))?;
    let args = match obj.get("args") {
        Some(Value::Object(map)) => map.iter().map(|(k, v)| (k.clone(), arg_to_string(v))).collect(),
        Some(_) => return Err(malformed("\"args\" must be an object")),
        None => return Err(malformed("missing key \"args\"")),
    };

    if !vocabulary.contains(&action) {
        return Err(AgentIoError::UnknownAction {
            action: action.to_string(),
            allowed: vocabulary.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(ReactTurn {
        thought: thought.to_string(),
        action: action.to_string(),
        args,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_trailing_block() {
        let raw = "thinking...\n```action\n{\"thought\":\"t\",\"action\":\"search\",\"args\":{}}\n```";
        let turn = parse_react(raw, &["search", "done"]).unwrap();
        assert_eq!(turn.thought, "t");
        assert_eq!(turn.action, "search");
        assert!(turn.args.is_empty());
    }

    #[test]
    fn last_block_wins_and_args_are_stringified() {
        let raw = "```action\n{\"thought\":\"a\",\"action\":\"done\",\"args\":{}}\n```\nthen\n\
                   ```action\n{\"thought\":\"b\",\"action\":\"set_keywords\",\"args\":{\"keywords\":[\"x\",\"y\"],\"n\":3}}\n```\n";
        let turn = parse_react(raw, &["set_keywords", "done"]).unwrap();
        assert_eq!(turn.thought, "b");
        assert_eq!(turn.arg("keywords"), Some("x,y"));
        assert_eq!(turn.arg("n"), Some("3"));
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_react("just prose", &["search"]), Err(AgentIoError::MalformedAction(_))));
        assert!(matches!(
            parse_react("```action\n{not json}\n```", &["search"]),
            Err(AgentIoError::MalformedAction(_))
        ));
        assert!(matches!(
            parse_react("```action\n{\"thought\":\"t\",\"action\":\"search\"}\n```", &["search"]),
            Err(AgentIoError::MalformedAction(_))
        ));
        assert!(matches!(
            parse_react("```action\n{\"thought\":\"t\",\"action\":\"search\",\"args\":{}}\n", &["search"]),
            Err(AgentIoError::MalformedAction(_))
        ));
        assert!(matches!(
            parse_react("```action\n{\"thought\":\"t\",\"action\":\"fly\",\"args\":{}}\n```", &["search"]),
            Err(AgentIoError::UnknownAction { .. })
        ));
    }
}
