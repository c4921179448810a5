//! Model backends: live chat-completions over HTTP, deterministic replay of
//! recorded transcripts, fixed scripts, and a recorder that proxies any of
//! them while writing a transcript.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::conversation::{estimate_tokens, Message};
use super::AgentIoError;

pub const API_KEY_ENV: &str = "REPETON_API_KEY";
pub const BASE_URL_ENV: &str = "REPETON_BASE_URL";
pub const DEFAULT_CONTEXT_LIMIT: usize = 128_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for BackendParams {
    fn default() -> Self {
        Self {
            model_id: "deepseek-reasoner".into(),
            temperature: 0.0,
            max_tokens: 4096,
        }
    }
}

impl BackendParams {
    pub fn validate(&self) -> Result<(), AgentIoError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(AgentIoError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(AgentIoError::InvalidParams("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send {
    fn complete(&mut self, messages: &[Message], params: &BackendParams) -> Result<String, AgentIoError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&mut self, messages: &[Message], params: &BackendParams) -> Result<String, AgentIoError> {
        (**self).complete(messages, params)
    }
}

/// Reject a request whose estimated size cannot fit, before it is sent.
pub fn check_context(messages: &[Message], params: &BackendParams, context_limit: usize) -> Result<(), AgentIoError> {
    let estimate = estimate_tokens(messages);
    if estimate + params.max_tokens > context_limit {
        return Err(AgentIoError::ContextOverflow {
            estimate,
            max_tokens: params.max_tokens,
            limit: context_limit,
        });
    }
    Ok(())
}

/// Guarded completion: context check first, then the backend.
pub fn complete(
    backend: &mut dyn ChatBackend,
    messages: &[Message],
    params: &BackendParams,
    context_limit: usize,
) -> Result<String, AgentIoError> {
    params.validate()?;
    check_context(messages, params, context_limit)?;
    backend.complete(messages, params)
}

/// Digest identifying a request in replay transcripts.
pub fn request_digest(model_id: &str, messages: &[Message]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    for m in messages {
        hasher.update(b"\n");
        hasher.update(m.role.as_str().as_bytes());
        hasher.update(b":");
        hasher.update(m.content.as_bytes());
    }
    hex::encode(hasher.finalize())
}

// ---------------------------------------------------------------------------
// replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub request_digest: String,
    pub response: String,
}

pub fn read_transcript(path: &Path) -> Result<Vec<ReplayRecord>, AgentIoError> {
    let file = File::open(path).map_err(|e| AgentIoError::Io(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AgentIoError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReplayRecord = serde_json::from_str(&line)
            .map_err(|e| AgentIoError::Io(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Answers strictly in transcript order; each request must match the digest
/// of the next record.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    records: Vec<ReplayRecord>,
    cursor: usize,
}

impl ReplayBackend {
    pub fn new(records: Vec<ReplayRecord>) -> Self {
        Self { records, cursor: 0 }
    }

    pub fn from_path(path: &Path) -> Result<Self, AgentIoError> {
        Ok(Self::new(read_transcript(path)?))
    }

    pub fn served(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.records.len() - self.cursor
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&mut self, messages: &[Message], params: &BackendParams) -> Result<String, AgentIoError> {
        let digest = request_digest(&params.model_id, messages);
        let Some(record) = self.records.get(self.cursor) else {
            return Err(AgentIoError::ReplayMismatch(format!(
                "transcript exhausted after {} responses",
                self.cursor
            )));
        };
        if record.request_digest != digest {
            return Err(AgentIoError::ReplayMismatch(format!(
                "request {} digest {digest} does not match recorded {}",
                self.cursor + 1,
                record.request_digest
            )));
        }
        self.cursor += 1;
        Ok(record.response.clone())
    }
}

/// Returns canned responses in order regardless of the request.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    responses: Vec<String>,
    cursor: usize,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: responses.into_iter().map(Into::into).collect(),
            cursor: 0,
        }
    }

    /// A JSON array of response strings.
    pub fn from_path(path: &Path) -> Result<Self, AgentIoError> {
        let text = fs::read_to_string(path).map_err(|e| AgentIoError::Io(format!("{}: {e}", path.display())))?;
        let responses: Vec<String> =
            serde_json::from_str(&text).map_err(|e| AgentIoError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::new(responses))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&mut self, _messages: &[Message], _params: &BackendParams) -> Result<String, AgentIoError> {
        let response = self
            .responses
            .get(self.cursor)
            .cloned()
            .ok_or_else(|| AgentIoError::ReplayMismatch(format!("script exhausted after {} responses", self.cursor)))?;
        self.cursor += 1;
        Ok(response)
    }
}

/// Proxies `inner` and appends every answered request to a transcript file.
pub struct RecordingBackend<B> {
    inner: B,
    out: File,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn create(inner: B, path: &Path) -> Result<Self, AgentIoError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| AgentIoError::Io(format!("{}: {e}", parent.display())))?;
        }
        let out = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| AgentIoError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { inner, out })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&mut self, messages: &[Message], params: &BackendParams) -> Result<String, AgentIoError> {
        let response = self.inner.complete(messages, params)?;
        let record = ReplayRecord {
            request_digest: request_digest(&params.model_id, messages),
            response: response.clone(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| AgentIoError::Io(e.to_string()))?;
        self.out.flush().map_err(|e| AgentIoError::Io(e.to_string()))?;
        Ok(response)
    }
}

/// Records every prompt sent through it. Test and audit helper.
pub struct SpyBackend<B> {
    inner: B,
    log: Arc<Mutex<Vec<Vec<Message>>>>,
}

impl<B: ChatBackend> SpyBackend<B> {
    pub fn new(inner: B) -> (Self, Arc<Mutex<Vec<Vec<Message>>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        (
            Self {
                inner,
                log: Arc::clone(&log),
            },
            log,
        )
    }
}

impl<B: ChatBackend> ChatBackend for SpyBackend<B> {
    fn complete(&mut self, messages: &[Message], params: &BackendParams) -> Result<String, AgentIoError> {
        self.log.lock().expect("spy log").push(messages.to_vec());
        self.inner.complete(messages, params)
    }
}

// ---------------------------------------------------------------------------
// live
// ---------------------------------------------------------------------------

/// JSON body of a chat-completions request.
pub fn build_request_body(messages: &[Message], params: &BackendParams) -> Value {
    json!({
        "model": params.model_id,
        "messages": messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect::<Vec<_>>(),
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    })
}

pub fn parse_response_body(body: &str) -> Result<String, AgentIoError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| AgentIoError::HttpFailure(format!("response is not JSON: {e}")))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| AgentIoError::HttpFailure("response has no choices[0].message.content".into()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    /// Sleep before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
    pub timeout: Duration,
}

impl LiveConfig {
    pub fn from_env() -> Result<Self, AgentIoError> {
        let base_url = std::env::var(BASE_URL_ENV)
            .map_err(|_| AgentIoError::InvalidParams(format!("{BASE_URL_ENV} is not set")))?;
        Ok(Self {
            base_url,
            api_key: std::env::var(API_KEY_ENV).ok(),
            backoff: [1, 2, 4].map(Duration::from_secs).to_vec(),
            timeout: Duration::from_secs(600),
        })
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &str) -> Result<String, AgentIoError> {
        let mut request = self.agent.post(self.endpoint()).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| AgentIoError::HttpFailure(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| AgentIoError::HttpFailure(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(AgentIoError::HttpFailure(format!("status {status}: {}", truncate(&text, 512))));
        }
        parse_response_body(&text)
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&mut self, messages: &[Message], params: &BackendParams) -> Result<String, AgentIoError> {
        let body = build_request_body(messages, params).to_string();
        let mut last = self.attempt(&body);
        for delay in &self.config.backoff {
            if last.is_ok() {
                break;
            }
            std::thread::sleep(*delay);
            last = self.attempt(&body);
        }
        last
    }
}

// ---------------------------------------------------------------------------
// per-run construction
// ---------------------------------------------------------------------------

/// Builds an independent backend (own cursor, own connection) per run.
pub trait BackendFactory: Send + Sync {
    fn for_run(&self, instance_id: &str) -> Result<Box<dyn ChatBackend>, AgentIoError>;
}

impl<F: BackendFactory + ?Sized> BackendFactory for Box<F> {
    fn for_run(&self, instance_id: &str) -> Result<Box<dyn ChatBackend>, AgentIoError> {
        (**self).for_run(instance_id)
    }
}

/// `<dir>/<instance_id>.jsonl` transcripts.
#[derive(Debug, Clone)]
pub struct ReplayDir(pub PathBuf);

impl BackendFactory for ReplayDir {
    fn for_run(&self, instance_id: &str) -> Result<Box<dyn ChatBackend>, AgentIoError> {
        let path = self.0.join(format!("{instance_id}.jsonl"));
        Ok(Box::new(ReplayBackend::from_path(&path)?))
    }
}

/// `<dir>/<instance_id>.json` scripts.
#[derive(Debug, Clone)]
pub struct ScriptDir(pub PathBuf);

impl BackendFactory for ScriptDir {
    fn for_run(&self, instance_id: &str) -> Result<Box<dyn ChatBackend>, AgentIoError> {
        let path = self.0.join(format!("{instance_id}.json"));
        Ok(Box::new(ScriptedBackend::from_path(&path)?))
    }
}

impl BackendFactory for LiveConfig {
    fn for_run(&self, _instance_id: &str) -> Result<Box<dyn ChatBackend>, AgentIoError> {
        Ok(Box::new(LiveBackend::new(self.clone())))
    }
}

/// Wraps another factory and records each run to `<dir>/<instance_id>.jsonl`.
pub struct RecordingFactory<F> {
    pub inner: F,
    pub dir: PathBuf,
}

impl<F: BackendFactory> BackendFactory for RecordingFactory<F> {
    fn for_run(&self, instance_id: &str) -> Result<Box<dyn ChatBackend>, AgentIoError> {
        let inner = self.inner.for_run(instance_id)?;
        let path = self.dir.join(format!("{instance_id}.jsonl"));
        Ok(Box::new(RecordingBackend::create(inner, &path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentio::conversation::Role;

    fn msgs() -> Vec<Message> {
        vec![Message::pinned(Role::System, "sys"), Message::new(Role::User, "hi")]
    }

    #[test]
    fn replay_matches_then_rejects() {
        let params = BackendParams::default();
        let record = ReplayRecord {
            request_digest: request_digest(&params.model_id, &msgs()),
            response: "hello".into(),
        };
        let mut b = ReplayBackend::new(vec![record.clone()]);
        assert_eq!(b.complete(&msgs(), &params).unwrap(), "hello");
        assert!(matches!(b.complete(&msgs(), &params), Err(AgentIoError::ReplayMismatch(_))));

        let mut b = ReplayBackend::new(vec![record]);
        let other = vec![Message::new(Role::User, "different")];
        assert!(matches!(b.complete(&other, &params), Err(AgentIoError::ReplayMismatch(_))));
        assert_eq!(b.served(), 0);
    }

    #[test]
    fn digest_depends_on_model_role_and_content() {
        let base = request_digest("m", &msgs());
        assert_ne!(base, request_digest("m2", &msgs()));
        let mut swapped = msgs();
        swapped[1].role = Role::Assistant;
        assert_ne!(base, request_digest("m", &swapped));
        assert_eq!(base.len(), 64);
    }

    #[test]
    fn overflow_fires_before_backend() {
        let (mut spy, log) = SpyBackend::new(ScriptedBackend::new(["x"]));
        let huge = vec![Message::new(Role::User, "a".repeat(130_000 * 4))];
        let params = BackendParams {
            max_tokens: 1,
            ..Default::default()
        };
        let err = complete(&mut spy, &huge, &params, 128_000).unwrap_err();
        assert!(matches!(err, AgentIoError::ContextOverflow { estimate: 130_000, .. }));
        assert!(log.lock().unwrap().is_empty());
    }

    #[test]
    fn params_validation() {
        let mut p = BackendParams {
            temperature: 2.5,
            ..BackendParams::default()
        };
        assert!(p.validate().is_err());
        p.temperature = 2.0;
        p.max_tokens = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn recorder_writes_replayable_transcript() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let params = BackendParams::default();
        {
            let mut rec = RecordingBackend::create(ScriptedBackend::new(["r1", "r2"]), &path).unwrap();
            rec.complete(&msgs(), &params).unwrap();
            rec.complete(&msgs()[..1], &params).unwrap();
        }
        let mut replay = ReplayBackend::from_path(&path).unwrap();
        assert_eq!(replay.complete(&msgs(), &params).unwrap(), "r1");
        assert_eq!(replay.complete(&msgs()[..1], &params).unwrap(), "r2");
    }

    #[test]
    fn response_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"ok"}}]}"#;
        assert_eq!(parse_response_body(body).unwrap(), "ok");
        assert!(parse_response_body(r#"{"choices":[]}"#).is_err());
    }
}
