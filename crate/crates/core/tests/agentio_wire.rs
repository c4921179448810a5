mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

use common::prompt::conversation;
use proptest::prelude::*;
use repeton::agentio::backend::parse_response_body;
use repeton::agentio::{
    assemble_prompt, build_request_body, request_digest, AgentIoError, BackendParams, ChatBackend, LiveBackend,
    LiveConfig, Message, ModelClient, RecordingBackend, ReplayBackend, Role, ScriptedBackend, SpyBackend,
};
use serde_json::Value;

fn hello() -> Vec<Message> {
    vec![
        Message::pinned(Role::System, "You are helpful."),
        Message::new(Role::User, "hi"),
    ]
}

#[test]
fn request_body_matches_golden() {
    let golden: Value =
        serde_json::from_str(&std::fs::read_to_string(common::fixtures().join("wire/request.golden.json")).unwrap())
            .unwrap();
    assert_eq!(build_request_body(&hello(), &BackendParams::default()), golden);
}

#[test]
fn response_content_is_extracted() {
    let body = std::fs::read_to_string(common::fixtures().join("wire/response.json")).unwrap();
    assert_eq!(parse_response_body(&body).unwrap(), "hello there");
    assert!(matches!(parse_response_body("{\"choices\": []}"), Err(AgentIoError::HttpFailure(_))));
    assert!(matches!(parse_response_body("<html>"), Err(AgentIoError::HttpFailure(_))));
}

#[test]
fn digest_matches_independent_sha256() {
    // hashlib.sha256(b"deepseek-reasoner\nsystem:You are helpful.\nuser:hi")
    assert_eq!(
        request_digest("deepseek-reasoner", &hello()),
        "3bcf910b4da8bca84b9e2fb46586f6fcefab68937346d156aaadb3c8b4ab5837"
    );
}

#[test]
fn recording_then_replay_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let params = BackendParams::default();
    let second = vec![Message::new(Role::User, "again")];
    {
        let mut rec = RecordingBackend::create(ScriptedBackend::new(["one", "two"]), &path).unwrap();
        assert_eq!(rec.complete(&hello(), &params).unwrap(), "one");
        assert_eq!(rec.complete(&second, &params).unwrap(), "two");
    }
    let mut replay = ReplayBackend::from_path(&path).unwrap();
    assert_eq!(replay.complete(&hello(), &params).unwrap(), "one");
    assert!(matches!(replay.complete(&hello(), &params), Err(AgentIoError::ReplayMismatch(_))));
    assert_eq!(replay.complete(&second, &params).unwrap(), "two");
    assert!(matches!(replay.complete(&second, &params), Err(AgentIoError::ReplayMismatch(_))));
}

struct Seen {
    request_line: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves the given (status, body) replies in order, one per connection.
fn mock_server(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for (status, reply) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let (mut length, mut authorization) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Seen {
                request_line: request_line.trim_end().to_string(),
                authorization,
                body: serde_json::from_slice(&body).unwrap(),
            });
            let mut stream = stream;
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (base, rx)
}

fn live(base_url: String, retries: usize) -> LiveBackend {
    LiveBackend::new(LiveConfig {
        base_url,
        api_key: Some("sk-test".into()),
        backoff: vec![Duration::ZERO; retries],
        timeout: Duration::from_secs(10),
    })
}

#[test]
fn live_backend_posts_to_chat_completions_and_retries() {
    let ok = std::fs::read_to_string(common::fixtures().join("wire/response.json")).unwrap();
    let (base, seen) = mock_server(vec![(500, "{\"error\": \"busy\"}".into()), (200, ok)]);
    let mut backend = live(base, 3);
    let reply = backend.complete(&hello(), &BackendParams::default()).unwrap();
    assert_eq!(reply, "hello there");

    let first = seen.recv().unwrap();
    let second = seen.recv().unwrap();
    assert_eq!(first.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(first.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(first.body, second.body);
    assert_eq!(second.body, build_request_body(&hello(), &BackendParams::default()));
}

#[test]
fn live_backend_gives_up_after_retries() {
    let replies = (0..3).map(|_| (503, "{}".to_string())).collect();
    let (base, seen) = mock_server(replies);
    let mut backend = live(base, 2);
    let err = backend.complete(&hello(), &BackendParams::default()).unwrap_err();
    assert!(matches!(&err, AgentIoError::HttpFailure(m) if m.contains("503")), "{err}");
    assert_eq!(seen.try_iter().count(), 3);
}

#[test]
fn oversized_prompt_never_reaches_backend() {
    let (spy, log) = SpyBackend::new(ScriptedBackend::new(["unused"]));
    let params = BackendParams {
        max_tokens: 100,
        ..BackendParams::default()
    };
    let mut client = ModelClient::new(Box::new(spy), params, 200, 10);
    // 404 chars -> 101 tokens; 101 + 100 > 200
    let big = vec![Message::new(Role::User, "x".repeat(404))];
    let err = client.complete(&big).unwrap_err();
    assert_eq!(
        err,
        AgentIoError::ContextOverflow {
            estimate: 101,
            max_tokens: 100,
            limit: 200
        }
    );
    assert_eq!(client.calls(), 0);
    assert!(log.lock().unwrap().is_empty());
    // exactly at the limit is allowed
    let fits = vec![Message::new(Role::User, "x".repeat(400))];
    assert_eq!(client.complete(&fits).unwrap(), "unused");
    assert_eq!(log.lock().unwrap().len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn truncation_matches_oracle((messages, k) in conversation()) {
        let got = assemble_prompt(&messages, k);
        prop_assert_eq!(&got, &common::prompt::oracle(&messages, k));
        let pinned = messages.iter().filter(|m| m.pinned).count();
        prop_assert!(got.iter().take(pinned).all(|m| m.pinned));
        let opened = got.iter().skip(pinned).filter(|m| m.role == Role::User).count();
        prop_assert!(opened <= k + 1);
    }
}
