//! Chat and embedding clients against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use docsynth::demo_store::{build_index, Embedder, EmbeddingMode, HttpEmbedder};
use docsynth::gateway::{ChatModel, Gateway, GatewayError, GenerationParams, HttpChatClient, ReplayCache};
use docsynth::model::AnnotationRecord;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one scripted (status, body) reply per connection, in order.
struct StubServer {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl StubServer {
    fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
                let mut length = 0;
                let mut authorization = None;
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
                let mut raw = vec![0; length];
                reader.read_exact(&mut raw).unwrap();
                log.lock().unwrap().push(Seen {
                    path,
                    authorization,
                    body: serde_json::from_slice(&raw).unwrap_or(Value::Null),
                });
                let mut stream = reader.into_inner();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        StubServer { url, seen }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn chat_reply(content: &str) -> (u16, String) {
    (200, json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
}

#[test]
fn chat_request_shape() {
    let server = StubServer::start(vec![chat_reply("hello")]);
    let client = HttpChatClient::new(format!("{}/v1/", server.url), Some("secret".into())).unwrap();
    let mut params = GenerationParams::new("test-model", 0.2);
    params.max_tokens = Some(64);
    assert_eq!(client.complete("Say hi", &params).unwrap(), "hello");
    let seen = server.seen();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(
        seen[0].body,
        json!({
            "model": "test-model",
            "messages": [{"role": "user", "content": "Say hi"}],
            "temperature": 0.2,
            "max_tokens": 64
        })
    );
}

#[test]
fn server_errors_are_retried() {
    let server = StubServer::start(vec![(503, "busy".into()), (429, "slow down".into()), chat_reply("ok")]);
    let client = HttpChatClient::new(&server.url, None).unwrap().with_backoff(Duration::from_millis(1));
    assert_eq!(client.complete("p", &GenerationParams::new("m", 0.0)).unwrap(), "ok");
    assert_eq!(server.seen().len(), 3);
    assert!(server.seen()[0].authorization.is_none());
}

#[test]
fn client_errors_are_fatal() {
    let server = StubServer::start(vec![(400, "bad request".into()), chat_reply("never")]);
    let client = HttpChatClient::new(&server.url, None).unwrap().with_backoff(Duration::from_millis(1));
    match client.complete("p", &GenerationParams::new("m", 0.0)) {
        Err(GatewayError::Endpoint { status, body }) => assert_eq!((status, body.as_str()), (400, "bad request")),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn retries_give_up() {
    let server = StubServer::start(vec![(500, "a".into()), (500, "b".into()), (500, "c".into()), (500, "d".into())]);
    let client = HttpChatClient::new(&server.url, None).unwrap().with_backoff(Duration::from_millis(1));
    assert!(matches!(
        client.complete("p", &GenerationParams::new("m", 0.0)),
        Err(GatewayError::Endpoint { status: 500, .. })
    ));
    assert_eq!(server.seen().len(), 4);
}

#[test]
fn malformed_body_is_reported() {
    let server = StubServer::start(vec![(200, "{\"choices\": []}".into())]);
    let client = HttpChatClient::new(&server.url, None).unwrap();
    assert!(matches!(
        client.complete("p", &GenerationParams::new("m", 0.0)),
        Err(GatewayError::MalformedResponse(_))
    ));
}

#[test]
fn record_then_replay_without_network() {
    let server = StubServer::start(vec![chat_reply("first answer")]);
    let dir = tempfile::tempdir().unwrap();
    let params = GenerationParams::new("m", 0.0);
    let recorder = Gateway::record(
        Box::new(HttpChatClient::new(&server.url, None).unwrap()),
        ReplayCache::open(dir.path()).unwrap(),
    );
    assert_eq!(recorder.complete("question", &params).unwrap(), "first answer");

    // The server has no replies left; replay must not touch it.
    let replay = Gateway::replay(ReplayCache::open(dir.path()).unwrap());
    for _ in 0..3 {
        assert_eq!(replay.complete("question", &params).unwrap(), "first answer");
    }
    assert!(matches!(
        replay.complete("question", &params.with_temperature(0.2)),
        Err(GatewayError::CacheMiss(_))
    ));
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn provider_embeddings() {
    let vector = |v: [f64; 3]| (200, json!({"data": [{"embedding": v}]}).to_string());
    let server = StubServer::start(vec![vector([1.0, 0.0, 0.0]), vector([0.0, 2.0, 0.0]), (500, "down".into())]);
    let embedder = HttpEmbedder::new(&server.url, "embed-model", Some("k".into())).unwrap();
    assert_eq!(embedder.mode(), EmbeddingMode::Provider);

    let records: Vec<AnnotationRecord> = ["First demo text.", "Second demo text."]
        .iter()
        .enumerate()
        .map(|(i, t)| AnnotationRecord::from_parts(format!("d{i}"), *t, *t, vec![], vec![]).unwrap())
        .collect();
    let index = build_index(&records, &embedder, 100, 1).unwrap();
    assert_eq!(index.mode, EmbeddingMode::Provider);
    assert_eq!(index.dimension, 3);
    assert!(index.vocabulary.is_empty());
    assert!(embedder.embed("third").is_err());

    let seen = server.seen();
    assert_eq!(seen[0].path, "/embeddings");
    assert_eq!(seen[0].body, json!({"model": "embed-model", "input": "First demo text."}));
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer k"));
}
