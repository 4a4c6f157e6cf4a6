use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use ahrs_core::llm_client::{
    read_transcript, record_session, replay_session, CallMeta, ChatClient, ChatOutcome, ChatRequest, ClientError,
    EndpointConfig, HttpChatClient, ResponseFormat, RetryPolicy, ScriptedChatClient,
};

const KEY: &str = "sk-test-7f3a9c-DO-NOT-LEAK";

struct Captured {
    head: String,
    body: Vec<u8>,
}

enum Reply {
    Status(u16, String),
    Stall(Duration),
}

fn completion(content: &str) -> String {
    serde_json::json!({
        "id": "x",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
    .to_string()
}

fn read_request(stream: &mut TcpStream) -> Captured {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut head = String::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        let end = line == "\r\n";
        head.push_str(&line);
        if end {
            break;
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    Captured { head, body }
}

/// Serves one scripted reply per connection, then stops.
fn serve(replies: Vec<Reply>) -> (String, mpsc::Receiver<Captured>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    let handle = thread::spawn(move || {
        for reply in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let cap = read_request(&mut stream);
            tx.send(cap).unwrap();
            match reply {
                Reply::Status(code, body) => {
                    let resp = format!(
                        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                }
                Reply::Stall(d) => thread::sleep(d),
            }
        }
    });
    (url, rx, handle)
}

fn endpoint(url: &str) -> EndpointConfig {
    EndpointConfig {
        base_url: url.to_string(),
        api_key: KEY.to_string(),
        model: "test-model".to_string(),
    }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        backoff: vec![Duration::from_millis(10), Duration::from_millis(20)],
    }
}

fn request(user: &str, tick: u64) -> ChatRequest {
    let mut r = ChatRequest::new("test-model", "system text", user).with_meta(CallMeta {
        tick,
        epoch: tick * 100,
        format: ResponseFormat::RuleChoice,
    });
    r.timeout = Duration::from_secs(5);
    r
}

#[test]
fn success_sends_bearer_and_single_turn_body() {
    let (url, rx, h) = serve(vec![Reply::Status(200, completion("I pick ~[4]~"))]);
    let mut client = HttpChatClient::with_retry(endpoint(&url), fast_retry());
    let out = client.chat(&request("hello", 1)).unwrap();
    assert_eq!(out, ChatOutcome::Success { content: "I pick ~[4]~".into() });
    let cap = rx.recv().unwrap();
    h.join().unwrap();
    assert!(cap.head.starts_with("POST /v1/chat/completions "), "{}", cap.head);
    assert!(cap.head.to_ascii_lowercase().contains(&format!("authorization: bearer {}", KEY.to_ascii_lowercase())));
    let body: serde_json::Value = serde_json::from_slice(&cap.body).unwrap();
    assert_eq!(body["model"], "test-model");
    let msgs = body["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 2);
    assert_eq!(msgs[0]["role"], "system");
    assert_eq!(msgs[1]["role"], "user");
    assert_eq!(msgs[1]["content"], "hello");
    assert_eq!(cap.body, request("hello", 1).body_bytes());
}

#[test]
fn rate_limit_retried_then_reported() {
    let replies = (0..3).map(|_| Reply::Status(429, "{\"error\":\"slow down\"}".into())).collect();
    let (url, rx, h) = serve(replies);
    let mut client = HttpChatClient::with_retry(endpoint(&url), fast_retry());
    let out = client.chat(&request("x", 1)).unwrap();
    h.join().unwrap();
    assert_eq!(rx.try_iter().count(), 3);
    match out {
        ChatOutcome::HttpError { status, .. } => assert_eq!(status, 429),
        other => panic!("expected 429, got {other:?}"),
    }
}

#[test]
fn server_error_recovers_on_retry() {
    let (url, rx, h) = serve(vec![Reply::Status(503, "{}".into()), Reply::Status(200, completion("~[2]~"))]);
    let mut client = HttpChatClient::with_retry(endpoint(&url), fast_retry());
    let out = client.chat(&request("x", 1)).unwrap();
    h.join().unwrap();
    assert_eq!(rx.try_iter().count(), 2);
    assert_eq!(out.content(), Some("~[2]~"));
}

#[test]
fn client_error_not_retried() {
    let (url, rx, h) = serve(vec![Reply::Status(400, "{\"error\":\"bad\"}".into())]);
    let mut client = HttpChatClient::with_retry(endpoint(&url), fast_retry());
    let out = client.chat(&request("x", 1)).unwrap();
    h.join().unwrap();
    assert_eq!(rx.try_iter().count(), 1);
    assert!(matches!(out, ChatOutcome::HttpError { status: 400, .. }));
}

#[test]
fn malformed_body_is_transport_error() {
    let (url, _rx, h) = serve((0..3).map(|_| Reply::Status(200, "{\"choices\":[]}".into())).collect());
    let mut client = HttpChatClient::with_retry(endpoint(&url), fast_retry());
    let out = client.chat(&request("x", 1)).unwrap();
    h.join().unwrap();
    assert!(matches!(out, ChatOutcome::TransportError { .. }), "{out:?}");
}

#[test]
fn unreachable_host_is_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut client = HttpChatClient::with_retry(endpoint(&format!("http://127.0.0.1:{port}/v1")), fast_retry());
    let start = Instant::now();
    let out = client.chat(&request("x", 1)).unwrap();
    assert!(matches!(out, ChatOutcome::TransportError { .. }), "{out:?}");
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn slow_endpoint_times_out() {
    let replies = (0..2).map(|_| Reply::Stall(Duration::from_millis(800))).collect();
    let (url, _rx, h) = serve(replies);
    let retry = RetryPolicy {
        backoff: vec![Duration::from_millis(10)],
    };
    let mut client = HttpChatClient::with_retry(endpoint(&url), retry);
    let mut req = request("x", 1);
    req.timeout = Duration::from_millis(150);
    let start = Instant::now();
    let out = client.chat(&req).unwrap();
    assert_eq!(out, ChatOutcome::Timeout);
    assert!(start.elapsed() < Duration::from_millis(700));
    h.join().unwrap();
}

#[test]
fn transcript_never_contains_key() {
    let (url, _rx, h) = serve(vec![
        Reply::Status(200, completion("~[3]~")),
        Reply::Status(400, "{\"error\":\"nope\"}".into()),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.jsonl");
    let mut client = record_session(HttpChatClient::with_retry(endpoint(&url), fast_retry()), &path).unwrap();
    client.chat(&request("first", 1)).unwrap();
    client.chat(&request("second", 2)).unwrap();
    h.join().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(!text.contains(KEY));
    assert!(!text.contains("7f3a9c"));
    let recs = read_transcript(&path).unwrap();
    assert_eq!(recs[0].parsed.as_deref(), Some("3"));
    assert!(!recs[0].failure);
    assert!(recs[1].failure);
    assert_eq!(recs[1].tick, 2);
    assert_eq!(recs[1].epoch, 200);
    assert_eq!(recs[0].prompt_hash, request("first", 1).prompt_hash());
}

#[test]
fn record_then_replay_is_identical() {
    let (url, _rx, h) = serve(vec![
        Reply::Status(200, completion("~[1]~")),
        Reply::Status(200, completion("no choice here")),
        Reply::Status(200, completion("~[8]~")),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let reqs: Vec<ChatRequest> = (1..=3).map(|i| request(&format!("prompt {i}"), i)).collect();
    let mut rec = record_session(HttpChatClient::with_retry(endpoint(&url), fast_retry()), &path).unwrap();
    let live: Vec<ChatOutcome> = reqs.iter().map(|r| rec.chat(r).unwrap()).collect();
    h.join().unwrap();

    let mut replay = replay_session(&path).unwrap();
    assert_eq!(replay.remaining(), 3);
    let again: Vec<ChatOutcome> = reqs.iter().map(|r| replay.chat(r).unwrap()).collect();
    assert_eq!(live, again);
    assert!(matches!(replay.chat(&reqs[0]), Err(ClientError::ReplayExhausted(3))));

    let mut replay = replay_session(&path).unwrap();
    replay.chat(&reqs[0]).unwrap();
    match replay.chat(&request("prompt 2 edited", 2)) {
        Err(ClientError::ReplayPromptDrift { index, stored, actual }) => {
            assert_eq!(index, 1);
            assert_ne!(stored, actual);
        }
        other => panic!("expected drift, got {other:?}"),
    }
}

#[test]
fn reopened_transcript_appends() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    {
        let mut rec = record_session(ScriptedChatClient::from_texts(&["~[2]~"]), &path).unwrap();
        rec.chat(&request("first", 1)).unwrap();
    }
    // a second session on the same file keeps what the first one flushed
    let mut rec = record_session(ScriptedChatClient::from_texts(&["~[5]~"]), &path).unwrap();
    rec.chat(&request("second", 2)).unwrap();
    drop(rec);
    let records = read_transcript(&path).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!((records[0].tick, records[1].tick), (1, 2));
    assert_eq!(records[1].response, ChatOutcome::Success { content: "~[5]~".into() });
}
