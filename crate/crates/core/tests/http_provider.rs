//! Chat-completion provider against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;

use schemalink::backend::{BackendError, ChatCompletionProvider, LlmClient, RetryPolicy};

#[derive(Debug, Clone)]
struct Seen {
    request_line: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
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
                request_line: request_line.trim_end().to_string(),
                authorization,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn ok_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 4}
    })
    .to_string()
}

fn client(url: &str, retries: u32) -> LlmClient {
    let provider = ChatCompletionProvider::new("local", url, "test-model", "sk-test".into(), Duration::from_secs(5));
    LlmClient::new(Arc::new(provider))
        .with_retry(RetryPolicy { max_retries: retries, base_delay_ms: 1 })
        .with_sampling(0.3, 256)
}

#[test]
fn request_wire_format_and_usage() {
    let (url, seen, server) = serve(vec![(200, ok_body(r#"{"SQL": "SELECT 1"}"#))]);
    let client = client(&url, 0);
    let mut session = client.session("1297");
    let c = session.complete("sqlgen_full", "write a query").unwrap();
    server.join().unwrap();

    assert_eq!(c.text, r#"{"SQL": "SELECT 1"}"#);
    assert_eq!((c.prompt_tokens, c.completion_tokens), (Some(11), Some(4)));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    let req = &seen[0];
    assert_eq!(req.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(req.authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["messages"][0]["role"], "user");
    assert_eq!(req.body["messages"][0]["content"], "write a query");
    assert_eq!(req.body["temperature"], 0.3);
    assert_eq!(req.body["max_tokens"], 256);
    assert_eq!(req.body["n"], 1);
    assert_eq!(session.telemetry().calls("sqlgen_full"), 1);
}

#[test]
fn server_errors_and_rate_limits_are_retried() {
    let (url, seen, server) = serve(vec![
        (500, "{}".into()),
        (429, r#"{"error": "slow down"}"#.into()),
        (200, ok_body("done")),
    ]);
    let client = client(&url, 3);
    let c = client.session("q").complete("keywords", "hello").unwrap();
    server.join().unwrap();
    assert_eq!(c.text, "done");
    assert_eq!(seen.lock().unwrap().len(), 3);
    let stats = client.stats();
    assert_eq!((stats.retries, stats.provider_calls, stats.failures), (2, 1, 0));
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, server) = serve(vec![(401, r#"{"error": "bad key"}"#.into())]);
    let client = client(&url, 3);
    let err = client.session("q").complete("keywords", "hello").unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, BackendError::Provider { status: 401, ref message } if message.contains("bad key")), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert_eq!(client.stats().retries, 0);
}

#[test]
fn malformed_reply_is_a_transport_error() {
    let (url, _seen, server) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let err = client(&url, 0).session("q").complete("decompose", "hi").unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
}
