use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use memtune::gateway::{
    ChatRequest, Gateway, GatewayError, HttpConfig, RecordingSleeper, RetryPolicy,
};

struct Captured {
    request_line: String,
    headers: Vec<String>,
    body: String,
}

/// Serves one canned (status, body) per connection, in order, and records
/// what it received.
fn serve(
    replies: Vec<(u16, String)>,
) -> (String, Arc<Mutex<Vec<Captured>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut headers = Vec::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                request_line: request_line.trim_end().to_string(),
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let reason = match status {
                200 => "OK",
                400 => "Bad Request",
                429 => "Too Many Requests",
                _ => "Error",
            };
            write!(
                stream,
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen, handle)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
        .to_string()
}

fn gateway(base_url: &str, sleeper: Arc<RecordingSleeper>) -> Gateway {
    let mut cfg = HttpConfig::new(base_url, "test-model");
    cfg.api_key = Some("sk-test".into());
    cfg.timeout = Duration::from_secs(5);
    Gateway::http(cfg)
        .unwrap()
        .with_sleeper(sleeper)
        .with_retry(RetryPolicy {
            max_retries: 3,
            base_wait: Duration::from_millis(100),
        })
}

#[test]
fn rate_limits_are_retried_with_doubling_waits() {
    let limited = r#"{"error":{"message":"slow down","type":"rate_limit"}}"#.to_string();
    let (url, seen, server) = serve(vec![
        (429, limited.clone()),
        (429, limited),
        (200, completion("{\"answer\": \"2019\"}")),
    ]);
    let sleeper = Arc::new(RecordingSleeper::default());
    let gw = gateway(&url, Arc::clone(&sleeper));
    let resp = gw.chat(&ChatRequest::new(Some("sys"), "When?")).unwrap();
    server.join().unwrap();

    assert_eq!(resp.text, "{\"answer\": \"2019\"}");
    assert_eq!(resp.retries, 2);
    assert_eq!(
        sleeper.waits(),
        [Duration::from_millis(100), Duration::from_millis(200)]
    );

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].request_line, "POST /v1/chat/completions HTTP/1.1");
    assert!(seen[0]
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
    let body: serde_json::Value = serde_json::from_str(&seen[2].body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "When?");

    let transcript = gw.transcript();
    assert_eq!(transcript.len(), 1);
    assert_eq!(transcript[0].retries, 2);
}

#[test]
fn context_overflow_is_not_retried() {
    let body = r#"{"error":{"message":"too long","code":"context_length_exceeded"}}"#.to_string();
    let (url, seen, server) = serve(vec![(400, body)]);
    let sleeper = Arc::new(RecordingSleeper::default());
    let gw = gateway(&url, Arc::clone(&sleeper));
    let err = gw.chat(&ChatRequest::new(None, "x")).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, GatewayError::ContextOverflow(_)), "{err:?}");
    assert!(sleeper.waits().is_empty());
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_are_bounded() {
    let limited = r#"{"error":{"message":"slow down"}}"#.to_string();
    let (url, _seen, server) = serve(vec![(429, limited.clone()); 4]);
    let sleeper = Arc::new(RecordingSleeper::default());
    let gw = gateway(&url, Arc::clone(&sleeper));
    let err = gw.chat(&ChatRequest::new(None, "x")).unwrap_err();
    server.join().unwrap();
    assert!(
        matches!(err, GatewayError::Exhausted { retries: 3, .. }),
        "{err:?}"
    );
    assert_eq!(sleeper.waits().len(), 3);
}
