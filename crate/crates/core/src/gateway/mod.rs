//! The only place that talks to a language model.
//!
//! A [`Gateway`] wraps one [`ChatBackend`] (the OpenAI-compatible HTTP client
//! or the scripted [`StubBackend`]) with retry/backoff, an in-flight request
//! cap and a JSONL transcript of every exchange.

mod http;
mod json;
mod stub;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpConfig, HttpEmbedder, API_KEY_ENV};
pub use json::parse_json_payload;
pub use stub::{Reply, StubBackend, StubRule, StubScript};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("rate limited")]
    RateLimited,
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("gave up after {retries} retries: {last}")]
    Exhausted { retries: u32, last: String },
    #[error("stub: {0}")]
    Stub(String),
    #[error("no JSON value found in response: {0:?}")]
    Parse(String),
}

impl GatewayError {
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::RateLimited | GatewayError::Transport(_))
    }

    /// Short machine-readable kind, also used by stub scripts.
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::RateLimited => "rate_limited",
            GatewayError::ContextOverflow(_) => "context_overflow",
            GatewayError::Transport(_) => "transport",
            GatewayError::Rejected(_) => "rejected",
            GatewayError::Exhausted { .. } => "exhausted",
            GatewayError::Stub(_) => "stub",
            GatewayError::Parse(_) => "parse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(system: Option<&str>, user: impl Into<String>) -> Self {
        let mut messages = Vec::new();
        if let Some(system) = system {
            messages.push(Message {
                role: Role::System,
                content: system.to_string(),
            });
        }
        messages.push(Message {
            role: Role::User,
            content: user.into(),
        });
        ChatRequest {
            messages,
            model: String::new(),
            temperature: 0.0,
            max_tokens: 2048,
        }
    }

    /// Appends an assistant turn and a follow-up user turn.
    pub fn followed_by(mut self, assistant: &str, user: impl Into<String>) -> Self {
        self.messages.push(Message {
            role: Role::Assistant,
            content: assistant.to_string(),
        });
        self.messages.push(Message {
            role: Role::User,
            content: user.into(),
        });
        self
    }

    /// All message contents joined by newlines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub retries: u32,
    pub latency_ms: u64,
}

/// A single-attempt chat transport. Retries live in [`Gateway`].
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// Whether wall-clock latency should be recorded in the transcript.
    fn reports_latency(&self) -> bool {
        true
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested waits without sleeping.
#[derive(Default)]
pub struct RecordingSleeper {
    waits: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn waits(&self) -> Vec<Duration> {
        self.waits.lock().expect("sleeper lock").clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.waits.lock().expect("sleeper lock").push(duration);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Wait before the first retry; doubles on each further retry.
    pub base_wait: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_wait: Duration::from_secs(1),
        }
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: ChatRequest,
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
    pub retries: u32,
}

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    sleeper: Arc<dyn Sleeper>,
    limiter: Limiter,
    retry: RetryPolicy,
    model: String,
    transcript: Mutex<Vec<TranscriptEntry>>,
    sink: Mutex<Option<BufWriter<File>>>,
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, sleeper: Arc<dyn Sleeper>) -> Self {
        Gateway {
            backend,
            sleeper,
            limiter: Limiter::new(DEFAULT_MAX_IN_FLIGHT),
            retry: RetryPolicy::default(),
            model: String::new(),
            transcript: Mutex::new(Vec::new()),
            sink: Mutex::new(None),
        }
    }

    /// Stub-backed gateway whose retry waits are recorded, not slept.
    pub fn stub(script: StubScript) -> Self {
        Gateway::new(
            Box::new(StubBackend::new(script)),
            Arc::new(RecordingSleeper::default()),
        )
        .with_model("stub")
    }

    pub fn http(config: HttpConfig) -> Result<Self, GatewayError> {
        let model = config.model.clone();
        let max_in_flight = config.max_in_flight;
        Ok(
            Gateway::new(Box::new(HttpBackend::new(config)?), Arc::new(ThreadSleeper))
                .with_model(&model)
                .with_max_in_flight(max_in_flight),
        )
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_model(mut self, model: &str) -> Self {
        self.model = model.to_string();
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter = Limiter::new(max);
        self
    }

    /// Streams every subsequent exchange to `path` as JSON lines.
    pub fn with_transcript_file(self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        *self.sink.lock().expect("sink lock") = Some(BufWriter::new(file));
        Ok(self)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("transcript lock").clone()
    }

    /// Sends `request`, retrying rate limits and transport failures with
    /// exponential backoff. Context overflow is returned immediately.
    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.chat_with_retry(request, self.retry)
    }

    /// [`chat`](Self::chat) under a caller-chosen retry policy.
    pub fn chat_with_retry(
        &self,
        request: &ChatRequest,
        policy: RetryPolicy,
    ) -> Result<ChatResponse, GatewayError> {
        let mut request = request.clone();
        if request.model.is_empty() {
            request.model = self.model.clone();
        }
        if !request.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::Rejected("request has no user message".into()));
        }
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut retries = 0;
        let result = loop {
            match self.backend.send(&request) {
                Ok(text) => break Ok(text),
                Err(e) if e.retryable() => {
                    if retries >= policy.max_retries {
                        break Err(GatewayError::Exhausted {
                            retries,
                            last: e.to_string(),
                        });
                    }
                    self.sleeper.sleep(policy.base_wait * 2u32.pow(retries));
                    retries += 1;
                }
                Err(e) => break Err(e),
            }
        };
        let latency_ms = if self.backend.reports_latency() {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.record(TranscriptEntry {
            request,
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(|e| e.to_string()),
            latency_ms,
            retries,
        });
        result.map(|text| ChatResponse {
            text,
            retries,
            latency_ms,
        })
    }

    fn record(&self, entry: TranscriptEntry) {
        if let Some(sink) = self.sink.lock().expect("sink lock").as_mut() {
            let line = serde_json::to_string(&entry).expect("transcript entries serialize");
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                log::warn!("transcript write failed: {e}");
            }
        }
        self.transcript.lock().expect("transcript lock").push(entry);
    }
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptEntry>> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        failures: Vec<GatewayError>,
        calls: AtomicUsize,
    }

    impl ChatBackend for Flaky {
        fn send(&self, _: &ChatRequest) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            match self.failures.get(n) {
                Some(e) => Err(e.clone()),
                None => Ok("ok".into()),
            }
        }
    }

    fn gateway(failures: Vec<GatewayError>) -> (Gateway, Arc<RecordingSleeper>) {
        let sleeper = Arc::new(RecordingSleeper::default());
        let backend = Flaky {
            failures,
            calls: AtomicUsize::new(0),
        };
        (Gateway::new(Box::new(backend), sleeper.clone()), sleeper)
    }

    #[test]
    fn retries_with_doubling_waits() {
        let (gw, sleeper) = gateway(vec![
            GatewayError::RateLimited,
            GatewayError::Transport("timeout".into()),
        ]);
        let r = gw.chat(&ChatRequest::new(None, "hi")).unwrap();
        assert_eq!(r.retries, 2);
        assert_eq!(
            sleeper.waits(),
            vec![Duration::from_secs(1), Duration::from_secs(2)]
        );
        assert_eq!(gw.transcript()[0].retries, 2);
    }

    #[test]
    fn exhausts_after_max_retries() {
        let (gw, sleeper) = gateway(vec![GatewayError::RateLimited; 10]);
        let err = gw.chat(&ChatRequest::new(None, "hi")).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { retries: 3, .. }));
        assert_eq!(sleeper.waits().len(), 3);
    }

    #[test]
    fn context_overflow_is_not_retried() {
        let (gw, sleeper) = gateway(vec![GatewayError::ContextOverflow("too long".into())]);
        let err = gw.chat(&ChatRequest::new(None, "hi")).unwrap_err();
        assert_eq!(err.kind(), "context_overflow");
        assert!(sleeper.waits().is_empty());
    }

    #[test]
    fn requests_need_a_user_message() {
        let (gw, _) = gateway(vec![]);
        let mut req = ChatRequest::new(Some("sys"), "u");
        req.messages.pop();
        assert!(matches!(gw.chat(&req), Err(GatewayError::Rejected(_))));
    }

    #[test]
    fn limiter_caps_in_flight() {
        struct Slow {
            current: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn send(&self, _: &ChatRequest) -> Result<String, GatewayError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok("x".into())
            }
        }
        let backend = Arc::new(Slow {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        struct Shared(Arc<Slow>);
        impl ChatBackend for Shared {
            fn send(&self, r: &ChatRequest) -> Result<String, GatewayError> {
                self.0.send(r)
            }
        }
        let gw = Gateway::new(Box::new(Shared(backend.clone())), Arc::new(ThreadSleeper))
            .with_max_in_flight(2);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.chat(&ChatRequest::new(None, "hi")).unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.transcript().len(), 8);
    }
}
