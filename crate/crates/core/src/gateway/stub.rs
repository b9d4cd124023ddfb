//! Deterministic scripted chat backend.
//!
//! A script is an ordered list of rules. The first rule whose matcher fits
//! the request answers it with its next response; once a rule's responses
//! run out the last one repeats. Script files are JSON:
//!
//! ```json
//! {"rules": [
//!   {"match": "Split this question", "responses": [["sub one", "sub two"]]},
//!   {"match": "Candidate answer", "role": "user", "fail_n_times": 2,
//!    "responses": ["{\"answer\": \"2019\"}", {"error": "rate_limited"}]}
//! ]}
//! ```
//!
//! A string response is returned verbatim, `{"error": kind}` raises that
//! error kind, and any other JSON value is returned as compact JSON text.

use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use super::{ChatBackend, ChatRequest, GatewayError, Role, TranscriptEntry};

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Text(String),
    Error(String),
}

impl Reply {
    pub fn json(value: Value) -> Self {
        Reply::Text(value.to_string())
    }

    fn to_result(&self) -> Result<String, GatewayError> {
        match self {
            Reply::Text(t) => Ok(t.clone()),
            Reply::Error(kind) => Err(error_of_kind(kind)),
        }
    }
}

fn error_of_kind(kind: &str) -> GatewayError {
    match kind {
        "rate_limited" => GatewayError::RateLimited,
        "context_overflow" => GatewayError::ContextOverflow("scripted".into()),
        "transport" => GatewayError::Transport("scripted".into()),
        "rejected" => GatewayError::Rejected("scripted".into()),
        other => GatewayError::Stub(format!("scripted error `{other}`")),
    }
}

impl Serialize for Reply {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Reply::Text(t) => s.serialize_str(t),
            Reply::Error(kind) => serde_json::json!({ "error": kind }).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Reply {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        Ok(match value {
            Value::String(s) => Reply::Text(s),
            Value::Object(ref map) if map.len() == 1 && map.contains_key("error") => {
                match &map["error"] {
                    Value::String(kind) => Reply::Error(kind.clone()),
                    _ => return Err(serde::de::Error::custom("`error` must be a string")),
                }
            }
            other => Reply::Text(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubRule {
    /// Substring looked for in the request text.
    #[serde(rename = "match", default)]
    pub matcher: String,
    /// Restrict matching to messages with this role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    /// Require the whole request text to equal `matcher`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exact: bool,
    pub responses: Vec<Reply>,
    /// The first `n` matches fail with a transport error.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_n_times: u32,
    /// Every match fails with context overflow.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub context_overflow: bool,
    /// Matches whose request text is longer than this overflow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit_chars: Option<usize>,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl StubRule {
    pub fn new(matcher: &str, responses: Vec<Reply>) -> Self {
        StubRule {
            matcher: matcher.to_string(),
            role: None,
            exact: false,
            responses,
            fail_n_times: 0,
            context_overflow: false,
            context_limit_chars: None,
        }
    }

    pub fn text(matcher: &str, responses: &[&str]) -> Self {
        StubRule::new(
            matcher,
            responses
                .iter()
                .map(|r| Reply::Text(r.to_string()))
                .collect(),
        )
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        let haystack = match self.role {
            None => request.text(),
            Some(role) => request
                .messages
                .iter()
                .filter(|m| m.role == role)
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
        };
        if self.exact {
            haystack == self.matcher
        } else {
            haystack.contains(&self.matcher)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubScript {
    pub rules: Vec<StubRule>,
}

impl StubScript {
    pub fn new(rules: Vec<StubRule>) -> Self {
        StubScript { rules }
    }

    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(raw)
    }

    /// A script that answers every request in a transcript with the response
    /// that was recorded for it, in order.
    pub fn from_transcript(entries: &[TranscriptEntry]) -> Self {
        let mut rules: Vec<StubRule> = Vec::new();
        for entry in entries {
            let reply = match (&entry.response, &entry.error) {
                (Some(text), _) => Reply::Text(text.clone()),
                (None, Some(err)) => Reply::Error(transcript_error_kind(err).to_string()),
                (None, None) => continue,
            };
            let text = entry.request.text();
            match rules.iter_mut().find(|r| r.matcher == text) {
                Some(rule) => rule.responses.push(reply),
                None => {
                    let mut rule = StubRule::new(&text, vec![reply]);
                    rule.exact = true;
                    rules.push(rule);
                }
            }
        }
        StubScript { rules }
    }
}

fn transcript_error_kind(message: &str) -> &'static str {
    if message.starts_with("context overflow") {
        "context_overflow"
    } else if message.starts_with("rate limited") {
        "rate_limited"
    } else if message.starts_with("request rejected") {
        "rejected"
    } else {
        "transport"
    }
}

struct RuleState {
    matched: u32,
    consumed: usize,
}

pub struct StubBackend {
    script: StubScript,
    state: Mutex<Vec<RuleState>>,
}

impl StubBackend {
    pub fn new(script: StubScript) -> Self {
        let state = script
            .rules
            .iter()
            .map(|_| RuleState {
                matched: 0,
                consumed: 0,
            })
            .collect();
        StubBackend {
            script,
            state: Mutex::new(state),
        }
    }

    /// How many scripted responses rule `index` has handed out.
    pub fn consumed(&self, index: usize) -> usize {
        self.state.lock().expect("stub lock")[index].consumed
    }
}

impl ChatBackend for StubBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let (index, rule) = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.matches(request))
            .ok_or_else(|| {
                let text = request.text();
                let preview: String = text.chars().take(120).collect();
                GatewayError::Stub(format!("no rule matches request starting {preview:?}"))
            })?;
        let mut state = self.state.lock().expect("stub lock");
        let st = &mut state[index];
        st.matched += 1;
        if rule.context_overflow {
            return Err(GatewayError::ContextOverflow("scripted".into()));
        }
        if let Some(limit) = rule.context_limit_chars {
            let len = request.text().chars().count();
            if len > limit {
                return Err(GatewayError::ContextOverflow(format!(
                    "{len} chars exceeds {limit}"
                )));
            }
        }
        if st.matched <= rule.fail_n_times {
            return Err(GatewayError::Transport(format!(
                "scripted failure {} of {}",
                st.matched, rule.fail_n_times
            )));
        }
        let reply = rule
            .responses
            .get(st.consumed)
            .or_else(|| rule.responses.last())
            .ok_or_else(|| GatewayError::Stub(format!("rule {index} has no responses")))?;
        st.consumed = (st.consumed + 1).min(rule.responses.len());
        reply.to_result()
    }

    fn reports_latency(&self) -> bool {
        false
    }
}
