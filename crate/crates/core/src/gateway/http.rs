//! OpenAI-compatible HTTP client for chat completions and embeddings.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, GatewayError};
use crate::embedding::Embedder;

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "MEMTUNE_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL up to and including the version segment, e.g.
    /// `https://api.example.com/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        HttpConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            model: model.to_string(),
            timeout: Duration::from_secs(60),
            max_in_flight: super::DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

fn client(timeout: Duration) -> Result<Client, GatewayError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| GatewayError::Transport(e.to_string()))
}

fn post(
    client: &Client,
    config: &HttpConfig,
    path: &str,
    body: &Value,
) -> Result<Value, GatewayError> {
    let mut req = client
        .post(format!("{}/{path}", config.base_url))
        .json(body);
    if let Some(key) = &config.api_key {
        req = req.bearer_auth(key);
    }
    let resp = req
        .send()
        .map_err(|e| GatewayError::Transport(e.to_string()))?;
    let status = resp.status();
    let text = resp
        .text()
        .map_err(|e| GatewayError::Transport(e.to_string()))?;
    if status.is_success() {
        return serde_json::from_str(&text)
            .map_err(|e| GatewayError::Transport(format!("malformed response body: {e}")));
    }
    Err(classify(status, &text))
}

fn classify(status: StatusCode, body: &str) -> GatewayError {
    let parsed: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    let error = &parsed["error"];
    let code = error["code"].as_str().unwrap_or_default();
    let kind = error["type"].as_str().unwrap_or_default();
    let message = error["message"].as_str().unwrap_or(body).to_string();
    if code == "context_length_exceeded" || kind.contains("context_length") {
        GatewayError::ContextOverflow(message)
    } else if status == StatusCode::TOO_MANY_REQUESTS {
        GatewayError::RateLimited
    } else if status.is_server_error() || status == StatusCode::REQUEST_TIMEOUT {
        GatewayError::Transport(format!("HTTP {status}: {message}"))
    } else {
        GatewayError::Rejected(format!("HTTP {status}: {message}"))
    }
}

pub struct HttpBackend {
    client: Client,
    config: HttpConfig,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        Ok(HttpBackend {
            client: client(config.timeout)?,
            config,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let value = post(&self.client, &self.config, "chat/completions", &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Transport("response has no message content".into()))
    }
}

/// Dense embeddings from an OpenAI-compatible `/embeddings` endpoint.
/// Returned vectors are L2-normalized.
pub struct HttpEmbedder {
    client: Client,
    config: HttpConfig,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig, dim: usize) -> Result<Self, GatewayError> {
        Ok(HttpEmbedder {
            client: client(config.timeout)?,
            config,
            dim,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> String {
        self.config.model.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, String> {
        let body = json!({ "model": self.config.model, "input": texts });
        let value =
            post(&self.client, &self.config, "embeddings", &body).map_err(|e| e.to_string())?;
        let data = value["data"]
            .as_array()
            .ok_or("response has no data array")?;
        data.iter()
            .map(|item| {
                let mut v: Vec<f64> = item["embedding"]
                    .as_array()
                    .ok_or("item has no embedding")?
                    .iter()
                    .map(|x| x.as_f64().ok_or("non-numeric embedding value"))
                    .collect::<Result<_, _>>()?;
                if v.len() != self.dim {
                    return Err(format!("expected dim {}, got {}", self.dim, v.len()));
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                Ok(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classification() {
        let overflow = r#"{"error":{"message":"too long","type":"invalid_request_error","code":"context_length_exceeded"}}"#;
        assert!(matches!(
            classify(StatusCode::BAD_REQUEST, overflow),
            GatewayError::ContextOverflow(m) if m == "too long"
        ));
        assert_eq!(
            classify(StatusCode::TOO_MANY_REQUESTS, ""),
            GatewayError::RateLimited
        );
        assert!(matches!(
            classify(StatusCode::BAD_GATEWAY, "upstream"),
            GatewayError::Transport(_)
        ));
        assert!(matches!(
            classify(StatusCode::UNAUTHORIZED, "{}"),
            GatewayError::Rejected(_)
        ));
    }
}
