//! Line-delimited JSON streaming over HTTP.
//!
//! Request (`POST {base_url}{path}`, JSON body):
//!
//! ```text
//! {"model": "...", "context": "...", "max_tokens": 100, "stop": ["</think>"],
//!  "temperature": 0.0, "top_p": 1.0, "seed": 0}
//! ```
//!
//! Response: one JSON object per line. Token events are `{"token": "<text>"}`;
//! the last line is `{"stop": "cap_reached" | "stop_marker" | "end_of_sequence"
//! | "error", "message": "..."}`. A stream that ends without a stop line is a
//! dropped connection.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{Backend, ContinuationRequest, ContinuationResponse, StopReason};
use crate::token::{Token, TokenSeq};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after a connection-level failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_path() -> String {
    "/v1/continue".to_string()
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            path: default_path(),
            model: String::new(),
            auth_env: None,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
        }
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    #[serde(default)]
    pub model: String,
    pub context: String,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

/// One response line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireEvent {
    Token {
        token: String,
    },
    Stop {
        stop: StopReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Retryable(String),
    Fatal(String),
}

pub struct HttpBackend {
    config: EndpointConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { config, agent }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn attempt(&self, request: &ContinuationRequest) -> Result<ContinuationResponse, Failure> {
        let body = WireRequest {
            model: self.config.model.clone(),
            context: request.context.clone(),
            max_tokens: request.max_tokens,
            stop: request.stop_markers.clone(),
            temperature: request.sampling.temperature,
            top_p: request.sampling.top_p,
            seed: request.sampling.seed,
        };
        let mut call = self.agent.post(self.config.url());
        if let Some(token) = self.config.auth_env.as_deref().and_then(|v| std::env::var(v).ok()) {
            call = call.header("Authorization", format!("Bearer {token}"));
        }
        let response = call.send_json(&body).map_err(classify)?;
        let status = response.status().as_u16();
        if status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Failure::Fatal(format!("HTTP {status}")));
        }

        let reader = BufReader::new(response.into_body().into_reader());
        let mut tokens = TokenSeq::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Failure::Retryable(format!("stream read failed: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let event: WireEvent = serde_json::from_str(&line)
                .map_err(|e| Failure::Fatal(format!("malformed event line {line:?}: {e}")))?;
            match event {
                WireEvent::Token { token } => {
                    if request.stop_markers.iter().any(|m| token.trim() == m) {
                        return Ok(ContinuationResponse::new(tokens, StopReason::StopMarker));
                    }
                    if tokens.len() == request.max_tokens {
                        // Remote overran the cap; stop reading and close the stream.
                        return Ok(ContinuationResponse::new(tokens, StopReason::CapReached));
                    }
                    tokens.push(Token::sampled(token));
                }
                WireEvent::Stop { stop, message } => {
                    if stop == StopReason::Error {
                        return Err(Failure::Fatal(format!(
                            "remote error: {}",
                            message.unwrap_or_default()
                        )));
                    }
                    // A remote cap below ours is still the remote ending the stream.
                    let stop = if stop == StopReason::CapReached && tokens.len() < request.max_tokens {
                        StopReason::EndOfSequence
                    } else {
                        stop
                    };
                    return Ok(ContinuationResponse::new(tokens, stop));
                }
            }
        }
        Err(Failure::Retryable(format!(
            "stream ended without a stop event after {} tokens",
            tokens.len()
        )))
    }
}

fn classify(err: ureq::Error) -> Failure {
    match err {
        ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed => {
            Failure::Retryable(err.to_string())
        }
        ureq::Error::StatusCode(code) if code >= 500 => Failure::Retryable(format!("HTTP {code}")),
        other => Failure::Fatal(other.to_string()),
    }
}

impl Backend for HttpBackend {
    /// Streams one continuation. Connection failures, dropped streams and 5xx
    /// responses are retried up to `retries` times; partial tokens from a
    /// failed attempt are discarded.
    fn continue_from(&self, request: &ContinuationRequest) -> ContinuationResponse {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(request) {
                Ok(resp) => return resp,
                Err(Failure::Fatal(msg)) => return ContinuationResponse::error(msg),
                Err(Failure::Retryable(msg)) => {
                    debug!("attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                }
            }
        }
        warn!("giving up after {attempts} attempts: {last}");
        ContinuationResponse::error(format!("retries exhausted after {attempts} attempts: {last}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_events_parse() {
        let t: WireEvent = serde_json::from_str(r#"{"token":" hi"}"#).unwrap();
        assert_eq!(t, WireEvent::Token { token: " hi".into() });
        let s: WireEvent = serde_json::from_str(r#"{"stop":"end_of_sequence"}"#).unwrap();
        assert_eq!(s, WireEvent::Stop { stop: StopReason::EndOfSequence, message: None });
        assert!(serde_json::from_str::<WireEvent>(r#"{"stop":"sideways"}"#).is_err());
        assert!(serde_json::from_str::<WireEvent>("garbage").is_err());
    }

    #[test]
    fn endpoint_url_joins_cleanly() {
        let c = EndpointConfig::new("http://localhost:8080/");
        assert_eq!(c.url(), "http://localhost:8080/v1/continue");
    }

    #[test]
    fn unreachable_endpoint_reports_error() {
        let mut c = EndpointConfig::new("http://127.0.0.1:1");
        c.retries = 1;
        c.timeout_ms = 500;
        let backend = HttpBackend::new(c);
        let resp = backend.continue_from(&ContinuationRequest {
            context: "x".into(),
            max_tokens: 3,
            stop_markers: vec![],
            sampling: Default::default(),
        });
        assert_eq!(resp.stop_reason, StopReason::Error);
        assert!(resp.tokens.is_empty());
        assert!(resp.diagnostic.unwrap().contains("2 attempts"));
    }
}
