//! Token-generation backends.
//!
//! The injector treats a backend as a continuation oracle: given the full
//! context so far and a token cap, it returns up to `max_tokens` tokens and
//! a stop reason. Realizations:
//!
//! - [`ScriptedBackend`]: deterministic filler with a scripted stop point.
//! - [`BudgetPolicy`]: reads control markers and stops at a fraction of the
//!   inferred budget, standing in for a trained budget-following model.
//! - [`HttpBackend`]: line-delimited JSON streaming over HTTP.
//!
//! [`stub::StubServer`] serves any backend over the HTTP protocol for tests.

mod http;
mod policy;
mod scripted;
pub mod stub;

use serde::{Deserialize, Serialize};

use crate::token::TokenSeq;

pub use http::{EndpointConfig, HttpBackend, WireEvent, WireRequest};
pub use policy::BudgetPolicy;
pub use scripted::ScriptedBackend;

/// Opens the think phase in the context sent to a backend.
pub const THINK_OPEN: &str = "<think>";
/// Closes the think phase.
pub const THINK_CLOSE: &str = "</think>";
/// Appended after forced truncation to request the final answer.
pub const FINAL_ANSWER_TAG: &str = "</think>**Final Answer**";

/// Sampling parameters forwarded to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            seed: 0,
        }
    }
}

impl SamplingParams {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(crate::Error::invalid("temperature must be >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(crate::Error::invalid("top_p must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationRequest {
    /// Prompt, think opener, emitted tokens and injected markers, rendered.
    pub context: String,
    pub max_tokens: usize,
    pub stop_markers: Vec<String>,
    pub sampling: SamplingParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    CapReached,
    StopMarker,
    EndOfSequence,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationResponse {
    pub tokens: TokenSeq,
    pub stop_reason: StopReason,
    /// Set when `stop_reason` is [`StopReason::Error`].
    pub diagnostic: Option<String>,
}

impl ContinuationResponse {
    pub fn new(tokens: TokenSeq, stop_reason: StopReason) -> Self {
        ContinuationResponse {
            tokens,
            stop_reason,
            diagnostic: None,
        }
    }

    pub fn error(diagnostic: impl Into<String>) -> Self {
        ContinuationResponse {
            tokens: TokenSeq::new(),
            stop_reason: StopReason::Error,
            diagnostic: Some(diagnostic.into()),
        }
    }

    /// Natural stop: a stop marker or end of sequence.
    pub fn is_natural_stop(&self) -> bool {
        matches!(self.stop_reason, StopReason::StopMarker | StopReason::EndOfSequence)
    }
}

/// A continuation oracle. Implementations must return at most
/// `request.max_tokens` tokens.
pub trait Backend: Send + Sync {
    fn continue_from(&self, request: &ContinuationRequest) -> ContinuationResponse;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn continue_from(&self, request: &ContinuationRequest) -> ContinuationResponse {
        (**self).continue_from(request)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn continue_from(&self, request: &ContinuationRequest) -> ContinuationResponse {
        (**self).continue_from(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn continue_from(&self, request: &ContinuationRequest) -> ContinuationResponse {
        (**self).continue_from(request)
    }
}

/// Where a context currently is, as seen by a local backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase<'a> {
    /// Text before the think opener, and the think text so far.
    Think { prompt: &'a str, think: &'a str },
    /// Answer text emitted after the think phase closed.
    Answer { answer: &'a str },
}

pub(crate) fn split_context(context: &str) -> Phase<'_> {
    if let Some(close) = context.rfind(THINK_CLOSE) {
        let rest = &context[close..];
        let answer = rest
            .strip_prefix(FINAL_ANSWER_TAG)
            .or_else(|| rest.strip_prefix(THINK_CLOSE))
            .unwrap_or(rest);
        return Phase::Answer { answer };
    }
    match context.rfind(THINK_OPEN) {
        Some(open) => Phase::Think {
            prompt: &context[..open],
            think: &context[open + THINK_OPEN.len()..],
        },
        None => Phase::Think {
            prompt: "",
            think: context,
        },
    }
}

/// Emits `planned` tokens from `source`, honoring the cap. `stop` is the
/// reason reported when the plan completes within the cap.
pub(crate) fn emit_planned(
    planned: Option<usize>,
    max_tokens: usize,
    mut source: impl FnMut(usize) -> crate::token::Token,
    stop: StopReason,
) -> ContinuationResponse {
    let (n, reason) = match planned {
        Some(n) if n <= max_tokens => (n, stop),
        _ => (max_tokens, StopReason::CapReached),
    };
    let tokens = (0..n).map(&mut source).collect();
    ContinuationResponse::new(tokens, reason)
}
