use serde::{Deserialize, Serialize};

use super::{emit_planned, split_context, Backend, ContinuationRequest, ContinuationResponse, Phase, StopReason};
use crate::token::{Token, TokenSeq};

/// Deterministic test backend.
///
/// In the think phase it emits `filler` tokens until `think_tokens` sampled
/// tokens exist in the context, then reports a stop marker. In the answer
/// phase it cycles through the tokens of `answer` until `answer_tokens` have
/// been emitted, then reports end of sequence. `None` means never stop.
///
/// State is recovered from the context alone, so one instance can serve any
/// number of concurrent sessions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    pub think_tokens: Option<usize>,
    pub answer_tokens: Option<usize>,
    pub filler: String,
    pub answer: String,
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        ScriptedBackend {
            think_tokens: None,
            answer_tokens: Some(7),
            filler: " step".to_string(),
            answer: r" The answer is \boxed{42}".to_string(),
        }
    }
}

impl ScriptedBackend {
    pub fn never_stopping() -> Self {
        ScriptedBackend {
            think_tokens: None,
            answer_tokens: None,
            ..Default::default()
        }
    }

    pub fn stop_after(think_tokens: usize) -> Self {
        ScriptedBackend {
            think_tokens: Some(think_tokens),
            ..Default::default()
        }
    }

    pub fn with_answer_tokens(mut self, answer_tokens: Option<usize>) -> Self {
        self.answer_tokens = answer_tokens;
        self
    }
}

impl Backend for ScriptedBackend {
    fn continue_from(&self, request: &ContinuationRequest) -> ContinuationResponse {
        match split_context(&request.context) {
            Phase::Think { think, .. } => {
                let seq = TokenSeq::from_text(think);
                let emitted = seq.len() - seq.control_positions().len();
                let planned = self.think_tokens.map(|n| n.saturating_sub(emitted));
                emit_planned(
                    planned,
                    request.max_tokens,
                    |_| Token::sampled(self.filler.clone()),
                    StopReason::StopMarker,
                )
            }
            Phase::Answer { answer } => {
                let emitted = TokenSeq::from_text(answer).len();
                let template = TokenSeq::from_text(&self.answer);
                let planned = self.answer_tokens.map(|n| n.saturating_sub(emitted));
                emit_planned(
                    planned,
                    request.max_tokens,
                    |i| {
                        if template.is_empty() {
                            Token::sampled(self.filler.clone())
                        } else {
                            template.tokens()[(emitted + i) % template.len()].clone()
                        }
                    },
                    StopReason::EndOfSequence,
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SamplingParams, THINK_OPEN};

    fn request(context: &str, cap: usize) -> ContinuationRequest {
        ContinuationRequest {
            context: context.to_string(),
            max_tokens: cap,
            stop_markers: vec![],
            sampling: SamplingParams::default(),
        }
    }

    #[test]
    fn never_stopping_fills_the_cap() {
        let b = ScriptedBackend::never_stopping();
        let r = b.continue_from(&request(&format!("Q{THINK_OPEN}"), 100));
        assert_eq!(r.tokens.len(), 100);
        assert_eq!(r.stop_reason, StopReason::CapReached);
    }

    #[test]
    fn scripted_stop_within_cap() {
        let b = ScriptedBackend::stop_after(40);
        let r = b.continue_from(&request(&format!("Q{THINK_OPEN}"), 100));
        assert_eq!(r.tokens.len(), 40);
        assert_eq!(r.stop_reason, StopReason::StopMarker);
    }

    #[test]
    fn minimal_cap() {
        let b = ScriptedBackend::never_stopping();
        let r = b.continue_from(&request(&format!("Q{THINK_OPEN}"), 1));
        assert_eq!(r.tokens.len(), 1);
    }

    #[test]
    fn resumes_from_context_ignoring_markers() {
        let b = ScriptedBackend::stop_after(40);
        let ctx = format!("Q{THINK_OPEN}<|budget:1/8|>{}<|budget:2/8|>", " step".repeat(30));
        let r = b.continue_from(&request(&ctx, 100));
        assert_eq!(r.tokens.len(), 10);
        assert_eq!(r.stop_reason, StopReason::StopMarker);
    }

    #[test]
    fn answer_phase_ends_with_eos() {
        let b = ScriptedBackend::default();
        let r = b.continue_from(&request("Q<think> a b</think>**Final Answer**", 50));
        assert_eq!(r.tokens.len(), 7);
        assert_eq!(r.stop_reason, StopReason::EndOfSequence);
        assert!(r.tokens.render().contains(r"\boxed{42}"));
    }

    #[test]
    fn same_request_same_response() {
        let b = ScriptedBackend::stop_after(13);
        let req = request("Q<think> step", 5);
        assert_eq!(b.continue_from(&req), b.continue_from(&req));
    }
}
