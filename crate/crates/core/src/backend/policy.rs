use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{emit_planned, split_context, Backend, ContinuationRequest, ContinuationResponse, Phase, StopReason};
use crate::token::{ControlToken, Token, TokenSeq};

fn budget_hint_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Please answer within (\d+) tokens").unwrap())
}

/// Synthetic budget-following model.
///
/// The policy infers the budget from the ratio markers it has seen: two
/// consecutive `<|budget:k/K|>` markers are `floor(B/K)` apart, and a lone
/// `c_k` at position `p > 0` sits at `k * floor(B/K)`. It then plans a think
/// length of `target_fraction * B_est` (optionally jittered by `noise`, drawn
/// once per session seed) and stops there. When the markers do not yet pin the
/// budget it falls back to a "Please answer within N tokens" hint in the
/// prompt, and failing that it keeps generating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub target_fraction: f64,
    /// Relative jitter applied to the plan, uniform in `[-noise, noise]`.
    pub noise: f64,
    pub filler: String,
    pub answer: String,
}

impl BudgetPolicy {
    pub fn new(target_fraction: f64) -> Self {
        BudgetPolicy {
            target_fraction,
            noise: 0.0,
            filler: " think".to_string(),
            answer: r" \boxed{42}".to_string(),
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    /// Think length the policy aims for in this context, if it can tell.
    pub fn planned_length(&self, prompt: &str, think: &TokenSeq, seed: u64) -> Option<usize> {
        let budget = infer_budget(think).or_else(|| {
            budget_hint_re()
                .captures_iter(prompt)
                .last()
                .and_then(|c| c[1].parse().ok())
        })?;
        let mut fraction = self.target_fraction;
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            fraction *= 1.0 + rng.gen_range(-self.noise..=self.noise);
        }
        Some((fraction.max(0.0) * budget as f64).floor() as usize)
    }
}

/// Budget estimate from the ratio markers present in the think phase.
fn infer_budget(think: &TokenSeq) -> Option<usize> {
    let markers: Vec<(usize, u32, u32)> = think
        .controls()
        .filter_map(|(pos, c)| match c {
            ControlToken::Budget { index, of } => Some((pos, index, of)),
            ControlToken::Elapsed { .. } => None,
        })
        .collect();
    let &(pos, index, of) = markers.last()?;
    let step = match markers.len() {
        1 if pos > 0 => pos / index as usize,
        1 => return None,
        n => pos - markers[n - 2].0,
    };
    (step > 0).then_some(step * of as usize)
}

impl Backend for BudgetPolicy {
    fn continue_from(&self, request: &ContinuationRequest) -> ContinuationResponse {
        match split_context(&request.context) {
            Phase::Think { prompt, think } => {
                let seq = TokenSeq::from_text(think);
                let planned = self
                    .planned_length(prompt, &seq, request.sampling.seed)
                    .map(|target| target.saturating_sub(seq.len()));
                emit_planned(
                    planned,
                    request.max_tokens,
                    |_| Token::sampled(self.filler.clone()),
                    StopReason::StopMarker,
                )
            }
            Phase::Answer { answer } => {
                let template = TokenSeq::from_text(&self.answer);
                let emitted = TokenSeq::from_text(answer).len();
                let remaining = template.len().saturating_sub(emitted);
                emit_planned(
                    Some(remaining),
                    request.max_tokens,
                    |i| template.tokens()[emitted + i].clone(),
                    StopReason::EndOfSequence,
                )
            }
        }
    }
}
