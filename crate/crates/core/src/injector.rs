//! The budget-aware generation loop.
//!
//! The think phase is produced in segments. Each backend request is capped at
//! the distance to the next scheduled insertion (or to the budget), the
//! scheduled control token is appended at its exact position, and the loop
//! continues with the marker in context. If the budget is reached without a
//! natural stop, the think phase is cut, [`FINAL_ANSWER_TAG`] is appended and
//! the backend gets `answer_window` more tokens for the answer.
//!
//! Injected tokens occupy timesteps: they count toward the think length and
//! toward the budget. The enforcement tag does not.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, ContinuationRequest, SamplingParams, StopReason, FINAL_ANSWER_TAG, THINK_CLOSE, THINK_OPEN,
};
use crate::error::{Error, Result};
use crate::schedule::BudgetSpec;
use crate::token::{count_text_tokens, Token, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The backend closed the think phase within the budget.
    NaturalWithinBudget,
    /// The think phase was cut at the budget and the answer completed in the window.
    TruncatedAtBudget,
    /// The think phase was cut and the answer window filled without an end of sequence.
    AnswerWindowExhausted,
    BackendError,
}

impl Termination {
    pub const ALL: [Termination; 4] = [
        Termination::NaturalWithinBudget,
        Termination::TruncatedAtBudget,
        Termination::AnswerWindowExhausted,
        Termination::BackendError,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::NaturalWithinBudget => "natural_within_budget",
            Termination::TruncatedAtBudget => "truncated_at_budget",
            Termination::AnswerWindowExhausted => "answer_window_exhausted",
            Termination::BackendError => "backend_error",
        }
    }
}

/// One generation session, as written to trace JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub prompt: String,
    pub think_text: String,
    pub injected_positions: Vec<usize>,
    pub answer_text: String,
    pub termination: Termination,
    pub think_length: usize,
    #[serde(default)]
    pub answer_length: usize,
    /// Tokens of the enforcement tag, zero unless the budget was enforced.
    #[serde(default)]
    pub tag_length: usize,
    pub budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl TraceRecord {
    /// Think, tag and answer tokens together.
    pub fn total_length(&self) -> usize {
        self.think_length + self.tag_length + self.answer_length
    }

    /// Whether a think-close marker is present, emitted or enforced.
    pub fn think_closed(&self) -> bool {
        self.termination != Termination::BackendError
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// A problem to generate for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
}

struct Answer {
    tokens: TokenSeq,
    natural: bool,
    error: Option<String>,
}

fn request(context: String, max_tokens: usize, stop_markers: Vec<String>, params: &SamplingParams) -> ContinuationRequest {
    ContinuationRequest {
        context,
        max_tokens,
        stop_markers,
        sampling: *params,
    }
}

/// Requests up to `cap` answer tokens, re-requesting if a backend returns
/// short of its cap without stopping.
fn collect_answer<B: Backend + ?Sized>(backend: &B, prefix: &str, cap: usize, params: &SamplingParams) -> Answer {
    let mut tokens = TokenSeq::new();
    while tokens.len() < cap {
        let remaining = cap - tokens.len();
        let resp = backend.continue_from(&request(
            format!("{prefix}{}", tokens.render()),
            remaining,
            Vec::new(),
            params,
        ));
        let mut got = resp.tokens;
        got.truncate(remaining);
        let progressed = !got.is_empty();
        tokens.extend(got);
        match resp.stop_reason {
            StopReason::Error => {
                return Answer {
                    tokens,
                    natural: false,
                    error: resp.diagnostic.or_else(|| Some("backend error".into())),
                }
            }
            StopReason::StopMarker | StopReason::EndOfSequence => {
                return Answer {
                    tokens,
                    natural: true,
                    error: None,
                }
            }
            StopReason::CapReached if !progressed => {
                return Answer {
                    tokens,
                    natural: false,
                    error: Some("backend made no progress below its cap".into()),
                }
            }
            StopReason::CapReached => {}
        }
    }
    Answer {
        tokens,
        natural: false,
        error: None,
    }
}

/// Runs one budget-controlled session.
///
/// Errors only on an invalid spec or sampling parameters; backend failures
/// end the session with [`Termination::BackendError`] and the partial trace.
pub fn generate_with_budget<B: Backend + ?Sized>(
    backend: &B,
    prompt: &str,
    spec: &BudgetSpec,
    params: &SamplingParams,
) -> Result<TraceRecord> {
    let schedule = spec.schedule()?;
    params.validate()?;
    let budget = spec.budget;
    let entries = schedule.entries();
    let base = format!("{prompt}{THINK_OPEN}");

    let mut think = TokenSeq::new();
    let mut injected = Vec::new();
    let mut next = 0;
    let mut failure = None;
    let mut natural = false;

    while think.len() < budget {
        while let Some(entry) = entries.get(next).filter(|e| e.position == think.len()) {
            injected.push(entry.position);
            think.push(Token::control(entry.token));
            next += 1;
        }
        if think.len() >= budget {
            break;
        }
        let boundary = entries.get(next).map_or(budget, |e| e.position);
        let cap = boundary - think.len();
        let resp = backend.continue_from(&request(
            format!("{base}{}", think.render()),
            cap,
            vec![THINK_CLOSE.to_string()],
            params,
        ));
        let mut got = resp.tokens;
        got.truncate(cap);
        let progressed = !got.is_empty();
        think.extend(got);
        match resp.stop_reason {
            StopReason::StopMarker | StopReason::EndOfSequence => {
                natural = true;
                break;
            }
            StopReason::Error => {
                failure = Some(resp.diagnostic.unwrap_or_else(|| "backend error".into()));
                break;
            }
            StopReason::CapReached if !progressed => {
                failure = Some("backend made no progress below its cap".into());
                break;
            }
            StopReason::CapReached => {}
        }
    }

    let think_length = think.len();
    let think_text = think.render();
    let mut trace = TraceRecord {
        id: None,
        sample: None,
        seed: params.seed,
        prompt: prompt.to_string(),
        think_text,
        injected_positions: injected,
        answer_text: String::new(),
        termination: Termination::BackendError,
        think_length,
        answer_length: 0,
        tag_length: 0,
        budget,
        diagnostic: None,
    };

    if let Some(diag) = failure {
        trace.diagnostic = Some(diag);
        return Ok(trace);
    }

    let answer = if natural {
        // No separate answer window after a natural stop; the session stays
        // inside the same B + W envelope as an enforced one.
        let cap = budget - think_length + spec.answer_window;
        let prefix = format!("{base}{}{THINK_CLOSE}", trace.think_text);
        let a = collect_answer(backend, &prefix, cap, params);
        trace.termination = Termination::NaturalWithinBudget;
        a
    } else {
        let (a, termination, tag_length) = enforce_budget(backend, &base, &trace.think_text, spec, params);
        trace.termination = termination;
        trace.tag_length = tag_length;
        a
    };

    trace.answer_length = answer.tokens.len();
    trace.answer_text = answer.tokens.render();
    if let Some(diag) = answer.error {
        trace.termination = Termination::BackendError;
        trace.diagnostic = Some(diag);
    }
    Ok(trace)
}

/// Cuts the think phase, appends the final-answer tag and grants the answer window.
fn enforce_budget<B: Backend + ?Sized>(
    backend: &B,
    base: &str,
    think_text: &str,
    spec: &BudgetSpec,
    params: &SamplingParams,
) -> (Answer, Termination, usize) {
    let prefix = format!("{base}{think_text}{FINAL_ANSWER_TAG}");
    let answer = collect_answer(backend, &prefix, spec.answer_window, params);
    let termination = if answer.natural {
        Termination::TruncatedAtBudget
    } else {
        Termination::AnswerWindowExhausted
    };
    (answer, termination, count_text_tokens(FINAL_ANSWER_TAG))
}

/// Seed for the `sample`-th draw of the `problem`-th problem.
pub fn derive_seed(base: u64, problem: usize, sample: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(((problem as u64) << 32) ^ sample as u64))
}

/// Generates `n_samples` traces per problem, ordered by (problem, sample).
pub fn run_batch<B: Backend + ?Sized>(
    backend: &B,
    problems: &[Problem],
    spec: &BudgetSpec,
    params: &SamplingParams,
    n_samples: usize,
) -> Result<Vec<TraceRecord>> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    spec.validate()?;
    params.validate()?;
    let jobs: Vec<(usize, usize)> = (0..problems.len())
        .flat_map(|p| (0..n_samples).map(move |s| (p, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(p, s)| {
            let problem = &problems[p];
            let params = SamplingParams {
                seed: derive_seed(params.seed, p, s),
                ..*params
            };
            let mut trace = generate_with_budget(backend, &problem.prompt, spec, &params)?;
            trace.id = Some(problem.id.clone());
            trace.sample = Some(s);
            Ok(trace)
        })
        .collect()
}
