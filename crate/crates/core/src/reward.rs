//! Composite reward for budget-following RL.
//!
//! ```text
//! R = k1 * [answer correct] + k2 * [format ok] + k3 * max(1 - gamma * ((B - |y|) / B)^2, 0)
//! gamma = 1 if |y| <= B, r otherwise
//! ```
//!
//! `|y|` is the think length including injected control tokens. The
//! enforcement tag and answer-window tokens are not counted.

use std::sync::OnceLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injector::TraceRecord;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig<S> {
    pub k1: S,
    pub k2: S,
    pub k3: S,
    /// Overrun penalty `r`, must exceed 1.
    pub overrun_penalty: S,
}

impl<S: Scalar> Default for RewardConfig<S> {
    fn default() -> Self {
        RewardConfig {
            k1: S::from_ratio(7, 10),
            k2: S::from_ratio(15, 100),
            k3: S::from_ratio(15, 100),
            overrun_penalty: S::from_count(16),
        }
    }
}

impl<S: Scalar> RewardConfig<S> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail validation
    pub fn validate(&self) -> Result<()> {
        let zero = S::zero();
        if !(self.k1 >= zero && self.k2 >= zero && self.k3 >= zero) {
            return Err(Error::invalid("reward weights must be non-negative"));
        }
        if !(self.overrun_penalty > S::one()) {
            return Err(Error::invalid("overrun penalty r must be > 1"));
        }
        Ok(())
    }

    pub fn max_total(&self) -> S {
        self.k1 + self.k2 + self.k3
    }
}

/// Components of one reward evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<S> {
    pub correct: bool,
    pub format_ok: bool,
    pub length_reward: S,
    /// `||y| - B| / B`.
    pub normalized_deviation: S,
    pub gamma: S,
    pub total: S,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LengthTerms<S> {
    value: S,
    deviation: S,
    gamma: S,
}

fn length_terms<S: Scalar>(answer_length: usize, budget: usize, r: S) -> Result<LengthTerms<S>> {
    if budget == 0 {
        return Err(Error::invalid("budget must be positive"));
    }
    let b = S::from_count(budget as u64);
    let gap = S::from_count(answer_length.abs_diff(budget) as u64);
    let deviation = gap / b;
    let gamma = if answer_length <= budget { S::one() } else { r };
    let value = (S::one() - gamma * deviation * deviation).max_of(S::zero());
    Ok(LengthTerms { value, deviation, gamma })
}

/// `max(1 - gamma * ((B - |y|) / B)^2, 0)`.
pub fn length_reward<S: Scalar>(answer_length: usize, budget: usize, r: S) -> Result<S> {
    length_terms(answer_length, budget, r).map(|t| t.value)
}

pub fn composite_reward<S: Scalar>(
    correct: bool,
    format_ok: bool,
    answer_length: usize,
    budget: usize,
    config: &RewardConfig<S>,
) -> Result<RewardBreakdown<S>> {
    config.validate()?;
    let terms = length_terms(answer_length, budget, config.overrun_penalty)?;
    let indicator = |b: bool| if b { S::one() } else { S::zero() };
    let total = config.k1 * indicator(correct) + config.k2 * indicator(format_ok) + config.k3 * terms.value;
    Ok(RewardBreakdown {
        correct,
        format_ok,
        length_reward: terms.value,
        normalized_deviation: terms.deviation,
        gamma: terms.gamma,
        total,
    })
}

/// Outcome of comparing a generated answer with the reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grade {
    pub correct: bool,
    /// Normalized extracted answer; `None` when nothing could be extracted.
    pub extracted: Option<String>,
}

fn last_number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?(?:\s*/\s*-?\d+)?").unwrap())
}

fn frac_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(-?)\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}$").unwrap())
}

/// Contents of the last `\boxed{...}`, braces balanced.
fn last_boxed(text: &str) -> Option<&str> {
    let start = text.rfind(r"\boxed{")? + r"\boxed{".len();
    let mut depth = 1usize;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_rational(s: &str) -> Option<Ratio<i128>> {
    let s: String = s.chars().filter(|c| !c.is_whitespace() && *c != ',').collect();
    if let Some(c) = frac_re().captures(&s) {
        let sign = if &c[1] == "-" { -1 } else { 1 };
        let n: i128 = c[2].parse().ok()?;
        let d: i128 = c[3].parse().ok()?;
        return (d != 0).then(|| Ratio::new(sign * n, d));
    }
    if let Some((n, d)) = s.split_once('/') {
        let n = parse_rational(n)?;
        let d = parse_rational(d)?;
        return (d != Ratio::from_integer(0)).then(|| n / d);
    }
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(&s)),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let scale = 10i128.checked_pow(frac.len() as u32)?;
    let joined = format!("{int}{frac}");
    let digits = joined.trim_start_matches('0');
    let whole: i128 = if digits.is_empty() { 0 } else { digits.parse().ok()? };
    let r = Ratio::new(whole, scale);
    Some(if neg { -r } else { r })
}

/// Canonical form: rationals reduced (`7/2`, `-3`), anything else trimmed
/// with surrounding `$` and a trailing period removed.
pub fn normalize_answer(raw: &str) -> String {
    let mut s = raw.trim();
    if let Some(inner) = last_boxed(s).filter(|_| s.starts_with(r"\boxed{")) {
        s = inner.trim();
    }
    let s = s.trim_matches('$').trim().trim_end_matches('.').trim();
    match parse_rational(s) {
        Some(r) if *r.denom() == 1 => r.numer().to_string(),
        Some(r) => format!("{}/{}", r.numer(), r.denom()),
        None => s.to_string(),
    }
}

/// Extracts the final answer: the last `\boxed{}` if present, otherwise the
/// last number in the text.
pub fn extract_answer(text: &str) -> Option<String> {
    if let Some(inner) = last_boxed(text) {
        return Some(normalize_answer(inner));
    }
    last_number_re()
        .find_iter(text)
        .last()
        .map(|m| normalize_answer(m.as_str()))
}

pub fn answer_correct(generated: &str, gold: &str) -> Grade {
    let extracted = extract_answer(generated);
    let correct = extracted
        .as_deref()
        .is_some_and(|e| !e.is_empty() && e == normalize_answer(gold));
    Grade { correct, extracted }
}

/// Think phase closed (naturally or by enforcement) and a non-empty answer follows.
pub fn format_check(trace: &TraceRecord) -> bool {
    trace.think_closed() && !trace.answer_text.trim().is_empty()
}

/// Reward for a stored trace against its reference answer.
pub fn score_trace<S: Scalar>(trace: &TraceRecord, gold: &str, config: &RewardConfig<S>) -> Result<RewardBreakdown<S>> {
    let grade = answer_correct(&trace.answer_text, gold);
    composite_reward(grade.correct, format_check(trace), trace.think_length, trace.budget, config)
}
