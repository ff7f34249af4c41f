//! Token-budget control for chain-of-thought decoding.
//!
//! The crate is organised around a small set of pieces:
//!
//! - [`token`]: control-token markers, token sequences and the marker-aware tokenizer.
//! - [`schedule`]: budget specs and the ratio / fixed-interval insertion schedules.
//! - [`backend`]: the continuation interface plus scripted, budget-following and
//!   HTTP streaming realizations (and a stub server for protocol tests).
//! - [`injector`]: the generation loop that injects control tokens and enforces the budget.
//! - [`curator`]: SFT record construction from raw reasoning corpora.
//! - [`reward`]: the composite correctness / format / length reward.
//! - [`curriculum`]: staged decreasing budgets followed by mixed-budget sampling.
//! - [`harness`]: budget-adherence metrics, mergeable aggregates and report emission.
//!
//! Numeric code in [`reward`] and [`harness`] is generic over [`Scalar`], so the
//! same formulas run in `f32`, `f64` or exact rational arithmetic. The aliases
//! below fix the common instantiations.

pub mod backend;
pub mod curator;
pub mod curriculum;
mod error;
pub mod harness;
pub mod injector;
pub mod reward;
mod scalar;
pub mod schedule;
pub mod token;

pub use error::{Error, Result};
pub use scalar::{Rational, Scalar};

pub use backend::{
    Backend, BudgetPolicy, ContinuationRequest, ContinuationResponse, SamplingParams,
    ScriptedBackend, StopReason,
};
pub use injector::{generate_with_budget, run_batch, Problem, Termination, TraceRecord};
pub use schedule::{
    make_fixed_schedule, make_ratio_schedule, BudgetSpec, ControlSchedule, ScheduleEntry,
    ScheduleKind,
};
pub use token::{strip_control_tokens, ControlToken, Token, TokenSeq};

/// Reward configuration in double precision.
pub type RewardConfigF64 = reward::RewardConfig<f64>;
/// Reward breakdown in double precision.
pub type RewardBreakdownF64 = reward::RewardBreakdown<f64>;
/// Reward configuration in single precision.
pub type RewardConfigF32 = reward::RewardConfig<f32>;
/// Reward breakdown in single precision.
pub type RewardBreakdownF32 = reward::RewardBreakdown<f32>;
/// Exact reward configuration.
pub type RewardConfigExact = reward::RewardConfig<Rational>;
/// Exact reward breakdown.
pub type RewardBreakdownExact = reward::RewardBreakdown<Rational>;
/// Evaluation report in double precision, the form written to disk.
pub type EvalReportF64 = harness::EvalReport<f64>;
/// Exact evaluation report.
pub type EvalReportExact = harness::EvalReport<Rational>;
