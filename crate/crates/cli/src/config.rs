//! Run configuration: per-command sections whose fields are all optional so
//! that CLI flags, a config file and defaults can be layered field by field.
//!
//! The same section types are used for clap arguments, the config file and
//! the resolved snapshot, so a snapshot can be fed straight back via
//! `--config` to repeat a run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use budgetctl::curriculum::CurriculumPlan;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fallback seed for commands that take one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curate: Option<CurateArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateArgs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curriculum: Option<CurriculumPlan>,
}

impl RunConfig {
    /// Reads TOML, or JSON when the file ends in `.json`. Unknown keys are errors.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Failure::config(format!("{}: {e}", path.display())).into())
    }
}

/// Field-wise `self.or(other)` over every listed field.
macro_rules! layered {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn over(self, lower: Option<$ty>) -> $ty {
                let lower = lower.unwrap_or_default();
                $ty { $($field: self.$field.or(lower.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateArgs {
    /// JSONL of {"id"?, "prompt"}.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Trace JSONL output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// ratio:K, fixed:I or none.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long, value_name = "BOOL")]
    pub include_origin: Option<bool>,
    #[arg(long)]
    pub answer_window: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Append the "Please answer within B tokens" instruction to each prompt.
    #[arg(long, value_name = "BOOL")]
    pub augment_prompt: Option<bool>,
    /// scripted, policy or http.
    #[arg(long)]
    pub backend: Option<String>,
    /// Scripted backend: stop thinking after this many tokens (default: never).
    #[arg(long)]
    pub think_tokens: Option<usize>,
    /// Policy backend: fraction of the budget to use.
    #[arg(long)]
    pub policy: Option<f64>,
    #[arg(long)]
    pub policy_noise: Option<f64>,
    /// HTTP backend base URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub auth_env: Option<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
}

layered!(GenerateArgs {
    prompts, out, budget, schedule, include_origin, answer_window, temperature, top_p, seed, n_samples,
    augment_prompt, backend, think_tokens, policy, policy_noise, endpoint, model, auth_env, timeout_ms, retries,
});

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurateArgs {
    /// JSONL of {"prompt", "answer", "source"}.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub granularity: Option<usize>,
    /// Number of ratio intervals.
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long, value_name = "BOOL")]
    pub include_origin: Option<bool>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Per-source caps, e.g. `numina=20000,math=7500`.
    #[arg(long, value_parser = parse_caps)]
    pub caps: Option<BTreeMap<String, usize>>,
    #[arg(long)]
    pub bucket_width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

layered!(CurateArgs { input, out, granularity, k, include_origin, max_len, caps, bucket_width, seed });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardArgs {
    /// JSONL of {"id", "answer"}.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Output directory; per-trace rewards go to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub k2: Option<f64>,
    #[arg(long)]
    pub k3: Option<f64>,
    /// Overrun penalty.
    #[arg(long = "r")]
    #[serde(rename = "r")]
    pub overrun_penalty: Option<f64>,
}

layered!(RewardArgs { gold, traces, out, k1, k2, k3, overrun_penalty });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// JSONL of {"id", "answer"}; enables pass@1.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// `500,1000,2000` or `500..10000[:step]`.
    #[arg(long)]
    pub budgets: Option<BudgetList>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any of jsonl, csv, plot-data.
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<String>>,
}

layered!(EvalArgs { traces, gold, budgets, out, formats });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateArgs {
    /// `500,1000,2000` or `500..10000[:step]`.
    #[arg(long)]
    pub budgets: Option<BudgetList>,
    /// Fraction of the budget the synthetic policy aims for.
    #[arg(long)]
    pub policy: Option<f64>,
    #[arg(long)]
    pub policy_noise: Option<f64>,
    #[arg(long)]
    pub problems: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long, value_name = "BOOL")]
    pub include_origin: Option<bool>,
    #[arg(long)]
    pub answer_window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for traces and report files; the report goes to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(SimulateArgs {
    budgets, policy, policy_noise, problems, n_samples, schedule, include_origin, answer_window, seed, out,
});

fn parse_caps(s: &str) -> Result<BTreeMap<String, usize>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (k, v) = pair.split_once('=').ok_or(format!("expected source=N, got {pair:?}"))?;
            let n = v.trim().parse().map_err(|_| format!("bad cap {v:?} for {k}"))?;
            Ok((k.trim().to_string(), n))
        })
        .collect()
}

/// A budget sweep. `a..b` steps by `a`; `a..b:s` steps by `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BudgetList(pub Vec<usize>);

impl FromStr for BudgetList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad budget {t:?}"));
        if let Some((lo, rest)) = s.split_once("..") {
            let (hi, step) = match rest.split_once(':') {
                Some((hi, step)) => (num(hi)?, num(step)?),
                None => (num(rest)?, num(lo)?),
            };
            let lo = num(lo)?;
            if lo == 0 || step == 0 || hi < lo {
                return Err(format!("empty or unbounded budget range {s:?}"));
            }
            return Ok(BudgetList((lo..=hi).step_by(step).collect()));
        }
        s.split(',').map(num).collect::<Result<_, _>>().map(BudgetList)
    }
}

impl fmt::Display for BudgetList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}
