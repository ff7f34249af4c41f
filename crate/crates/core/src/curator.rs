//! SFT record construction.
//!
//! Each raw `(prompt, answer)` pair gets a budget `B = T * ceil(|y| / T)`, a
//! prompt suffixed with the budget instruction, and a target with the ratio
//! schedule of its own budget inserted. Insertion positions count previously
//! inserted control tokens, as the inference loop does.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{make_ratio_schedule, ControlSchedule, DEFAULT_GRANULARITY, DEFAULT_INTERVALS};
use crate::token::{contains_reserved_marker, count_text_tokens, Token, TokenSeq};

const BUDGET_SUFFIX_PREFIX: &str = "Please answer within ";

fn budget_suffix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Please answer within \d+ tokens\s*$").unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ComplexReasoning,
    ShortCot,
}

impl Category {
    /// Category for well-known corpus names; otherwise by length, with
    /// answers under 1000 tokens counted as short chain-of-thought.
    pub fn infer(source: &str, answer_tokens: usize) -> Self {
        let s = source.to_ascii_lowercase();
        if ["s1k", "limo", "bespoke"].iter().any(|k| s.contains(k)) {
            Category::ComplexReasoning
        } else if ["numina", "math"].iter().any(|k| s.contains(k)) || answer_tokens < 1000 {
            Category::ShortCot
        } else {
            Category::ComplexReasoning
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub prompt: String,
    pub answer: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

impl RawSample {
    pub fn token_length(&self) -> usize {
        count_text_tokens(&self.answer)
    }

    pub fn category(&self) -> Category {
        self.category
            .unwrap_or_else(|| Category::infer(&self.source, self.token_length()))
    }
}

/// A curated training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub answer: String,
    pub source: String,
    pub augmented_prompt: String,
    pub target: String,
    pub budget: usize,
    pub injected_positions: Vec<usize>,
}

/// `T * ceil(|y| / T)`.
pub fn assign_budget(answer_length: usize, granularity: usize) -> Result<usize> {
    if answer_length == 0 || granularity == 0 {
        return Err(Error::invalid("answer length and granularity must be >= 1"));
    }
    Ok(granularity * answer_length.div_ceil(granularity))
}

/// Appends the budget instruction. Rejects prompts that already end with one.
pub fn augment_prompt(prompt: &str, budget: usize) -> Result<String> {
    if budget == 0 {
        return Err(Error::invalid("budget must be positive"));
    }
    if budget_suffix_re().is_match(prompt) {
        return Err(Error::DuplicateBudgetSuffix);
    }
    Ok(format!("{prompt}{BUDGET_SUFFIX_PREFIX}{budget} tokens"))
}

/// Places each scheduled token so that exactly `position` tokens precede it,
/// for every entry with `position <= |answer|`.
pub fn insert_control_tokens(answer: &TokenSeq, schedule: &ControlSchedule) -> TokenSeq {
    let limit = answer.len();
    let mut out = TokenSeq::new();
    let mut source = answer.iter().cloned();
    for entry in schedule.entries().iter().filter(|e| e.position <= limit) {
        while out.len() < entry.position {
            match source.next() {
                Some(tok) => out.push(tok),
                None => break,
            }
        }
        out.push(Token::control(entry.token));
    }
    for tok in source {
        out.push(tok);
    }
    out
}

/// Keeps samples with `|y| <= max_tokens`; returns them with the drop count.
pub fn filter_by_length(samples: Vec<RawSample>, max_tokens: usize) -> Result<(Vec<RawSample>, usize)> {
    if max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be positive"));
    }
    let before = samples.len();
    let kept: Vec<_> = samples.into_iter().filter(|s| s.token_length() <= max_tokens).collect();
    let dropped = before - kept.len();
    Ok((kept, dropped))
}

/// Counts of answer lengths in fixed-width buckets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bucket_width: usize,
    /// Lower bucket bound to count.
    pub counts: BTreeMap<usize, usize>,
}

impl LengthHistogram {
    pub fn new(bucket_width: usize) -> Self {
        LengthHistogram {
            bucket_width,
            counts: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, length: usize) {
        let lower = length / self.bucket_width * self.bucket_width;
        *self.counts.entry(lower).or_default() += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub samples: Vec<RawSample>,
    pub per_source: BTreeMap<String, usize>,
    pub histogram: LengthHistogram,
    pub warnings: Vec<String>,
}

fn select_capped(
    pool: Vec<RawSample>,
    caps: &BTreeMap<String, usize>,
    rng: &mut ChaCha8Rng,
    warnings: &mut Vec<String>,
) -> Vec<RawSample> {
    let mut by_source: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_source.entry(s.source.clone()).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (source, mut idx) in by_source {
        match caps.get(&source) {
            Some(&cap) if cap < idx.len() => {
                idx.shuffle(rng);
                idx.truncate(cap);
            }
            Some(&cap) if cap > idx.len() => {
                let msg = format!("cap {cap} for source {source:?} exceeds pool size {}; taking all", idx.len());
                warn!("{msg}");
                warnings.push(msg);
            }
            _ => {}
        }
        chosen.extend(idx);
    }
    chosen.sort_unstable();
    let mut pool: Vec<Option<RawSample>> = pool.into_iter().map(Some).collect();
    chosen.into_iter().filter_map(|i| pool[i].take()).collect()
}

/// Seeded per-source sampling over the long and short pools. Sources without
/// a cap are taken whole; selected samples keep their input order.
pub fn balance_mixture(
    long_pool: Vec<RawSample>,
    short_pool: Vec<RawSample>,
    caps: &BTreeMap<String, usize>,
    bucket_width: usize,
    seed: u64,
) -> Result<Mixture> {
    if bucket_width == 0 {
        return Err(Error::invalid("bucket width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut samples = select_capped(long_pool, caps, &mut rng, &mut warnings);
    samples.extend(select_capped(short_pool, caps, &mut rng, &mut warnings));

    let mut per_source = BTreeMap::new();
    let mut histogram = LengthHistogram::new(bucket_width);
    for s in &samples {
        *per_source.entry(s.source.clone()).or_default() += 1;
        histogram.add(s.token_length());
    }
    Ok(Mixture {
        samples,
        per_source,
        histogram,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    pub granularity: usize,
    pub intervals: u32,
    pub include_origin: bool,
    pub max_len: usize,
    #[serde(default)]
    pub caps: BTreeMap<String, usize>,
    pub bucket_width: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            granularity: DEFAULT_GRANULARITY,
            intervals: DEFAULT_INTERVALS,
            include_origin: true,
            max_len: 10_000,
            caps: BTreeMap::new(),
            bucket_width: 500,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.granularity == 0 {
            return Err(Error::invalid("granularity must be >= 1"));
        }
        if self.intervals == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max length must be >= 1"));
        }
        if self.bucket_width == 0 {
            return Err(Error::invalid("bucket width must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub input: usize,
    pub dropped_empty: usize,
    pub dropped_reserved_marker: usize,
    pub dropped_too_long: usize,
    pub dropped_unschedulable: usize,
    pub output: usize,
    pub per_source: BTreeMap<String, usize>,
    pub histogram: LengthHistogram,
    pub warnings: Vec<String>,
}

/// Builds one record from an already-validated sample.
pub fn curate_sample(sample: &RawSample, config: &CurationConfig) -> Result<SftRecord> {
    let answer = TokenSeq::from_text(&sample.answer);
    let budget = assign_budget(answer.len(), config.granularity)?;
    let schedule = make_ratio_schedule(budget, config.intervals, config.include_origin)?;
    let target = insert_control_tokens(&answer, &schedule);
    Ok(SftRecord {
        prompt: sample.prompt.clone(),
        answer: sample.answer.clone(),
        source: sample.source.clone(),
        augmented_prompt: augment_prompt(&sample.prompt, budget)?,
        target: target.render(),
        budget,
        injected_positions: target.control_positions(),
    })
}

/// Full pipeline: validation, length filter, mixture balancing, then record
/// construction. A pure function of its inputs.
pub fn curate(samples: Vec<RawSample>, config: &CurationConfig) -> Result<(Vec<SftRecord>, CurationReport)> {
    config.validate()?;
    let mut report = CurationReport {
        input: samples.len(),
        ..Default::default()
    };
    let mut valid = Vec::with_capacity(samples.len());
    for s in samples {
        if contains_reserved_marker(&s.answer) {
            report.dropped_reserved_marker += 1;
        } else if s.token_length() == 0 {
            report.dropped_empty += 1;
        } else {
            valid.push(s);
        }
    }
    let (kept, too_long) = filter_by_length(valid, config.max_len)?;
    report.dropped_too_long = too_long;

    let (long_pool, short_pool): (Vec<_>, Vec<_>) = kept
        .into_iter()
        .partition(|s| s.category() == Category::ComplexReasoning);
    let mixture = balance_mixture(long_pool, short_pool, &config.caps, config.bucket_width, config.seed)?;

    let built: Vec<Result<SftRecord>> = mixture.samples.par_iter().map(|s| curate_sample(s, config)).collect();
    let mut records = Vec::with_capacity(built.len());
    for r in built {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                report.dropped_unschedulable += 1;
                report.warnings.push(e.to_string());
            }
        }
    }
    report.output = records.len();
    report.per_source = mixture.per_source;
    report.histogram = mixture.histogram;
    report.warnings.extend(mixture.warnings);
    Ok((records, report))
}
