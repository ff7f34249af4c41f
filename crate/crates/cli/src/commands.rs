use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use budgetctl::backend::{EndpointConfig, HttpBackend};
use budgetctl::curator::{augment_prompt, curate as curate_samples, CurationConfig, RawSample};
use budgetctl::curriculum::CurriculumPlan;
use budgetctl::harness::{
    aggregate_by_budget, emit_report, render_report, simulate as run_simulation, EvalReport, ReportFormat,
    SimulationConfig,
};
use budgetctl::reward::{score_trace, RewardConfig};
use budgetctl::schedule::{DEFAULT_ANSWER_WINDOW, DEFAULT_GRANULARITY, DEFAULT_INTERVALS};
use budgetctl::{
    run_batch, Backend, BudgetPolicy, BudgetSpec, Problem, SamplingParams, ScheduleKind, ScriptedBackend, Termination,
    TraceRecord,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{BudgetList, CurateArgs, EvalArgs, GenerateArgs, RewardArgs, RunConfig, SimulateArgs};
use crate::Failure;

const DEFAULT_POLICY_FRACTION: f64 = 0.9;

fn required<T>(value: &Option<T>, flag: &str) -> Result<()> {
    match value {
        Some(_) => Ok(()),
        None => Err(Failure::config(format!("missing required --{flag} (flag or config file)")).into()),
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Failure::new("input", format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_lines<T: Serialize>(out: &mut dyn Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `traces.jsonl` -> `traces.<suffix>` in the same directory.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn snapshot(path: &Path, global: &RunConfig, fill: impl FnOnce(&mut RunConfig)) -> Result<()> {
    let mut cfg = RunConfig { seed: global.seed, ..Default::default() };
    fill(&mut cfg);
    write_json(path, &cfg)?;
    log::info!("resolved config written to {}", path.display());
    Ok(())
}

fn parse_schedule(schedule: &str, include_origin: bool) -> Result<ScheduleKind> {
    Ok(match schedule.parse::<ScheduleKind>()? {
        ScheduleKind::Ratio { intervals, .. } => ScheduleKind::Ratio { intervals, include_origin },
        other => other,
    })
}

fn check_fraction(name: &str, value: f64) -> Result<()> {
    if !(value.is_finite() && value > 0.0) {
        return Err(Failure::validation(format!("{name} must be a positive number, got {value}")).into());
    }
    Ok(())
}

fn check_noise(value: f64) -> Result<()> {
    if !(0.0..1.0).contains(&value) {
        return Err(Failure::validation(format!("policy noise must lie in [0, 1), got {value}")).into());
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptLine {
    id: Option<String>,
    prompt: String,
}

#[derive(Deserialize)]
struct GoldLine {
    id: String,
    answer: String,
}

fn read_gold(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(read_jsonl::<GoldLine>(path)?.into_iter().map(|g| (g.id, g.answer)).collect())
}

fn termination_counts(traces: &[TraceRecord]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for t in traces {
        *counts.entry(t.termination.as_str()).or_default() += 1;
    }
    counts
}

pub fn generate(mut a: GenerateArgs, global: &RunConfig) -> Result<()> {
    required(&a.prompts, "prompts")?;
    required(&a.budget, "budget")?;
    a.schedule.get_or_insert_with(|| ScheduleKind::default().to_string());
    a.include_origin.get_or_insert(true);
    a.answer_window.get_or_insert(DEFAULT_ANSWER_WINDOW);
    a.temperature.get_or_insert(0.0);
    a.top_p.get_or_insert(1.0);
    a.seed = a.seed.or(global.seed).or(Some(0));
    a.n_samples.get_or_insert(1);
    a.augment_prompt.get_or_insert(false);
    let kind = a.backend.get_or_insert_with(|| "policy".into()).clone();

    let backend: Box<dyn Backend> = match kind.as_str() {
        "scripted" => Box::new(ScriptedBackend { think_tokens: a.think_tokens, ..ScriptedBackend::default() }),
        "policy" => {
            let f = *a.policy.get_or_insert(DEFAULT_POLICY_FRACTION);
            let noise = *a.policy_noise.get_or_insert(0.0);
            check_fraction("policy", f)?;
            check_noise(noise)?;
            Box::new(BudgetPolicy::new(f).with_noise(noise))
        }
        "http" => {
            required(&a.endpoint, "endpoint")?;
            let mut cfg = EndpointConfig::new(a.endpoint.clone().unwrap());
            cfg.model = a.model.get_or_insert(cfg.model.clone()).clone();
            cfg.auth_env = a.auth_env.clone();
            cfg.timeout_ms = *a.timeout_ms.get_or_insert(cfg.timeout_ms);
            cfg.retries = *a.retries.get_or_insert(cfg.retries);
            if let Some(var) = &cfg.auth_env {
                if std::env::var_os(var).is_none() {
                    log::warn!("auth variable {var} is not set; sending no credentials");
                }
            }
            Box::new(HttpBackend::new(cfg))
        }
        other => return Err(Failure::validation(format!("unknown backend {other:?}; use scripted, policy or http")).into()),
    };

    let budget = a.budget.unwrap();
    let spec = BudgetSpec::new(budget)
        .with_schedule(parse_schedule(a.schedule.as_deref().unwrap(), a.include_origin.unwrap())?)
        .with_answer_window(a.answer_window.unwrap());
    let params = SamplingParams { temperature: a.temperature.unwrap(), top_p: a.top_p.unwrap(), seed: a.seed.unwrap() };
    spec.validate()?;
    params.validate()?;

    let prompts: Vec<PromptLine> = read_jsonl(a.prompts.as_deref().unwrap())?;
    let problems = prompts
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let prompt = if a.augment_prompt.unwrap() { augment_prompt(&p.prompt, budget)? } else { p.prompt };
            Ok(Problem { id: p.id.unwrap_or_else(|| format!("p{i}")), prompt })
        })
        .collect::<Result<Vec<_>>>()?;

    let traces = run_batch(&*backend, &problems, &spec, &params, a.n_samples.unwrap())?;
    match &a.out {
        Some(out) => {
            write_lines(&mut create(out)?, &traces)?;
            snapshot(&sibling(out, "config.json"), global, |c| c.generate = Some(a.clone()))?;
            let summary = serde_json::json!({
                "traces": traces.len(),
                "out": out,
                "terminations": termination_counts(&traces),
            });
            println!("{summary}");
        }
        None => write_lines(&mut io::stdout().lock(), &traces)?,
    }

    let failed = traces.iter().filter(|t| t.termination == Termination::BackendError).count();
    if failed > 0 {
        let first = traces.iter().find_map(|t| t.diagnostic.clone()).unwrap_or_default();
        return Err(Failure::new("backend", format!("{failed} of {} sessions failed: {first}", traces.len())).into());
    }
    Ok(())
}

pub fn curate(mut a: CurateArgs, global: &RunConfig) -> Result<()> {
    required(&a.input, "input")?;
    let defaults = CurationConfig::default();
    let config = CurationConfig {
        granularity: *a.granularity.get_or_insert(DEFAULT_GRANULARITY),
        intervals: *a.k.get_or_insert(DEFAULT_INTERVALS),
        include_origin: *a.include_origin.get_or_insert(defaults.include_origin),
        max_len: *a.max_len.get_or_insert(defaults.max_len),
        caps: a.caps.get_or_insert_with(BTreeMap::new).clone(),
        bucket_width: *a.bucket_width.get_or_insert(defaults.bucket_width),
        seed: *a.seed.get_or_insert(global.seed.unwrap_or(defaults.seed)),
    };
    config.validate()?;

    let samples: Vec<RawSample> = read_jsonl(a.input.as_deref().unwrap())?;
    let (records, report) = curate_samples(samples, &config)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    match &a.out {
        Some(out) => {
            write_lines(&mut create(out)?, &records)?;
            write_json(&sibling(out, "report.json"), &report)?;
            snapshot(&sibling(out, "config.json"), global, |c| c.curate = Some(a.clone()))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        None => {
            write_lines(&mut io::stdout().lock(), &records)?;
            eprintln!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RewardLine<'a> {
    id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample: Option<usize>,
    budget: usize,
    think_length: usize,
    termination: Termination,
    #[serde(flatten)]
    reward: budgetctl::RewardBreakdownF64,
}

#[derive(Debug, Serialize)]
struct RewardSummary {
    traces: usize,
    accuracy: f64,
    format_rate: f64,
    mean_length_reward: f64,
    mean_total: f64,
}

pub fn reward(mut a: RewardArgs, global: &RunConfig) -> Result<()> {
    required(&a.gold, "gold")?;
    required(&a.traces, "traces")?;
    let d = RewardConfig::<f64>::default();
    let config = RewardConfig {
        k1: *a.k1.get_or_insert(d.k1),
        k2: *a.k2.get_or_insert(d.k2),
        k3: *a.k3.get_or_insert(d.k3),
        overrun_penalty: *a.overrun_penalty.get_or_insert(d.overrun_penalty),
    };
    config.validate()?;

    let gold = read_gold(a.gold.as_deref().unwrap())?;
    let traces: Vec<TraceRecord> = read_jsonl(a.traces.as_deref().unwrap())?;
    let mut missing: Vec<String> =
        traces.iter().map(|t| t.id.clone().unwrap_or_default()).filter(|id| !gold.contains_key(id)).collect();
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        return Err(budgetctl::Error::MissingGrades(missing).into());
    }

    let lines = traces
        .iter()
        .map(|t| {
            let reward = score_trace(t, &gold[t.id.as_deref().unwrap_or_default()], &config)?;
            Ok(RewardLine {
                id: t.id.as_deref(),
                sample: t.sample,
                budget: t.budget,
                think_length: t.think_length,
                termination: t.termination,
                reward,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = lines.len().max(1) as f64;
    let mean = |f: &dyn Fn(&RewardLine) -> f64| lines.iter().map(f).sum::<f64>() / n;
    let summary = RewardSummary {
        traces: lines.len(),
        accuracy: mean(&|l| l.reward.correct as u8 as f64),
        format_rate: mean(&|l| l.reward.format_ok as u8 as f64),
        mean_length_reward: mean(&|l| l.reward.length_reward),
        mean_total: mean(&|l| l.reward.total),
    };

    match &a.out {
        Some(dir) => {
            write_lines(&mut create(&dir.join("rewards.jsonl"))?, &lines)?;
            write_json(&dir.join("summary.json"), &summary)?;
            snapshot(&dir.join("config.json"), global, |c| c.reward = Some(a.clone()))?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        None => {
            write_lines(&mut io::stdout().lock(), &lines)?;
            eprintln!("{}", serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}

fn parse_formats(formats: &[String]) -> Result<Vec<ReportFormat>> {
    Ok(formats.iter().map(|f| f.parse::<ReportFormat>()).collect::<budgetctl::Result<_>>()?)
}

pub fn eval(mut a: EvalArgs, global: &RunConfig) -> Result<()> {
    required(&a.traces, "traces")?;
    let traces: Vec<TraceRecord> = read_jsonl(a.traces.as_deref().unwrap())?;
    let gold = a.gold.as_deref().map(read_gold).transpose()?;
    let budgets = a
        .budgets
        .get_or_insert_with(|| {
            let mut seen: Vec<usize> = traces.iter().map(|t| t.budget).collect();
            seen.sort_unstable();
            seen.dedup();
            BudgetList(seen)
        })
        .0
        .clone();
    let formats = parse_formats(
        a.formats.get_or_insert_with(|| vec!["jsonl".into(), "csv".into(), "plot-data".into()]),
    )?;

    let aggregates = aggregate_by_budget(&traces, gold.as_ref())?;
    let report = EvalReport::<f64>::build(&aggregates, &budgets);
    match &a.out {
        Some(dir) => {
            for path in emit_report(&report, &formats, dir)? {
                log::info!("wrote {}", path.display());
            }
            snapshot(&dir.join("config.json"), global, |c| c.eval = Some(a.clone()))?;
        }
        None => print!("{}", render_report(&report, ReportFormat::Jsonl)?),
    }
    Ok(())
}

pub fn simulate(mut a: SimulateArgs, global: &RunConfig) -> Result<()> {
    let budgets = a.budgets.get_or_insert_with(|| "500..10000".parse().unwrap()).0.clone();
    let fraction = *a.policy.get_or_insert(DEFAULT_POLICY_FRACTION);
    let noise = *a.policy_noise.get_or_insert(0.0);
    check_fraction("policy", fraction)?;
    check_noise(noise)?;
    let mut config = SimulationConfig::new(budgets, fraction);
    config.policy = config.policy.with_noise(noise);
    config.problems = *a.problems.get_or_insert(config.problems);
    config.n_samples = *a.n_samples.get_or_insert(config.n_samples);
    let schedule = a.schedule.get_or_insert_with(|| ScheduleKind::default().to_string()).clone();
    config.spec = config
        .spec
        .with_schedule(parse_schedule(&schedule, *a.include_origin.get_or_insert(true))?)
        .with_answer_window(*a.answer_window.get_or_insert(DEFAULT_ANSWER_WINDOW));
    config.sampling.seed = *a.seed.get_or_insert(global.seed.unwrap_or(0));
    if config.problems == 0 {
        return Err(Failure::validation("problems must be >= 1").into());
    }

    let (traces, report) = run_simulation(&config)?;
    if let Some(dir) = &a.out {
        write_lines(&mut create(&dir.join("traces.jsonl"))?, &traces)?;
        emit_report(&report, &[ReportFormat::Jsonl, ReportFormat::Csv, ReportFormat::PlotData], dir)?;
        snapshot(&dir.join("config.json"), global, |c| c.simulate = Some(a.clone()))?;
    }
    print!("{}", render_report(&report, ReportFormat::Jsonl)?);
    Ok(())
}

pub fn preview(plan: Option<&Path>, n: usize, seed: Option<u64>, global: &RunConfig) -> Result<()> {
    let mut plan: CurriculumPlan = match plan {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => global.curriculum.clone().unwrap_or_default(),
    };
    if let Some(seed) = seed.or(global.seed) {
        plan.seed = seed;
    }
    let mut state = plan.start()?;
    let mut out = io::stdout().lock();
    for i in 0..n {
        let draw = state.next_budget()?;
        let line = serde_json::json!({ "draw": i, "budget": draw.budget, "stage": draw.stage });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn markers(budget: usize, schedule: &str, include_origin: Option<bool>) -> Result<()> {
    let spec = BudgetSpec::new(budget).with_schedule(parse_schedule(schedule, include_origin.unwrap_or(true))?);
    println!("{}", spec.schedule()?.preview_json());
    Ok(())
}
