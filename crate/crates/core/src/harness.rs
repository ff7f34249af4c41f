//! Budget-adherence metrics over trace collections.
//!
//! Metrics are computed from [`BudgetAggregate`]s, which hold integer sums
//! only. Merging aggregates is therefore exact, associative and commutative,
//! and partial aggregates built in parallel combine to the single-pass result.
//!
//! - following ratio: share of traces with a natural stop within the budget
//! - utilization: mean `think_length / B` over those natural traces
//! - mean absolute gap: mean `|think_length - B|` over all traces
//! - pass@1: per-problem mean correctness, averaged over problems

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BudgetPolicy, SamplingParams};
use crate::curator::augment_prompt;
use crate::error::{Error, Result};
use crate::injector::{run_batch, Problem, Termination, TraceRecord};
use crate::scalar::Scalar;
use crate::schedule::BudgetSpec;

/// Report schema version written with every JSONL row.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeTally {
    pub correct: u64,
    pub total: u64,
}

/// Integer sums for one budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAggregate {
    pub budget: usize,
    pub traces: u64,
    pub natural: u64,
    pub natural_length_sum: u64,
    pub abs_gap_sum: u64,
    pub terminations: BTreeMap<Termination, u64>,
    pub grades: BTreeMap<String, GradeTally>,
}

impl BudgetAggregate {
    pub fn empty(budget: usize) -> Self {
        BudgetAggregate {
            budget,
            traces: 0,
            natural: 0,
            natural_length_sum: 0,
            abs_gap_sum: 0,
            terminations: BTreeMap::new(),
            grades: BTreeMap::new(),
        }
    }

    /// Aggregate of `traces`, all of which must carry `budget`.
    pub fn from_traces<'a>(budget: usize, traces: impl IntoIterator<Item = &'a TraceRecord>) -> Result<Self> {
        let mut agg = Self::empty(budget);
        for t in traces {
            agg.add(t, None)?;
        }
        Ok(agg)
    }

    /// Adds one trace and, optionally, its correctness under the trace's problem id.
    pub fn add(&mut self, trace: &TraceRecord, correct: Option<bool>) -> Result<()> {
        if trace.budget != self.budget {
            return Err(Error::BudgetMismatch(self.budget, trace.budget));
        }
        self.traces += 1;
        if trace.termination == Termination::NaturalWithinBudget {
            self.natural += 1;
            self.natural_length_sum += trace.think_length as u64;
        }
        self.abs_gap_sum += trace.think_length.abs_diff(trace.budget) as u64;
        *self.terminations.entry(trace.termination).or_default() += 1;
        if let Some(c) = correct {
            let id = trace.id.clone().unwrap_or_default();
            let tally = self.grades.entry(id).or_default();
            tally.total += 1;
            tally.correct += u64::from(c);
        }
        Ok(())
    }

    pub fn merge(mut self, other: BudgetAggregate) -> Result<Self> {
        if self.budget != other.budget {
            return Err(Error::BudgetMismatch(self.budget, other.budget));
        }
        self.traces += other.traces;
        self.natural += other.natural;
        self.natural_length_sum += other.natural_length_sum;
        self.abs_gap_sum += other.abs_gap_sum;
        for (k, v) in other.terminations {
            *self.terminations.entry(k).or_default() += v;
        }
        for (id, g) in other.grades {
            let t = self.grades.entry(id).or_default();
            t.correct += g.correct;
            t.total += g.total;
        }
        Ok(self)
    }

    pub fn following_ratio<S: Scalar>(&self) -> Result<S> {
        if self.traces == 0 {
            return Err(Error::UndefinedMetric(format!("following ratio at B={} has no traces", self.budget)));
        }
        Ok(S::from_ratio(self.natural, self.traces))
    }

    pub fn utilization<S: Scalar>(&self) -> Result<S> {
        if self.natural == 0 {
            return Err(Error::UndefinedMetric(format!(
                "utilization at B={} has no naturally terminating traces",
                self.budget
            )));
        }
        Ok(S::from_ratio(self.natural_length_sum, self.natural * self.budget as u64))
    }

    pub fn mean_abs_gap<S: Scalar>(&self) -> Result<S> {
        if self.traces == 0 {
            return Err(Error::UndefinedMetric(format!("gap at B={} has no traces", self.budget)));
        }
        Ok(S::from_ratio(self.abs_gap_sum, self.traces))
    }

    pub fn pass_at_1<S: Scalar>(&self) -> Result<S> {
        pass_at_1_tallies(&self.grades)
    }
}

fn pass_at_1_tallies<S: Scalar>(grades: &BTreeMap<String, GradeTally>) -> Result<S> {
    if grades.is_empty() {
        return Err(Error::UndefinedMetric("pass@1 needs at least one graded problem".into()));
    }
    let missing: Vec<String> = grades
        .iter()
        .filter(|(_, g)| g.total == 0)
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGrades(missing));
    }
    let sum = grades
        .values()
        .fold(S::zero(), |acc, g| acc + S::from_ratio(g.correct, g.total));
    Ok(sum / S::from_count(grades.len() as u64))
}

/// Fraction of traces that stopped naturally within the budget.
pub fn following_ratio<S: Scalar>(traces: &[TraceRecord]) -> Result<S> {
    single_budget(traces)?.following_ratio()
}

/// Mean `think_length / B` over naturally terminating traces.
pub fn utilization<S: Scalar>(traces: &[TraceRecord]) -> Result<S> {
    single_budget(traces)?.utilization()
}

/// Mean `|think_length - B|`.
pub fn mean_abs_gap<S: Scalar>(traces: &[TraceRecord]) -> Result<S> {
    single_budget(traces)?.mean_abs_gap()
}

/// Mean over problems of the per-problem mean correctness.
pub fn pass_at_1<S: Scalar>(graded: &BTreeMap<String, Vec<bool>>) -> Result<S> {
    let tallies = graded
        .iter()
        .map(|(id, v)| {
            (
                id.clone(),
                GradeTally {
                    correct: v.iter().filter(|&&c| c).count() as u64,
                    total: v.len() as u64,
                },
            )
        })
        .collect();
    pass_at_1_tallies(&tallies)
}

fn single_budget(traces: &[TraceRecord]) -> Result<BudgetAggregate> {
    let first = traces
        .first()
        .ok_or_else(|| Error::UndefinedMetric("empty trace set".into()))?;
    BudgetAggregate::from_traces(first.budget, traces)
}

/// Groups traces by budget, attaching grades by `(problem id)` when a gold
/// map is given. Traces whose id has no gold answer are an error.
pub fn aggregate_by_budget(
    traces: &[TraceRecord],
    gold: Option<&BTreeMap<String, String>>,
) -> Result<BTreeMap<usize, BudgetAggregate>> {
    if let Some(gold) = gold {
        let mut missing: Vec<String> = traces
            .iter()
            .map(|t| t.id.clone().unwrap_or_default())
            .filter(|id| !gold.contains_key(id))
            .collect();
        missing.sort();
        missing.dedup();
        if !missing.is_empty() {
            return Err(Error::MissingGrades(missing));
        }
    }
    let mut out: BTreeMap<usize, BudgetAggregate> = BTreeMap::new();
    for t in traces {
        let correct = gold.map(|g| {
            let reference = &g[t.id.as_deref().unwrap_or_default()];
            crate::reward::answer_correct(&t.answer_text, reference).correct
        });
        out.entry(t.budget)
            .or_insert_with(|| BudgetAggregate::empty(t.budget))
            .add(t, correct)?;
    }
    Ok(out)
}

/// One report row. Metrics that are undefined for the row are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow<S> {
    pub budget: usize,
    pub pass_at_1: Option<S>,
    pub following_ratio: Option<S>,
    pub utilization: Option<S>,
    pub mean_abs_gap: Option<S>,
    pub traces: u64,
    pub natural_within_budget: u64,
    pub truncated_at_budget: u64,
    pub answer_window_exhausted: u64,
    pub backend_error: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<S> {
    pub rows: Vec<ReportRow<S>>,
}

impl<S: Scalar> EvalReport<S> {
    /// One row per requested budget (plus any other budget seen), ascending.
    pub fn build(aggregates: &BTreeMap<usize, BudgetAggregate>, budgets: &[usize]) -> Self {
        let mut all: Vec<usize> = budgets.iter().copied().chain(aggregates.keys().copied()).collect();
        all.sort_unstable();
        all.dedup();
        let rows = all
            .into_iter()
            .map(|b| {
                let agg = aggregates.get(&b).cloned().unwrap_or_else(|| BudgetAggregate::empty(b));
                let count = |t: Termination| agg.terminations.get(&t).copied().unwrap_or(0);
                ReportRow {
                    budget: b,
                    pass_at_1: agg.pass_at_1().ok(),
                    following_ratio: agg.following_ratio().ok(),
                    utilization: agg.utilization().ok(),
                    mean_abs_gap: agg.mean_abs_gap().ok(),
                    traces: agg.traces,
                    natural_within_budget: count(Termination::NaturalWithinBudget),
                    truncated_at_budget: count(Termination::TruncatedAtBudget),
                    answer_window_exhausted: count(Termination::AnswerWindowExhausted),
                    backend_error: count(Termination::BackendError),
                }
            })
            .collect();
        EvalReport { rows }
    }

    pub fn row(&self, budget: usize) -> Option<&ReportRow<S>> {
        self.rows.iter().find(|r| r.budget == budget)
    }

    /// Same report in `f64`, the form written to disk.
    pub fn to_f64(&self) -> EvalReport<f64> {
        let conv = |v: Option<S>| v.and_then(|x| x.to_f64());
        EvalReport {
            rows: self
                .rows
                .iter()
                .map(|r| ReportRow {
                    budget: r.budget,
                    pass_at_1: conv(r.pass_at_1),
                    following_ratio: conv(r.following_ratio),
                    utilization: conv(r.utilization),
                    mean_abs_gap: conv(r.mean_abs_gap),
                    traces: r.traces,
                    natural_within_budget: r.natural_within_budget,
                    truncated_at_budget: r.truncated_at_budget,
                    answer_window_exhausted: r.answer_window_exhausted,
                    backend_error: r.backend_error,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Jsonl,
    Csv,
    PlotData,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(ReportFormat::Jsonl),
            "csv" => Ok(ReportFormat::Csv),
            "plot-data" => Ok(ReportFormat::PlotData),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

#[derive(Serialize)]
struct JsonlRow<'a> {
    schema_version: u32,
    #[serde(flatten)]
    row: &'a ReportRow<f64>,
}

#[derive(Serialize)]
struct PlotSeries {
    metric: &'static str,
    x_label: &'static str,
    points: Vec<(usize, f64)>,
}

/// Renders the report in the given format.
pub fn render_report<S: Scalar>(report: &EvalReport<S>, format: ReportFormat) -> Result<String> {
    let report = report.to_f64();
    match format {
        ReportFormat::Jsonl => {
            let mut out = String::new();
            for row in &report.rows {
                out.push_str(&serde_json::to_string(&JsonlRow {
                    schema_version: REPORT_SCHEMA_VERSION,
                    row,
                })?);
                out.push('\n');
            }
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &report.rows {
                w.serialize(row)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        ReportFormat::PlotData => {
            let series = |metric: &'static str, pick: fn(&ReportRow<f64>) -> Option<f64>| PlotSeries {
                metric,
                x_label: "budget",
                points: report.rows.iter().filter_map(|r| pick(r).map(|y| (r.budget, y))).collect(),
            };
            let all = vec![
                series("pass_at_1", |r| r.pass_at_1),
                series("following_ratio", |r| r.following_ratio),
                series("utilization", |r| r.utilization),
                series("mean_abs_gap", |r| r.mean_abs_gap),
            ];
            Ok(serde_json::to_string_pretty(&serde_json::json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "series": all,
            }))? + "\n")
        }
    }
}

fn file_name(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Jsonl => "report.jsonl",
        ReportFormat::Csv => "report.csv",
        ReportFormat::PlotData => "plot_data.json",
    }
}

/// Writes the report into `dir` in each requested format; returns the paths.
pub fn emit_report<S: Scalar>(report: &EvalReport<S>, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for &format in formats {
        let path = dir.join(file_name(format));
        let body = render_report(report, format)?;
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(body.as_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parameters of a synthetic budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub budgets: Vec<usize>,
    pub policy: BudgetPolicy,
    /// Spec applied at every budget; its `budget` field is overridden.
    pub spec: BudgetSpec,
    pub problems: usize,
    pub n_samples: usize,
    pub sampling: SamplingParams,
}

impl SimulationConfig {
    pub fn new(budgets: Vec<usize>, target_fraction: f64) -> Self {
        SimulationConfig {
            budgets,
            policy: BudgetPolicy::new(target_fraction),
            spec: BudgetSpec::new(1),
            problems: 4,
            n_samples: 1,
            sampling: SamplingParams::default(),
        }
    }
}

/// Runs the budget-following policy at every budget and reports adherence.
pub fn simulate(config: &SimulationConfig) -> Result<(Vec<TraceRecord>, EvalReport<f64>)> {
    let mut traces = Vec::new();
    for &budget in &config.budgets {
        let spec = BudgetSpec { budget, ..config.spec };
        let problems: Vec<Problem> = (0..config.problems)
            .map(|i| {
                Ok(Problem {
                    id: format!("sim-{i}"),
                    prompt: augment_prompt(&format!("Synthetic problem {i}. "), budget)?,
                })
            })
            .collect::<Result<_>>()?;
        traces.extend(run_batch(&config.policy, &problems, &spec, &config.sampling, config.n_samples)?);
    }
    let aggregates = aggregate_by_budget(&traces, None)?;
    let report = EvalReport::build(&aggregates, &config.budgets);
    Ok((traces, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Rational;

    fn trace(budget: usize, len: usize, termination: Termination) -> TraceRecord {
        TraceRecord {
            id: Some("p".into()),
            sample: None,
            seed: 0,
            prompt: String::new(),
            think_text: String::new(),
            injected_positions: vec![],
            answer_text: String::new(),
            termination,
            think_length: len,
            answer_length: 0,
            tag_length: 0,
            budget,
            diagnostic: None,
        }
    }

    use Termination::*;

    #[test]
    fn following_ratio_examples() {
        let all_natural = vec![trace(100, 50, NaturalWithinBudget); 3];
        assert_eq!(following_ratio::<f64>(&all_natural).unwrap(), 1.0);
        let all_cut = vec![trace(100, 100, TruncatedAtBudget); 3];
        assert_eq!(following_ratio::<f64>(&all_cut).unwrap(), 0.0);
        let mut mixed = vec![trace(100, 50, NaturalWithinBudget); 3];
        mixed.push(trace(100, 100, AnswerWindowExhausted));
        assert_eq!(following_ratio::<f64>(&mixed).unwrap(), 0.75);
        assert!(matches!(following_ratio::<f64>(&[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization::<f64>(&[trace(1000, 1000, NaturalWithinBudget)]).unwrap(), 1.0);
        let ts = vec![
            trace(1000, 400, NaturalWithinBudget),
            trace(1000, 600, NaturalWithinBudget),
            trace(1000, 1000, TruncatedAtBudget),
        ];
        assert_eq!(utilization::<f64>(&ts).unwrap(), 0.5);
        assert!(utilization::<f64>(&[trace(1000, 1000, TruncatedAtBudget)]).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(mean_abs_gap::<f64>(&[trace(1000, 1000, TruncatedAtBudget)]).unwrap(), 0.0);
        let ts = vec![trace(1000, 900, NaturalWithinBudget), trace(1000, 1100, NaturalWithinBudget)];
        assert_eq!(mean_abs_gap::<f64>(&ts).unwrap(), 100.0);
    }

    #[test]
    fn pass_at_1_examples() {
        let g: BTreeMap<String, Vec<bool>> = [("a", true), ("b", false), ("c", true), ("d", false)]
            .map(|(k, v)| (k.to_string(), vec![v]))
            .into();
        assert_eq!(pass_at_1::<f64>(&g).unwrap(), 0.5);

        let mut g = BTreeMap::new();
        g.insert("x".to_string(), (0..64).map(|i| i < 32).collect::<Vec<_>>());
        g.insert("y".to_string(), vec![true; 64]);
        assert_eq!(pass_at_1::<Rational>(&g).unwrap(), Rational::new(3, 4));

        let all: BTreeMap<String, Vec<bool>> = [("a".to_string(), vec![true, true])].into();
        assert_eq!(pass_at_1::<f64>(&all).unwrap(), 1.0);

        g.insert("z".to_string(), vec![]);
        match pass_at_1::<f64>(&g) {
            Err(Error::MissingGrades(ids)) => assert_eq!(ids, vec!["z".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn merge_identity_and_mismatch() {
        let a = BudgetAggregate::from_traces(100, &[trace(100, 40, NaturalWithinBudget)]).unwrap();
        assert_eq!(a.clone().merge(BudgetAggregate::empty(100)).unwrap(), a);
        assert!(matches!(a.merge(BudgetAggregate::empty(200)), Err(Error::BudgetMismatch(100, 200))));
    }

    #[test]
    fn gold_lookup_reports_missing_ids() {
        let gold: BTreeMap<String, String> = [("q".to_string(), "4".to_string())].into();
        let err = aggregate_by_budget(&[trace(100, 10, NaturalWithinBudget)], Some(&gold)).unwrap_err();
        assert!(matches!(err, Error::MissingGrades(ids) if ids == vec!["p".to_string()]));
    }

    fn sample_report() -> EvalReport<f64> {
        let ts = vec![
            trace(500, 450, NaturalWithinBudget),
            trace(500, 500, TruncatedAtBudget),
            trace(1000, 900, NaturalWithinBudget),
        ];
        EvalReport::build(&aggregate_by_budget(&ts, None).unwrap(), &[500, 1000, 2000])
    }

    #[test]
    fn report_has_row_per_budget() {
        let r = sample_report();
        assert_eq!(r.rows.iter().map(|r| r.budget).collect::<Vec<_>>(), vec![500, 1000, 2000]);
        assert_eq!(r.row(500).unwrap().following_ratio, Some(0.5));
        assert_eq!(r.row(2000).unwrap().following_ratio, None);
        assert_eq!(r.row(2000).unwrap().traces, 0);
    }

    #[test]
    fn csv_and_jsonl_agree() {
        let r = sample_report();
        let jsonl = render_report(&r, ReportFormat::Jsonl).unwrap();
        let csv_text = render_report(&r, ReportFormat::Csv).unwrap();
        let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
        let from_csv: Vec<ReportRow<f64>> = rdr.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        let from_jsonl: Vec<ReportRow<f64>> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(from_csv, from_jsonl);
        assert_eq!(from_jsonl, r.rows);
        assert!(jsonl.lines().all(|l| l.contains("\"schema_version\":1")));
    }

    #[test]
    fn emission_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        let all = [ReportFormat::Jsonl, ReportFormat::Csv, ReportFormat::PlotData];
        let paths = emit_report(&r, &all, dir.path()).unwrap();
        let first: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_report(&r, &all, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = paths.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let plot: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
        assert_eq!(plot["series"][1]["metric"], "following_ratio");
        assert_eq!(plot["series"][1]["points"][0], serde_json::json!([500, 0.5]));
    }

    #[test]
    fn simulate_small_sweep() {
        let cfg = SimulationConfig::new(vec![500, 800], 0.9);
        let (traces, report) = simulate(&cfg).unwrap();
        assert_eq!(traces.len(), 8);
        for row in &report.rows {
            assert_eq!(row.following_ratio, Some(1.0));
            let u = row.utilization.unwrap();
            assert!((0.85..=0.95).contains(&u), "{u}");
        }
    }
}
