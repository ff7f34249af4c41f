//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use budgetctl::backend::stub::{StubFaults, StubServer};
use budgetctl::backend::{EndpointConfig, HttpBackend, FINAL_ANSWER_TAG};
use budgetctl::curator::{assign_budget, insert_control_tokens};
use budgetctl::curriculum::CurriculumPlan;
use budgetctl::harness::{simulate, BudgetAggregate, SimulationConfig};
use budgetctl::reward::{composite_reward, length_reward, RewardConfig};
use budgetctl::token::count_text_tokens;
use budgetctl::{
    generate_with_budget, make_fixed_schedule, make_ratio_schedule, strip_control_tokens, Backend, BudgetSpec,
    ContinuationRequest, ContinuationResponse, Rational, SamplingParams, ScheduleKind, ScriptedBackend, StopReason,
    Termination, Token, TokenSeq, TraceRecord,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

/// Independent positions oracle: scan every timestep below B.
fn oracle_ratio_positions(budget: usize, k: usize, origin: bool) -> Vec<usize> {
    let step = budget / k;
    (0..budget)
        .filter(|t| t % step == 0)
        .filter(|t| {
            let j = t / step;
            if origin {
                j < k
            } else {
                (1..k).contains(&j)
            }
        })
        .collect()
}

fn ac1_schedules() -> Check {
    for budget in (50..=10_000).step_by(50) {
        for k in [1u32, 2, 4, 8, 16] {
            for origin in [true, false] {
                let s = make_ratio_schedule(budget, k, origin).map_err(|e| e.to_string())?;
                let got = s.positions();
                ensure!(
                    got == oracle_ratio_positions(budget, k as usize, origin),
                    "B={budget} K={k} origin={origin}: {got:?}"
                );
                ensure!(got.windows(2).all(|w| w[0] < w[1]), "not increasing at B={budget} K={k}");
                ensure!(got.iter().all(|&p| p < budget), "position >= B at B={budget} K={k}");
                let expected_len = if origin { k } else { k - 1 } as usize;
                ensure!(got.len() == expected_len, "count {} at B={budget} K={k}", got.len());
                ensure!(s.vocabulary_size() == k as usize, "vocab at B={budget} K={k}");
            }
        }
    }
    for (b, i, n) in [(500, 100, 5), (1000, 100, 10), (10_000, 50, 200), (10_000, 250, 40)] {
        let s = make_fixed_schedule(b, i).map_err(|e| e.to_string())?;
        ensure!(s.len() == n && s.vocabulary_size() == n, "fixed B={b} I={i}: {} entries", s.len());
    }
    Ok(())
}

fn ac2_budget_assignment() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100_000 {
        let len = rng.gen_range(1..=12_000usize);
        let t = *[10usize, 50, 100].choose(&mut rng).unwrap();
        let b = assign_budget(len, t).map_err(|e| e.to_string())?;
        ensure!(b % t == 0, "B={b} not a multiple of T={t}");
        ensure!(len <= b, "|y|={len} > B={b}");
        if len % t == 0 {
            ensure!(b == len, "exact multiple |y|={len} got B={b}");
        } else {
            ensure!(b - len < t, "slack too large |y|={len} T={t} B={b}");
        }
    }
    Ok(())
}

fn ac3_length_reward() -> Check {
    const TOL: f64 = 1e-12;
    let r = 16.0_f64;
    for budget in [2000usize, 4000, 6000, 10_000] {
        let at_quarter = length_reward(budget * 5 / 4, budget, r).map_err(|e| e.to_string())?;
        ensure!(at_quarter == 0.0, "reward(1.25B) = {at_quarter} at B={budget}");
        let at_budget = length_reward(budget, budget, r).unwrap();
        ensure!((at_budget - 1.0).abs() <= TOL, "reward(B) = {at_budget}");

        let under: Vec<f64> = (0..=1000).map(|i| length_reward(i * budget / 1000, budget, r).unwrap()).collect();
        ensure!(under.windows(2).all(|w| w[1] > w[0]), "not increasing below B={budget}");
        let zero_at = budget * 5 / 4;
        let mut over_lens: Vec<usize> = (0..=1000).map(|i| budget + i * (zero_at - budget) / 1000).collect();
        over_lens.dedup();
        let over: Vec<f64> = over_lens.iter().map(|&l| length_reward(l, budget, r).unwrap()).collect();
        ensure!(over.windows(2).all(|w| w[1] < w[0]), "not decreasing above B={budget}");
        for extra in [1usize, 10, 1000, 100_000] {
            ensure!(length_reward(zero_at + extra, budget, r).unwrap() == 0.0, "nonzero beyond 1.25B");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(budget as u64);
        for _ in 0..1000 {
            let d = rng.gen_range(1..=budget / 4);
            let lo = length_reward(budget - d, budget, r).unwrap();
            let hi = length_reward(budget + d, budget, r).unwrap();
            ensure!(lo > hi, "asymmetry fails at B={budget} d={d}: {lo} <= {hi}");
        }
    }
    Ok(())
}

fn ac4_composite_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100_000 {
        let cfg = RewardConfig::<f64> {
            k1: rng.gen_range(0.0..2.0),
            k2: rng.gen_range(0.0..2.0),
            k3: rng.gen_range(0.0..2.0),
            overrun_penalty: rng.gen_range(1.0001..64.0),
        };
        let budget = rng.gen_range(1..20_000usize);
        let len = rng.gen_range(0..3 * budget);
        let b = composite_reward(rng.gen(), rng.gen(), len, budget, &cfg).map_err(|e| e.to_string())?;
        ensure!(b.total >= 0.0 && b.total <= cfg.max_total(), "total {} out of range for {cfg:?}", b.total);
    }
    let defaults = RewardConfig::<f64>::default();
    let best = composite_reward(true, true, 4000, 4000, &defaults).unwrap().total;
    ensure!(best == 1.0, "default max total = {best}");
    ensure!(defaults.max_total() == 1.0, "k1+k2+k3 = {}", defaults.max_total());
    Ok(())
}

fn ac5_enforcement() -> Check {
    let backend = ScriptedBackend::never_stopping();
    let tag = count_text_tokens(FINAL_ANSWER_TAG);
    let kinds = [
        ScheduleKind::Ratio { intervals: 8, include_origin: true },
        ScheduleKind::Ratio { intervals: 8, include_origin: false },
        ScheduleKind::FixedInterval { interval: 100, max_budget: Some(10_000) },
        ScheduleKind::None,
    ];
    for budget in [500usize, 2000, 10_000] {
        for kind in kinds {
            let spec = BudgetSpec::new(budget).with_schedule(kind);
            let t = generate_with_budget(&backend, "Solve.", &spec, &SamplingParams::default()).map_err(|e| e.to_string())?;
            ensure!(t.think_length == budget, "think_length {} at B={budget} {kind}", t.think_length);
            ensure!(t.answer_length <= 50, "answer {} > 50", t.answer_length);
            ensure!(t.total_length() <= budget + tag + 50, "total {} over envelope", t.total_length());
            let schedule = spec.schedule().unwrap().positions();
            ensure!(t.injected_positions == schedule, "injected {:?} != schedule at B={budget} {kind}", t.injected_positions);
            ensure!(
                TokenSeq::from_text(&t.think_text).control_positions() == schedule,
                "markers not at scheduled indices"
            );
        }
    }
    Ok(())
}

fn ac6_curation_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seps = [" ", "  ", "\n", "\t", " \n"];
    for _ in 0..10_000 {
        let n = rng.gen_range(1..300);
        let mut text = String::new();
        for i in 0..n {
            if i > 0 || rng.gen_bool(0.2) {
                text.push_str(seps.choose(&mut rng).unwrap());
            }
            let w = rng.gen_range(1..8);
            text.extend((0..w).map(|_| rng.gen_range(b'a'..=b'z') as char));
        }
        let y = TokenSeq::from_text(&text);
        let k = *[1u32, 2, 4, 8, 16].choose(&mut rng).unwrap();
        let budget = (y.len() + rng.gen_range(0..100)).max(k as usize);
        let s = make_ratio_schedule(budget, k, rng.gen()).map_err(|e| e.to_string())?;
        let inserted = insert_control_tokens(&y, &s);
        ensure!(strip_control_tokens(&inserted) == y, "token round trip failed for {text:?}");
        ensure!(
            budgetctl::token::strip_control_markers(&inserted.render()) == text,
            "text round trip failed for {text:?}"
        );
    }
    Ok(())
}

fn ac7_curriculum() -> Check {
    let mut state = CurriculumPlan::default().start().map_err(|e| e.to_string())?;
    let staged: Vec<usize> = (&mut state).take(4).map(|d| d.budget).collect();
    ensure!(staged == vec![6000, 4000, 3000, 2000], "staged {staged:?}");
    let n = 10_000;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in state.take(n) {
        ensure!([6000, 4000, 3000, 2000].contains(&d.budget), "draw {} outside stage set", d.budget);
        *counts.entry(d.budget).or_default() += 1;
    }
    for (b, c) in &counts {
        let f = *c as f64 / n as f64;
        ensure!((f - 0.25).abs() <= 0.02, "budget {b} frequency {f}");
    }
    ensure!(counts.len() == 4, "missing budgets {counts:?}");
    Ok(())
}

fn ac8_end_to_end() -> Check {
    let budgets: Vec<usize> = (500..=10_000).step_by(500).collect();
    let (_, report) = simulate(&SimulationConfig::new(budgets.clone(), 0.9)).map_err(|e| e.to_string())?;
    for b in &budgets {
        let row = report.row(*b).ok_or(format!("no row for {b}"))?;
        ensure!(row.following_ratio == Some(1.0), "following ratio {:?} at B={b}", row.following_ratio);
        let u = row.utilization.ok_or("no utilization")?;
        ensure!((0.85..=0.95).contains(&u), "utilization {u} at B={b}");
    }
    let (traces, report) = simulate(&SimulationConfig::new(budgets.clone(), 1.5)).map_err(|e| e.to_string())?;
    for row in &report.rows {
        ensure!(row.following_ratio == Some(0.0), "overrun following ratio {:?}", row.following_ratio);
    }
    for t in &traces {
        ensure!(t.think_length == t.budget, "overrun trace length {} at B={}", t.think_length, t.budget);
        ensure!(t.termination != Termination::NaturalWithinBudget, "overrun trace ended naturally");
    }
    Ok(())
}

fn random_trace(rng: &mut ChaCha8Rng) -> (TraceRecord, bool) {
    let budget = *[500usize, 1000, 2000].choose(rng).unwrap();
    let termination = *Termination::ALL.choose(rng).unwrap();
    let think_length = match termination {
        Termination::NaturalWithinBudget => rng.gen_range(1..=budget),
        Termination::BackendError => rng.gen_range(0..=budget),
        _ => budget,
    };
    let trace = TraceRecord {
        id: Some(format!("p{}", rng.gen_range(0..25))),
        sample: None,
        seed: rng.gen(),
        prompt: String::new(),
        think_text: String::new(),
        injected_positions: vec![],
        answer_text: String::new(),
        termination,
        think_length,
        answer_length: 0,
        tag_length: 0,
        budget,
        diagnostic: None,
    };
    (trace, rng.gen())
}

/// Brute-force metrics straight from the trace list, in exact arithmetic.
fn oracle_metrics(traces: &[(TraceRecord, bool)], budget: usize) -> (Rational, Option<Rational>, Rational, Rational) {
    let set: Vec<_> = traces.iter().filter(|(t, _)| t.budget == budget).collect();
    let n = set.len() as i64;
    let natural: Vec<_> = set.iter().filter(|(t, _)| t.termination == Termination::NaturalWithinBudget).collect();
    let following = Rational::new(natural.len() as i64, n);
    let util = (!natural.is_empty()).then(|| {
        natural
            .iter()
            .map(|(t, _)| Rational::new(t.think_length as i64, budget as i64))
            .fold(Rational::from_integer(0), |a, b| a + b)
            / Rational::from_integer(natural.len() as i64)
    });
    let gap = set
        .iter()
        .map(|(t, _)| Rational::from_integer(t.think_length.abs_diff(budget) as i64))
        .fold(Rational::from_integer(0), |a, b| a + b)
        / Rational::from_integer(n);
    let mut per_problem: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (t, c) in &set {
        per_problem.entry(t.id.as_deref().unwrap()).or_default().push(*c);
    }
    let pass = per_problem
        .values()
        .map(|v| Rational::new(v.iter().filter(|&&c| c).count() as i64, v.len() as i64))
        .fold(Rational::from_integer(0), |a, b| a + b)
        / Rational::from_integer(per_problem.len() as i64);
    (following, util, gap, pass)
}

fn ac9_aggregation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let traces: Vec<(TraceRecord, bool)> = (0..1000).map(|_| random_trace(&mut rng)).collect();
    for round in 0..50 {
        let parts = rng.gen_range(1..=12);
        for budget in [500usize, 1000, 2000] {
            let mut chunks: Vec<BudgetAggregate> = (0..parts).map(|_| BudgetAggregate::empty(budget)).collect();
            for (t, c) in traces.iter().filter(|(t, _)| t.budget == budget) {
                let i = rng.gen_range(0..parts);
                chunks[i].add(t, Some(*c)).map_err(|e| e.to_string())?;
            }
            chunks.shuffle(&mut rng);
            let merged = chunks
                .into_iter()
                .try_fold(BudgetAggregate::empty(budget), |acc, c| acc.merge(c))
                .map_err(|e| e.to_string())?;
            let (f, u, g, p) = oracle_metrics(&traces, budget);
            ensure!(merged.following_ratio::<Rational>().unwrap() == f, "following mismatch round {round}");
            ensure!(merged.utilization::<Rational>().ok() == u, "utilization mismatch round {round}");
            ensure!(merged.mean_abs_gap::<Rational>().unwrap() == g, "gap mismatch round {round}");
            ensure!(merged.pass_at_1::<Rational>().unwrap() == p, "pass@1 mismatch round {round}");
        }
    }
    Ok(())
}

struct Fixed(usize, StopReason);

impl Backend for Fixed {
    fn continue_from(&self, _: &ContinuationRequest) -> ContinuationResponse {
        ContinuationResponse::new((0..self.0).map(|_| Token::sampled(" x")).collect(), self.1)
    }
}

fn ac10_protocol() -> Check {
    let req = |cap| ContinuationRequest {
        context: "Q<think>".into(),
        max_tokens: cap,
        stop_markers: vec!["</think>".into()],
        sampling: SamplingParams::default(),
    };
    let client = |server: &StubServer, retries| {
        let mut cfg = EndpointConfig::new(server.base_url());
        cfg.retries = retries;
        cfg.timeout_ms = 5000;
        HttpBackend::new(cfg)
    };
    let io = |e: std::io::Error| e.to_string();

    let server = StubServer::spawn(Fixed(5, StopReason::EndOfSequence), StubFaults::default()).map_err(io)?;
    let r = client(&server, 0).continue_from(&req(100));
    ensure!(r.tokens.len() == 5 && r.stop_reason == StopReason::EndOfSequence, "eos echo: {r:?}");

    let server = StubServer::spawn(Fixed(3, StopReason::StopMarker), StubFaults::default()).map_err(io)?;
    let r = client(&server, 0).continue_from(&req(100));
    ensure!(r.stop_reason == StopReason::StopMarker, "stop marker mapping: {:?}", r.stop_reason);

    for cap in [1usize, 7, 40] {
        let faults = StubFaults { extra_tokens: 10, ..Default::default() };
        let server = StubServer::spawn(ScriptedBackend::never_stopping(), faults).map_err(io)?;
        let r = client(&server, 0).continue_from(&req(cap));
        ensure!(r.tokens.len() == cap && r.stop_reason == StopReason::CapReached, "cap {cap}: {} tokens", r.tokens.len());
    }

    for run in 0..3 {
        let faults = StubFaults { drop_after_tokens: Some(2), drop_requests: 2, ..Default::default() };
        let server = StubServer::spawn(ScriptedBackend::never_stopping(), faults).map_err(io)?;
        let r = client(&server, 2).continue_from(&req(6));
        ensure!(r.tokens.len() == 6, "recovery run {run}: {} tokens", r.tokens.len());
        ensure!(server.requests() == 3, "recovery run {run}: {} requests", server.requests());
    }

    let faults = StubFaults { drop_after_tokens: Some(2), drop_requests: usize::MAX, ..Default::default() };
    let server = StubServer::spawn(ScriptedBackend::never_stopping(), faults).map_err(io)?;
    let r = client(&server, 1).continue_from(&req(6));
    ensure!(r.stop_reason == StopReason::Error && r.tokens.is_empty(), "exhausted retries: {r:?}");
    ensure!(server.requests() == 2, "exhausted retries made {} requests", server.requests());
    Ok(())
}

struct Criterion {
    id: &'static str,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: "AC1", name: "schedule correctness", limit: secs(5), run: ac1_schedules },
        Criterion { id: "AC2", name: "budget assignment", limit: secs(5), run: ac2_budget_assignment },
        Criterion { id: "AC3", name: "length reward", limit: secs(5), run: ac3_length_reward },
        Criterion { id: "AC4", name: "composite reward bound", limit: secs(5), run: ac4_composite_bound },
        Criterion { id: "AC5", name: "budget enforcement", limit: secs(30), run: ac5_enforcement },
        Criterion { id: "AC6", name: "curation round trip", limit: secs(10), run: ac6_curation_round_trip },
        Criterion { id: "AC7", name: "curriculum", limit: secs(5), run: ac7_curriculum },
        Criterion { id: "AC8", name: "end-to-end synthetic", limit: secs(60), run: ac8_end_to_end },
        Criterion { id: "AC9", name: "aggregation", limit: secs(5), run: ac9_aggregation },
        Criterion { id: "AC10", name: "streaming protocol", limit: secs(30), run: ac10_protocol },
    ];

    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.id.eq_ignore_ascii_case(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed <= c.limit {
                Ok(())
            } else {
                Err(format!("took {elapsed:.2?}, limit {:?}", c.limit))
            }
        });
        match outcome {
            Ok(()) => println!("PASS {:<4} {:<24} {:>9.2?}", c.id, c.name, elapsed),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:<4} {:<24} {:>9.2?}  {msg}", c.id, c.name, elapsed);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
