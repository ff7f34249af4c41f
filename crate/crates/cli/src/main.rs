mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CurateArgs, EvalArgs, GenerateArgs, RewardArgs, RunConfig, SimulateArgs};

/// Budget-controlled reasoning: curation, generation, rewards and evaluation.
#[derive(Debug, Parser)]
#[command(name = "budgetctl", version)]
struct Cli {
    /// TOML or JSON run config. Flags override it; it overrides defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build budget-annotated SFT records from raw samples.
    Curate(CurateArgs),
    /// Generate traces under a thinking budget.
    Generate(GenerateArgs),
    /// Score stored traces with the composite reward.
    Reward(RewardArgs),
    /// Per-budget adherence and accuracy report.
    Eval(EvalArgs),
    /// Curriculum and control-marker schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleCommand,
    },
    /// Sweep the synthetic budget-following policy over budgets.
    Simulate(SimulateArgs),
}

#[derive(Debug, Subcommand)]
enum ScheduleCommand {
    /// Print the first N curriculum budget draws.
    Preview {
        /// JSON curriculum plan; falls back to the config's [curriculum] table.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the control markers inserted for one budget.
    Markers {
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "ratio:8")]
        schedule: String,
        #[arg(long, value_name = "BOOL")]
        include_origin: Option<bool>,
    },
}

/// An error with a machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure::new("config", message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Failure::new("validation", message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn kind_of(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<budgetctl::Error>() {
            use budgetctl::Error::*;
            return match e {
                InvalidParameter(_) | BudgetMismatch(..) | DuplicateBudgetSuffix => "validation",
                UndefinedMetric(_) => "metric",
                MissingGrades(_) => "missing_grades",
                CurriculumExhausted => "curriculum",
                Io { .. } => "io",
                Json(_) | Csv(_) => "input",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn report(kind: &str, message: String) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
    match kind {
        "usage" | "config" | "validation" => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Curate(args) => commands::curate(args.over(file.curate.clone()), &file),
        Command::Generate(args) => commands::generate(args.over(file.generate.clone()), &file),
        Command::Reward(args) => commands::reward(args.over(file.reward.clone()), &file),
        Command::Eval(args) => commands::eval(args.over(file.eval.clone()), &file),
        Command::Simulate(args) => commands::simulate(args.over(file.simulate.clone()), &file),
        Command::Schedule { action: ScheduleCommand::Preview { plan, n, seed } } => {
            commands::preview(plan.as_deref(), n, seed, &file)
        }
        Command::Schedule { action: ScheduleCommand::Markers { budget, schedule, include_origin } } => {
            commands::markers(budget, &schedule, include_origin)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return report("usage", e.to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(kind_of(&e), format!("{e:#}")),
    }
}
