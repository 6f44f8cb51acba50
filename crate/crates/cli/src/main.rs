mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Layer, PlannerKind};

/// Auditable agent-driven search over time-series model configurations.
#[derive(Debug, Parser)]
#[command(name = "tsloop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a full search and write report.json, audit.log and winner.config.json.
    Run(RunArgs),
    /// Run a search answering planner calls from a recorded transcript.
    Replay(RunArgs),
    /// Show retrieved cases and model votes for a task as JSON.
    Retrieve {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "banks")]
        banks: PathBuf,
        /// Models to shortlist.
        #[arg(long, default_value_t = tsloop::retrieval::DEFAULT_K)]
        k: usize,
        /// Cases consulted for the vote.
        #[arg(long, default_value_t = tsloop::retrieval::DEFAULT_CASES)]
        cases: usize,
    },
    /// Score forecasts against truth, or synthetic windows against real ones.
    Eval(EvalArgs),
    /// Verify or export an audit log.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Bank maintenance.
    Banks {
        #[command(subcommand)]
        command: BanksCommand,
    },
}

#[derive(Debug, Subcommand)]
enum AuditCommand {
    /// Recompute the hash chain; exit 3 on the first bad entry.
    Verify { file: PathBuf },
    /// Render a verified log as a chronology.
    Report {
        file: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum BanksCommand {
    /// Load and cross-check every bank record.
    Validate { dir: PathBuf },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Task sidecar (JSON).
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    banks: Option<PathBuf>,
    #[arg(long, value_enum)]
    planner: Option<PlannerKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage-1 candidates.
    #[arg(long)]
    k: Option<usize>,
    /// Warm-up iterations per candidate.
    #[arg(long)]
    warmup: Option<u64>,
    /// Optimization iterations.
    #[arg(long)]
    opt: Option<u64>,
    #[arg(long)]
    debug_retries: Option<u32>,
    /// Concurrent warm-up loops (default: one per candidate).
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    context_budget: Option<usize>,
    /// LLM transcript: recorded to with --planner llm, read by replay.
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    llm_model: Option<String>,
    /// YAML config file, overridden by environment and flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn flags(&self) -> Layer {
        Layer {
            task: self.task.clone(),
            banks: self.banks.clone(),
            out: self.out.clone(),
            planner: self.planner,
            seed: self.seed,
            k: self.k,
            warmup: self.warmup,
            opt: self.opt,
            debug_retries: self.debug_retries,
            parallel: self.parallel,
            context_budget: self.context_budget,
            transcript: self.transcript.clone(),
            llm_model: self.llm_model.clone(),
            temperature: None,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Forecast file (csv or json frame).
    #[arg(long, requires = "truth", conflicts_with_all = ["real", "fake"])]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
    /// Directory of real windows, one file each.
    #[arg(long, requires = "fake")]
    real: Option<PathBuf>,
    #[arg(long, requires = "real")]
    fake: Option<PathBuf>,
    /// Comma-separated metric ids.
    #[arg(long, value_delimiter = ',', required = true)]
    metrics: Vec<String>,
    /// Split forecast files into consecutive windows of this many rows.
    #[arg(long)]
    horizon: Option<usize>,
    /// Tail level for VaR / ES metrics.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => commands::run(&args, args.flags(), false),
        Command::Replay(args) => commands::run(&args, args.flags(), true),
        Command::Retrieve { task, banks, k, cases } => commands::retrieve(&task, &banks, k, cases),
        Command::Eval(args) => commands::eval(&args),
        Command::Audit { command: AuditCommand::Verify { file } } => commands::audit_verify(&file),
        Command::Audit { command: AuditCommand::Report { file, format, out } } => {
            commands::audit_report(&file, &format, out.as_deref())
        }
        Command::Banks { command: BanksCommand::Validate { dir } } => commands::banks_validate(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
