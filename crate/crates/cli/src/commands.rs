use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array2};
use serde_json::{json, Value};
use tsloop::audit::{export_report, verify_chain, AuditLog, ChainVerdict, ReportFormat};
use tsloop::banks::{load_banks, BankSet};
use tsloop::controller::{FinalReport, SearchEngine};
use tsloop::executor::ModelRunner;
use tsloop::llm::{load_transcript, Gateway, LiveConfig};
use tsloop::metrics::{evaluate_forecast, evaluate_generation, RiskParams};
use tsloop::planner::{LlmPlanner, ModelOrder, PlannerBackend, ScriptedPlanner, SeededRandomPlanner};
use tsloop::retrieval::{index_cases, retrieve as retrieve_cases, top_k_models};
use tsloop::task::{load_frame, DataFormat, TaskSpec};

use crate::config::{Layer, PlannerKind, RunConfig};
use crate::{EvalArgs, RunArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, inputs or usage.
    Config(String),
    /// The search ran and reported a failure.
    Reported(String),
    /// An audit log failed verification.
    Audit { first_bad_seq: u64, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Reported(_) => 2,
            CliError::Audit { .. } => 3,
        }
    }

    pub fn to_json(&self) -> String {
        let v = match self {
            CliError::Config(m) => json!({ "error": "config", "message": m }),
            CliError::Reported(m) => json!({ "error": "reported_failure", "message": m }),
            CliError::Audit { first_bad_seq, reason } => {
                json!({ "error": "audit", "first_bad_seq": first_bad_seq, "message": reason })
            }
        };
        v.to_string()
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn print_json(v: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(config_err)?;
    emit(&format!("{text}\n"))
}

// A closed pipe (`tsloop ... | head`) is not an error worth reporting.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(config_err(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn load_inputs(task: &Path, banks: &Path) -> Result<(TaskSpec, BankSet), CliError> {
    let banks = load_banks(banks).map_err(config_err)?;
    let task = TaskSpec::load(task).map_err(config_err)?;
    Ok((task, banks))
}

fn env_map() -> BTreeMap<String, String> {
    std::env::vars().collect()
}

fn build_planner(cfg: &RunConfig) -> Result<Box<dyn PlannerBackend>, CliError> {
    Ok(match cfg.planner {
        PlannerKind::Scripted => Box::new(ScriptedPlanner::new(ModelOrder::Votes)),
        PlannerKind::Random => Box::new(SeededRandomPlanner::new(cfg.phase.seed)),
        PlannerKind::Llm => {
            let live = LiveConfig::from_env().map_err(config_err)?;
            let gateway = match &cfg.transcript {
                Some(path) => Gateway::record(live, path.clone()),
                None => Gateway::live(live),
            };
            Box::new(LlmPlanner::new(Arc::new(gateway), cfg.chat.clone()))
        }
        PlannerKind::Replay => {
            let path = cfg.transcript.as_ref().ok_or_else(|| config_err("replay needs --transcript"))?;
            let entries = load_transcript(path).map_err(config_err)?;
            Box::new(LlmPlanner::new(Arc::new(Gateway::replay(entries, false)), cfg.chat.clone()))
        }
    })
}

/// report.json content: the report plus its digest.
pub fn report_document(report: &FinalReport) -> Value {
    let mut doc = serde_json::to_value(report).expect("report serializes");
    doc["report_digest"] = Value::String(report.digest());
    doc
}

pub fn run(args: &RunArgs, flags: Layer, replay: bool) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => Layer::from_yaml_file(p).map_err(CliError::Config)?,
        None => Layer::default(),
    };
    let env = Layer::from_env(&env_map()).map_err(CliError::Config)?;
    let mut layer = Layer::default().overlay(file).overlay(env).overlay(flags);
    if replay {
        layer.planner = Some(PlannerKind::Replay);
    }
    let cfg = RunConfig::resolve(layer).map_err(CliError::Config)?;
    let (task, banks) = load_inputs(&cfg.task, &cfg.banks)?;
    let planner = build_planner(&cfg)?;

    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", cfg.out.display())))?;
    let log = AuditLog::create(&cfg.out.join("audit.log")).map_err(config_err)?;
    let executor = ModelRunner::default();
    let engine = SearchEngine {
        task: &task,
        banks: &banks,
        planner: planner.as_ref(),
        executor: &executor,
        log: &log,
        phase: cfg.phase.clone(),
    };
    let report = engine.run_full().map_err(config_err)?;

    let doc = report_document(&report);
    write_file(&cfg.out.join("report.json"), &(serde_json::to_string_pretty(&doc).map_err(config_err)? + "\n"))?;
    let winner_path = cfg.out.join("winner.config.json");
    match &report.winning_config {
        Some(c) => write_file(&winner_path, &(serde_json::to_string_pretty(c).map_err(config_err)? + "\n"))?,
        None => {
            let _ = fs::remove_file(&winner_path);
        }
    }
    print_json(&json!({
        "outcome": report.outcome,
        "winner": report.winner,
        "final_loss": report.final_loss,
        "report_digest": doc["report_digest"],
        "audit_head_hash": report.audit_head_hash,
        "out": cfg.out,
    }))?;
    match &report.outcome {
        tsloop::controller::Outcome::Success => Ok(()),
        tsloop::controller::Outcome::Failure { phase, message } => {
            Err(CliError::Reported(format!("search failed in {phase}: {message}")))
        }
    }
}

pub fn retrieve(task: &Path, banks: &Path, k: usize, cases: usize) -> Result<(), CliError> {
    if k == 0 || cases == 0 {
        return Err(config_err("--k and --cases must be at least 1"));
    }
    let (task, banks) = load_inputs(task, banks)?;
    let index = index_cases(&banks, task.kind).map_err(config_err)?;
    let mut result = retrieve_cases(&index, &task.description, cases);
    let votes = top_k_models(&result.ranked, &banks, k).map_err(config_err)?;
    result.model_votes = votes.votes;
    result.rationale = votes.rationale;
    print_json(&result)
}

fn load_values(path: &Path) -> Result<Array2<f64>, CliError> {
    let frame = load_frame::<f64>(path, DataFormat::from_path(path)).map_err(config_err)?;
    Ok(frame.values().clone())
}

fn split_rows(values: &Array2<f64>, horizon: Option<usize>, what: &Path) -> Result<Vec<Array2<f64>>, CliError> {
    let rows = values.nrows();
    let q = horizon.unwrap_or(rows);
    if q == 0 || rows % q != 0 {
        return Err(CliError::Config(format!("{}: {rows} rows do not split into windows of {q}", what.display())));
    }
    Ok((0..rows / q).map(|i| values.slice(s![i * q..(i + 1) * q, ..]).to_owned()).collect())
}

fn window_dir(dir: &Path) -> Result<Vec<Array2<f64>>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("{} holds no .csv or .json windows", dir.display())));
    }
    files.iter().map(|p| load_values(p)).collect()
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let params = RiskParams { alpha: args.alpha, ..RiskParams::default() };
    let scores = match (&args.pred, &args.truth, &args.real, &args.fake) {
        (Some(pred), Some(truth), None, None) => {
            let p = split_rows(&load_values(pred)?, args.horizon, pred)?;
            let t = split_rows(&load_values(truth)?, args.horizon, truth)?;
            evaluate_forecast(&args.metrics, &p, &t, &params).map_err(config_err)?
        }
        (None, None, Some(real), Some(fake)) => {
            evaluate_generation(&args.metrics, &window_dir(real)?, &window_dir(fake)?, &params).map_err(config_err)?
        }
        _ => return Err(config_err("give either --pred with --truth, or --real with --fake")),
    };
    print_json(&scores)
}

pub fn audit_verify(file: &Path) -> Result<(), CliError> {
    let verdict = verify_chain(file).map_err(config_err)?;
    print_json(&verdict)?;
    match verdict {
        ChainVerdict::Ok { .. } => Ok(()),
        ChainVerdict::Bad { first_bad_seq, reason } => Err(CliError::Audit { first_bad_seq, reason }),
    }
}

pub fn audit_report(file: &Path, format: &str, out: Option<&Path>) -> Result<(), CliError> {
    let format: ReportFormat = format.parse().map_err(CliError::Config)?;
    let bytes = fs::read(file).map_err(|e| CliError::Config(format!("cannot read {}: {e}", file.display())))?;
    if let ChainVerdict::Bad { first_bad_seq, reason } = tsloop::audit::verify_bytes(&bytes) {
        return Err(CliError::Audit { first_bad_seq, reason });
    }
    let text = export_report(&bytes, format).map_err(config_err)?;
    match out {
        Some(path) => write_file(path, &text),
        None => emit(&text),
    }
}

pub fn banks_validate(dir: &Path) -> Result<(), CliError> {
    let banks = load_banks(dir).map_err(config_err)?;
    print_json(&json!({
        "ok": true,
        "content_digest": banks.content_digest(),
        "cases": banks.cases().len(),
        "refinements": banks.refinements().len(),
        "models": banks.models().len(),
        "metrics": banks.metrics().len(),
    }))
}
