//! Stage 1 pre-selection and the two-phase refinement search: per-candidate
//! warm-up loops, then a long optimization loop on the winner.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{Action, AuditError, AuditLog, EntryFields, LogEntry, Memory, Verdict};
use crate::banks::BankSet;
use crate::executor::{CandidateConfig, Executor, RunResult};
use crate::hashing::{canonical_json, sha256_hex};
use crate::planner::{
    build_context, ContextError, ContextSources, Decision, DecisionPayload, PlannerBackend, PlannerError, Stage,
    DEFAULT_CONTEXT_BUDGET,
};
use crate::retrieval::{index_cases, retrieve, top_k_models, RetrievalError, DEFAULT_CASES};
use crate::task::{validate_task, TaskSpec, TaskViolation};

/// Candidate id used for run-level entries (markers).
pub const RUN_ID: &str = "run";
/// Candidate id of the model-selection entry.
pub const STAGE1_ID: &str = "stage1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub k: usize,
    pub warmup_iters: u64,
    pub opt_iters: u64,
    pub debug_retries: u32,
    pub seed: u64,
    /// Concurrent warm-up loops; `None` means one per candidate.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default = "default_budget")]
    pub context_budget: usize,
}

fn default_budget() -> usize {
    DEFAULT_CONTEXT_BUDGET
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            k: 2,
            warmup_iters: 3,
            opt_iters: 10,
            debug_retries: 2,
            seed: 0,
            parallelism: None,
            context_budget: DEFAULT_CONTEXT_BUDGET,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidPhase(m.to_string()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.warmup_iters < 1 {
            return bad("warmup iterations must be at least 1");
        }
        if self.opt_iters < 1 {
            return bad("optimization iterations must be at least 1");
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be at least 1");
        }
        Ok(())
    }

    /// Total refine iterations across both phases.
    pub fn t_max(&self) -> u64 {
        self.warmup_iters * self.k as u64 + self.opt_iters
    }

    fn workers(&self, candidates: usize) -> usize {
        self.parallelism.unwrap_or(candidates).clamp(1, candidates.max(1))
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid phase configuration: {0}")]
    InvalidPhase(String),
    #[error("task is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidTask(Vec<TaskViolation>),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("no warm-up candidate produced a successful run")]
    AllCandidatesFailed,
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Optimization,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Optimization => "optimization",
        })
    }
}

/// One executed iteration of a loop (iteration 0 is the warm start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub phase: Phase,
    pub candidate_id: String,
    pub iteration: u64,
    pub status: String,
    pub candidate_loss: Option<f64>,
    /// Incumbent loss after the verdict; `None` until a run succeeds.
    pub incumbent_loss: Option<f64>,
    pub verdict: Verdict,
    pub incumbent_digest: Option<String>,
    pub debug_attempts: u32,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    pub candidate_id: String,
    pub iteration: u64,
    pub incumbent: CandidateConfig,
    pub incumbent_result: RunResult,
    pub last_result: Option<RunResult>,
    pub memory: Memory,
    pub trace: Vec<TracePoint>,
}

impl SearchState {
    pub fn incumbent_loss(&self) -> f64 {
        self.incumbent_result.primary_loss.unwrap_or(f64::INFINITY)
    }
}

/// A stage-1 pick.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub config: CandidateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub ranking: Vec<String>,
    pub candidates: Vec<String>,
    pub shortfall: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub candidate_id: String,
    pub best_loss: Option<f64>,
    pub best_config_digest: Option<String>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub iterations: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub debug_attempts: u64,
    pub best_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure { phase: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub total_ms: u64,
    #[serde(default)]
    pub phases_ms: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub task_id: String,
    pub outcome: Outcome,
    pub planner_id: String,
    pub phase_config: PhaseConfig,
    pub bank_digest: String,
    pub stage1: Option<Stage1Summary>,
    pub candidates: Vec<CandidateSummary>,
    pub winner: Option<String>,
    pub winning_config: Option<CandidateConfig>,
    pub final_metrics: Option<BTreeMap<String, f64>>,
    pub final_loss: Option<f64>,
    pub loss_trace: Vec<TracePoint>,
    pub phases: Vec<PhaseSummary>,
    pub audit_head_hash: String,
    pub wall_clock: WallClock,
}

impl FinalReport {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Digest over everything except the chain head and wall-clock data.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        let obj = v.as_object_mut().expect("report is an object");
        obj.remove("audit_head_hash");
        obj.remove("wall_clock");
        sha256_hex(canonical_json(&v).as_bytes())
    }

    /// Rebuild a report from audit entries alone.
    pub fn from_audit_log(entries: &[LogEntry]) -> Result<Self, String> {
        let start = entries
            .iter()
            .find(|e| e.action == Action::PhaseMarker && event(e) == Some("run_start"))
            .ok_or("log has no run_start marker")?;
        let field = |e: &LogEntry, k: &str| e.payload.get(k).cloned().unwrap_or(Value::Null);
        let task_id: String = parse(field(start, "task_id"), "task_id")?;
        let planner_id: String = parse(field(start, "planner_id"), "planner_id")?;
        let phase_config: PhaseConfig = parse(field(start, "phase_config"), "phase_config")?;
        let bank_digest: String = parse(field(start, "bank_digest"), "bank_digest")?;
        let stage1: Option<Stage1Summary> = match entries.iter().find(|e| e.action == Action::Model) {
            Some(e) => Some(parse(field(e, "summary"), "stage1 summary")?),
            None => None,
        };
        let candidate_ids: Vec<String> = stage1.as_ref().map(|s: &Stage1Summary| s.candidates.clone()).unwrap_or_default();
        let loss_trace = entries
            .iter()
            .filter(|e| e.action == Action::Logging)
            .map(|e| parse(e.payload.clone(), "trace point"))
            .collect::<Result<Vec<TracePoint>, _>>()?;
        let loss_trace = order_trace(loss_trace, &candidate_ids);
        let end = entries
            .iter()
            .rev()
            .find(|e| e.action == Action::PhaseMarker && event(e) == Some("run_end"))
            .ok_or("log has no run_end marker")?;
        let wall_clock = {
            let ts = |e: &LogEntry| chrono::DateTime::parse_from_rfc3339(&e.timestamp).ok();
            match (ts(start), ts(end)) {
                (Some(a), Some(b)) => WallClock { total_ms: (b - a).num_milliseconds().max(0) as u64, phases_ms: BTreeMap::new() },
                _ => WallClock::default(),
            }
        };
        Ok(FinalReport {
            task_id,
            outcome: parse(field(end, "outcome"), "outcome")?,
            planner_id,
            phase_config,
            bank_digest,
            stage1,
            candidates: summarize_candidates(&candidate_ids, &loss_trace),
            winner: parse(field(end, "winner"), "winner")?,
            winning_config: parse(field(end, "winning_config"), "winning_config")?,
            final_metrics: parse(field(end, "final_metrics"), "final_metrics")?,
            final_loss: parse(field(end, "final_loss"), "final_loss")?,
            phases: summarize_phases(&loss_trace),
            loss_trace,
            audit_head_hash: entries.last().map(|e| e.entry_hash.clone()).unwrap_or_default(),
            wall_clock,
        })
    }
}

fn parse<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T, String> {
    serde_json::from_value(v).map_err(|e| format!("{what}: {e}"))
}

fn event(e: &LogEntry) -> Option<&str> {
    e.payload.get("event").and_then(Value::as_str)
}

fn summarize_candidates(ids: &[String], trace: &[TracePoint]) -> Vec<CandidateSummary> {
    ids.iter()
        .map(|id| {
            let mut best: Option<(f64, String)> = None;
            for p in trace.iter().filter(|p| p.phase == Phase::Warmup && &p.candidate_id == id) {
                if let (Some(loss), Some(d)) = (p.incumbent_loss, &p.incumbent_digest) {
                    if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                        best = Some((loss, d.clone()));
                    }
                }
            }
            CandidateSummary {
                candidate_id: id.clone(),
                failed: best.is_none(),
                best_loss: best.as_ref().map(|b| b.0),
                best_config_digest: best.map(|b| b.1),
            }
        })
        .collect()
}

fn summarize_phases(trace: &[TracePoint]) -> Vec<PhaseSummary> {
    [Phase::Warmup, Phase::Optimization]
        .into_iter()
        .map(|phase| {
            let points: Vec<&TracePoint> = trace.iter().filter(|p| p.phase == phase).collect();
            let refine = points.iter().filter(|p| p.iteration > 0);
            let best_loss = points.iter().filter_map(|p| p.incumbent_loss).fold(None, |acc: Option<f64>, l| {
                Some(acc.map_or(l, |a| a.min(l)))
            });
            PhaseSummary {
                phase,
                iterations: refine.clone().count() as u64,
                accepted: refine.clone().filter(|p| p.verdict == Verdict::Accepted).count() as u64,
                rejected: refine.filter(|p| p.verdict == Verdict::Rejected).count() as u64,
                debug_attempts: points.iter().map(|p| u64::from(p.debug_attempts)).sum(),
                best_loss,
            }
        })
        .collect()
}

/// Seed for a named sub-stream of `base`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let digest = sha256_hex(format!("{base}:{label}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn decision_payload(d: &Decision) -> Value {
    json!({
        "decision": d.payload,
        "backend_id": d.backend_id,
        "retries": d.retries,
        "parse_errors": d.parse_errors,
        "template_digest": d.template_digest,
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

/// Everything one search needs; shared read-only by the warm-up loops.
pub struct SearchEngine<'a> {
    pub task: &'a TaskSpec,
    pub banks: &'a BankSet,
    pub planner: &'a dyn PlannerBackend,
    pub executor: &'a dyn Executor,
    pub log: &'a AuditLog,
    pub phase: PhaseConfig,
}

/// A planner decision, or the no-op fallback after unusable responses.
enum Decided {
    Made(Decision),
    Fallback { errors: Vec<String> },
}

impl<'a> SearchEngine<'a> {
    fn append(&self, memory: Option<&mut Memory>, fields: EntryFields) -> Result<LogEntry, AuditError> {
        let entry = self.log.append(fields)?;
        if let Some(m) = memory {
            m.record(&entry);
        }
        Ok(entry)
    }

    fn marker(&self, rationale: impl Into<String>, payload: Value) -> Result<LogEntry, AuditError> {
        self.append(
            None,
            EntryFields {
                iteration: 0,
                candidate_id: RUN_ID.into(),
                action: Action::PhaseMarker,
                payload,
                rationale: rationale.into(),
                config_digest: String::new(),
                metrics: None,
                verdict: None,
            },
        )
    }

    fn sources<'s>(&'s self, state: &'s SearchState, config: &'s CandidateConfig, t: u64) -> ContextSources<'s> {
        let mut s = ContextSources::new(self.task, self.banks, &state.candidate_id);
        s.iteration = t;
        s.seed = config.seed;
        s.budget = self.phase.context_budget;
        s.memory = Some(&state.memory);
        s.config = Some(config);
        s.last_result = state.last_result.as_ref();
        s
    }

    fn decide(&self, stage: Stage, src: &ContextSources<'_>) -> Result<Decided, ControllerError> {
        let ctx = build_context(stage, src)?;
        match self.planner.decide(&ctx) {
            Ok(d) if d.stage() == stage => Ok(Decided::Made(d)),
            Ok(d) => Err(PlannerError::BackendUnavailable(format!("expected a {stage} decision, got {}", d.stage())).into()),
            Err(PlannerError::ParseExhausted { errors, .. }) => {
                log::warn!("{}: planner output unusable at {stage}; keeping current config", src.candidate_id);
                Ok(Decided::Fallback { errors })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Retrieval, vote, optional planner re-rank; logs one model entry.
    pub fn stage1_preselect(&self) -> Result<(Vec<Candidate>, Stage1Summary), ControllerError> {
        let index = index_cases(self.banks, self.task.kind)?;
        let retrieved = retrieve(&index, &self.task.description, DEFAULT_CASES);
        let votes = top_k_models(&retrieved.ranked, self.banks, self.phase.k)?;
        let vote_order: Vec<String> = votes.votes.iter().map(|v| v.model_id.clone()).collect();
        if votes.shortfall {
            log::warn!("only {} distinct models available for k = {}", vote_order.len(), self.phase.k);
        }

        let (ranking, rationale, extra) = if self.planner.serves(Stage::ModelSelect) {
            let mut src = ContextSources::new(self.task, self.banks, STAGE1_ID);
            src.seed = self.phase.seed;
            src.budget = self.phase.context_budget;
            src.ranked = Some(&retrieved.ranked);
            src.votes = Some(&votes);
            match self.decide(Stage::ModelSelect, &src)? {
                Decided::Made(d) => {
                    let DecisionPayload::Model { model_id, ranking } = &d.payload else { unreachable!("stage checked") };
                    let mut order = vec![model_id.clone()];
                    for id in ranking.iter().flatten().chain(&vote_order) {
                        if !order.contains(id) {
                            order.push(id.clone());
                        }
                    }
                    (order, d.rationale.clone(), decision_payload(&d))
                }
                Decided::Fallback { errors } => (
                    vote_order.clone(),
                    format!("planner fallback at model selection, using vote order: {}", errors.join("; ")),
                    json!({ "fallback": true, "parse_errors": errors }),
                ),
            }
        } else {
            (vote_order.clone(), format!("vote order {}", vote_order.join(", ")), json!({ "backend_id": self.planner.id() }))
        };

        let candidates: Vec<Candidate> = ranking
            .iter()
            .take(self.phase.k)
            .enumerate()
            .map(|(i, model_id)| {
                let id = format!("c{i}-{model_id}");
                let model = self.banks.model(model_id).expect("voted models exist");
                let config = CandidateConfig::defaults_for(model, derive_seed(self.phase.seed, &id));
                Candidate { id, config }
            })
            .collect();
        let summary = Stage1Summary {
            ranking,
            candidates: candidates.iter().map(|c| c.id.clone()).collect(),
            shortfall: votes.shortfall,
            rationale: rationale.clone(),
        };
        let payload = merge(
            json!({
                "retrieved": retrieved.ranked,
                "votes": votes.votes,
                "vote_rationale": votes.rationale,
                "summary": summary,
            }),
            extra,
        );
        self.append(
            None,
            EntryFields {
                iteration: 0,
                candidate_id: STAGE1_ID.into(),
                action: Action::Model,
                payload,
                rationale,
                config_digest: String::new(),
                metrics: None,
                verdict: Some(Verdict::NotApplicable),
            },
        )?;
        Ok((candidates, summary))
    }

    fn log_outcome(
        &self,
        state: &mut SearchState,
        phase: Phase,
        candidate: &CandidateConfig,
        result: &RunResult,
        point: &TracePoint,
        reverted_to: Option<String>,
    ) -> Result<(), AuditError> {
        let mut payload = serde_json::to_value(point).expect("trace point serializes");
        let extra = json!({
            "primary_loss": result.primary_loss,
            "hyperparams": candidate.hyperparams,
            "directives": candidate.directives,
            "error": result.error_text(),
            "warnings": result.warnings,
            "reverted_to": reverted_to,
        });
        payload = merge(payload, extra);
        let rationale = match point.verdict {
            Verdict::Accepted if point.iteration == 0 => format!("{phase} warm start succeeded with bank defaults"),
            Verdict::Accepted => format!("candidate loss {} beats the incumbent", fmt_opt(point.candidate_loss)),
            _ if !result.is_success() => format!("run ended with {}; incumbent kept", result.status_name()),
            _ => format!("candidate loss {} does not beat the incumbent; reverted", fmt_opt(point.candidate_loss)),
        };
        self.append(
            Some(&mut state.memory),
            EntryFields {
                iteration: point.iteration,
                candidate_id: state.candidate_id.clone(),
                action: Action::Logging,
                payload,
                rationale,
                config_digest: candidate.digest(),
                metrics: result.is_success().then(|| result.metrics.clone()),
                verdict: Some(point.verdict),
            },
        )?;
        Ok(())
    }

    /// Re-plan directives with the error in context and re-run, up to D times.
    pub fn debug_fix(
        &self,
        state: &mut SearchState,
        phase: Phase,
        t: u64,
        mut config: CandidateConfig,
        mut result: RunResult,
    ) -> Result<(CandidateConfig, RunResult, u32), ControllerError> {
        let mut attempts = 0;
        if !result.is_success() && self.phase.debug_retries > 0 {
            // the failed run itself is attempt 0
            let error = result.error_text().unwrap_or_default();
            self.append(
                Some(&mut state.memory),
                EntryFields {
                    iteration: t,
                    candidate_id: state.candidate_id.clone(),
                    action: Action::DebugAttempt,
                    payload: json!({
                        "phase": phase,
                        "attempt": 0,
                        "error": error,
                        "directives": config.directives,
                        "status": result.status_name(),
                        "primary_loss": result.primary_loss,
                    }),
                    rationale: format!("run at t={t} ended with {}; entering the debug loop", result.status_name()),
                    config_digest: config.digest(),
                    metrics: None,
                    verdict: Some(Verdict::NotApplicable),
                },
            )?;
        }
        while !result.is_success() && attempts < self.phase.debug_retries {
            attempts += 1;
            let error = result.error_text().unwrap_or_default();
            let decided = {
                let mut src = self.sources(state, &config, t);
                src.attempt = attempts;
                src.last_result = Some(&result);
                src.error = Some(&error);
                self.decide(Stage::Refinement, &src)?
            };
            let (rationale, extra) = match decided {
                Decided::Made(d) => {
                    if let DecisionPayload::Refinement { directives, freeform_patch, .. } = &d.payload {
                        config.directives = directives.clone();
                        config.freeform_patch = freeform_patch.clone();
                    }
                    (d.rationale.clone(), decision_payload(&d))
                }
                Decided::Fallback { errors } => (
                    format!("planner fallback in debug attempt {attempts} at t={t}: {}", errors.join("; ")),
                    json!({ "fallback": true, "parse_errors": errors }),
                ),
            };
            result = self.executor.run(&config, self.task, self.banks);
            let payload = merge(
                json!({
                    "phase": phase,
                    "attempt": attempts,
                    "error": error,
                    "directives": config.directives,
                    "status": result.status_name(),
                    "primary_loss": result.primary_loss,
                }),
                extra,
            );
            self.append(
                Some(&mut state.memory),
                EntryFields {
                    iteration: t,
                    candidate_id: state.candidate_id.clone(),
                    action: Action::DebugAttempt,
                    payload,
                    rationale,
                    config_digest: config.digest(),
                    metrics: result.is_success().then(|| result.metrics.clone()),
                    verdict: Some(Verdict::NotApplicable),
                },
            )?;
            state.last_result = Some(result.clone());
        }
        Ok((config, result, attempts))
    }

    /// Iteration 0: run bank defaults (with debug retries) to seed the loop.
    pub fn warm_start(&self, candidate: &Candidate) -> Result<Option<SearchState>, ControllerError> {
        let first = self.executor.run(&candidate.config, self.task, self.banks);
        let mut state = SearchState {
            candidate_id: candidate.id.clone(),
            iteration: 0,
            incumbent: candidate.config.clone(),
            incumbent_result: first.clone(),
            last_result: Some(first.clone()),
            memory: Memory::new(&candidate.id),
            trace: Vec::new(),
        };
        let (config, result, attempts) = self.debug_fix(&mut state, Phase::Warmup, 0, candidate.config.clone(), first)?;
        let ok = result.is_success();
        let point = TracePoint {
            phase: Phase::Warmup,
            candidate_id: candidate.id.clone(),
            iteration: 0,
            status: result.status_name().into(),
            candidate_loss: result.primary_loss,
            incumbent_loss: result.primary_loss,
            verdict: if ok { Verdict::Accepted } else { Verdict::Rejected },
            incumbent_digest: ok.then(|| config.digest()),
            debug_attempts: attempts,
        };
        self.log_outcome(&mut state, Phase::Warmup, &config, &result, &point, None)?;
        state.trace.push(point);
        if !ok {
            return Ok(None);
        }
        state.incumbent = config;
        state.incumbent_result = result.clone();
        state.last_result = Some(result);
        Ok(Some(state))
    }

    /// One cycle: refinement decision, fine-tune decision, execution, debug
    /// retries, verdict, logging.
    pub fn refine_iteration(&self, state: &mut SearchState, phase: Phase) -> Result<(), ControllerError> {
        let t = state.iteration + 1;
        let pre_digest = state.incumbent.digest();
        let mut candidate = state.incumbent.clone();

        let decided = self.decide(Stage::Refinement, &self.sources(state, &state.incumbent, t))?;
        let (rationale, extra) = match decided {
            Decided::Made(d) => {
                if let DecisionPayload::Refinement { directives, freeform_patch, .. } = &d.payload {
                    candidate.directives = directives.clone();
                    candidate.freeform_patch = freeform_patch.clone();
                }
                (d.rationale.clone(), decision_payload(&d))
            }
            Decided::Fallback { errors } => (
                format!("planner fallback at refinement t={t}: {}", errors.join("; ")),
                json!({ "fallback": true, "parse_errors": errors }),
            ),
        };
        self.append(
            Some(&mut state.memory),
            EntryFields {
                iteration: t,
                candidate_id: state.candidate_id.clone(),
                action: Action::Refinement,
                payload: merge(json!({ "phase": phase, "directives": candidate.directives }), extra),
                rationale,
                config_digest: candidate.digest(),
                metrics: None,
                verdict: Some(Verdict::NotApplicable),
            },
        )?;

        let decided = self.decide(Stage::FineTune, &self.sources(state, &candidate, t))?;
        let (rationale, extra) = match decided {
            Decided::Made(d) => {
                if let DecisionPayload::FineTune { hyperparams } = &d.payload {
                    candidate.hyperparams.extend(hyperparams.clone());
                }
                (d.rationale.clone(), decision_payload(&d))
            }
            Decided::Fallback { errors } => (
                format!("planner fallback at fine-tuning t={t}: {}", errors.join("; ")),
                json!({ "fallback": true, "parse_errors": errors }),
            ),
        };
        self.append(
            Some(&mut state.memory),
            EntryFields {
                iteration: t,
                candidate_id: state.candidate_id.clone(),
                action: Action::FineTune,
                payload: merge(json!({ "phase": phase, "hyperparams": candidate.hyperparams }), extra),
                rationale,
                config_digest: candidate.digest(),
                metrics: None,
                verdict: Some(Verdict::NotApplicable),
            },
        )?;

        let result = self.executor.run(&candidate, self.task, self.banks);
        state.last_result = Some(result.clone());
        let (candidate, result, attempts) = self.debug_fix(state, phase, t, candidate, result)?;
        let accepted = result.is_success() && result.primary_loss.is_some_and(|l| l < state.incumbent_loss());
        state.iteration = t;
        if accepted {
            state.incumbent = candidate.clone();
            state.incumbent_result = result.clone();
        }
        let point = TracePoint {
            phase,
            candidate_id: state.candidate_id.clone(),
            iteration: t,
            status: result.status_name().into(),
            candidate_loss: result.primary_loss,
            incumbent_loss: state.incumbent_result.primary_loss,
            verdict: if accepted { Verdict::Accepted } else { Verdict::Rejected },
            incumbent_digest: Some(state.incumbent.digest()),
            debug_attempts: attempts,
        };
        let reverted = (!accepted).then_some(pre_digest);
        self.log_outcome(state, phase, &candidate, &result, &point, reverted)?;
        state.trace.push(point);
        Ok(())
    }

    fn run_loop(&self, candidate: &Candidate) -> Result<Option<SearchState>, ControllerError> {
        let Some(mut state) = self.warm_start(candidate)? else { return Ok(None) };
        for _ in 0..self.phase.warmup_iters {
            self.refine_iteration(&mut state, Phase::Warmup)?;
        }
        Ok(Some(state))
    }

    /// Independent loops per candidate, run concurrently up to the
    /// parallelism limit. Returns per-candidate states in stage-1 order and
    /// the index of the winner.
    pub fn run_warmup(&self, candidates: &[Candidate]) -> Result<(Vec<Option<SearchState>>, usize), ControllerError> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<Option<SearchState>, ControllerError>>>> =
            Mutex::new((0..candidates.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..self.phase.workers(candidates.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(c) = candidates.get(i) else { break };
                    let out = self.run_loop(c);
                    slots.lock().expect("slot lock")[i] = Some(out);
                });
            }
        });
        let states = slots
            .into_inner()
            .expect("slot lock")
            .into_iter()
            .map(|s| s.expect("every candidate ran"))
            .collect::<Result<Vec<_>, _>>()?;
        let mut winner: Option<(usize, f64)> = None;
        for (i, s) in states.iter().enumerate() {
            if let Some(s) = s {
                let loss = s.incumbent_loss();
                if winner.is_none_or(|(_, w)| loss < w) {
                    winner = Some((i, loss));
                }
            }
        }
        let (w, _) = winner.ok_or(ControllerError::AllCandidatesFailed)?;
        Ok((states, w))
    }

    pub fn run_optimization(&self, state: &mut SearchState) -> Result<(), ControllerError> {
        for _ in 0..self.phase.opt_iters {
            self.refine_iteration(state, Phase::Optimization)?;
        }
        Ok(())
    }

    /// Stage 1, warm-up, optimization and report. Only invalid inputs return
    /// an error; failures during the search are reported in the outcome.
    pub fn run_full(&self) -> Result<FinalReport, ControllerError> {
        self.phase.validate()?;
        validate_task(self.task, self.banks).map_err(ControllerError::InvalidTask)?;
        let started = Instant::now();
        let mut report = FinalReport {
            task_id: self.task.id.clone(),
            outcome: Outcome::Success,
            planner_id: self.planner.id(),
            phase_config: self.phase.clone(),
            bank_digest: self.banks.content_digest().to_string(),
            stage1: None,
            candidates: Vec::new(),
            winner: None,
            winning_config: None,
            final_metrics: None,
            final_loss: None,
            loss_trace: Vec::new(),
            phases: Vec::new(),
            audit_head_hash: String::new(),
            wall_clock: WallClock::default(),
        };
        let fail = |report: &mut FinalReport, phase: &str, e: &dyn fmt::Display| {
            report.outcome = Outcome::Failure { phase: phase.into(), message: e.to_string() };
        };
        let start_payload = json!({
            "event": "run_start",
            "task_id": report.task_id,
            "planner_id": report.planner_id,
            "phase_config": report.phase_config,
            "bank_digest": report.bank_digest,
            "t_max": self.phase.t_max(),
        });
        if let Err(e) = self.marker(format!("search started for task {}", self.task.id), start_payload) {
            fail(&mut report, "stage1", &e);
            return Ok(self.finish(report, started));
        }

        let mut clock = Instant::now();
        let stage1 = self.stage1_preselect();
        report.wall_clock.phases_ms.insert("stage1".into(), clock.elapsed().as_millis() as u64);
        let candidates = match stage1 {
            Ok((c, summary)) => {
                report.stage1 = Some(summary);
                c
            }
            Err(e) => {
                fail(&mut report, "stage1", &e);
                return Ok(self.end(report, started));
            }
        };
        let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();

        clock = Instant::now();
        let warm = self.run_warmup(&candidates);
        report.wall_clock.phases_ms.insert("warmup".into(), clock.elapsed().as_millis() as u64);
        let (states, w) = match warm {
            Ok(x) => x,
            Err(e) => {
                fail(&mut report, "warmup", &e);
                // keep whatever the log recorded so the trace stays complete
                let entries = self.log.entries();
                let points = entries
                    .iter()
                    .filter(|e| e.action == Action::Logging)
                    .filter_map(|e| serde_json::from_value(e.payload.clone()).ok())
                    .collect();
                report.loss_trace = order_trace(points, &ids);
                report.candidates = summarize_candidates(&ids, &report.loss_trace);
                return Ok(self.end(report, started));
            }
        };
        let mut trace: Vec<TracePoint> = states.iter().flatten().flat_map(|s| s.trace.clone()).collect();
        // failed loops still contributed their warm-start point
        for (i, s) in states.iter().enumerate() {
            if s.is_none() {
                trace.extend(self.failed_points(&ids[i]));
            }
        }
        let mut winner = states.into_iter().nth(w).flatten().expect("winner has a state");
        let marker = self.marker(
            format!("warm-up finished; {} proceeds with loss {}", winner.candidate_id, winner.incumbent_loss()),
            json!({ "event": "warmup_end", "winner": winner.candidate_id }),
        );
        if let Err(e) = marker {
            fail(&mut report, "warmup", &e);
            return Ok(self.finish(report, started));
        }

        clock = Instant::now();
        let before = winner.trace.len();
        let opt = self.run_optimization(&mut winner);
        report.wall_clock.phases_ms.insert("optimization".into(), clock.elapsed().as_millis() as u64);
        trace.extend(winner.trace[before..].iter().cloned());
        // keep log order: warm-up points by loop, then optimization
        report.loss_trace = order_trace(trace, &ids);
        report.candidates = summarize_candidates(&ids, &report.loss_trace);
        report.winner = Some(winner.candidate_id.clone());
        if let Err(e) = opt {
            fail(&mut report, "optimization", &e);
            return Ok(self.end(report, started));
        }
        report.winning_config = Some(winner.incumbent.clone());
        report.final_metrics = Some(winner.incumbent_result.metrics.clone());
        report.final_loss = winner.incumbent_result.primary_loss;
        Ok(self.end(report, started))
    }

    fn failed_points(&self, id: &str) -> Vec<TracePoint> {
        self.log
            .entries()
            .iter()
            .filter(|e| e.action == Action::Logging && e.candidate_id == id)
            .filter_map(|e| serde_json::from_value(e.payload.clone()).ok())
            .collect()
    }

    /// Log the end marker and assemble the final report.
    fn end(&self, mut report: FinalReport, started: Instant) -> FinalReport {
        report.phases = summarize_phases(&report.loss_trace);
        let rationale = match &report.outcome {
            Outcome::Success => format!("search finished; final loss {}", fmt_opt(report.final_loss)),
            Outcome::Failure { phase, message } => format!("search failed in {phase}: {message}"),
        };
        let payload = json!({
            "event": "run_end",
            "outcome": report.outcome,
            "winner": report.winner,
            "winning_config": report.winning_config,
            "final_metrics": report.final_metrics,
            "final_loss": report.final_loss,
        });
        if let Err(e) = self.marker(rationale, payload) {
            report.outcome = Outcome::Failure { phase: "report".into(), message: e.to_string() };
        }
        self.finish(report, started)
    }

    fn finish(&self, mut report: FinalReport, started: Instant) -> FinalReport {
        report.phases = summarize_phases(&report.loss_trace);
        report.audit_head_hash = self.log.head_hash();
        report.wall_clock.total_ms = started.elapsed().as_millis() as u64;
        self.log.close();
        report
    }
}

/// Trace in report order: each candidate's warm-up points in stage-1 order,
/// then the optimization points.
fn order_trace(mut trace: Vec<TracePoint>, ids: &[String]) -> Vec<TracePoint> {
    let rank = |p: &TracePoint| {
        let phase = match p.phase {
            Phase::Warmup => 0,
            Phase::Optimization => 1,
        };
        let cand = if p.phase == Phase::Warmup { ids.iter().position(|i| *i == p.candidate_id).unwrap_or(usize::MAX) } else { 0 };
        (phase, cand, p.iteration)
    };
    trace.sort_by_key(rank);
    trace
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
}
