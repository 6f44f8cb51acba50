//! Per-stage decision contexts. Each stage sees only its own inputs: model
//! selection gets the task and retrieved cases, refinement gets tips, memory
//! and the current run, fine-tuning gets the schema and metric history.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use super::{PayloadSchema, Stage};
use crate::audit::{Action, AuditError, Memory, Verdict};
use crate::banks::{bank_excerpt, BankSection, BankSet, HyperParamSpec, HyperValue, RefinementEntry};
use crate::executor::{CandidateConfig, DirectiveInstance, DirectiveKind, RunResult};
use crate::hashing::{sha256_hex, to_canonical};
use crate::retrieval::{ModelVote, ModelVotes, RankedCase};
use crate::task::TaskSpec;

pub const DEFAULT_CONTEXT_BUDGET: usize = 16_000;

const MODEL_SELECT_TEMPLATE: &str = include_str!("../../../../prompts/model_select.txt");
const REFINEMENT_TEMPLATE: &str = include_str!("../../../../prompts/refinement.txt");
const FINE_TUNE_TEMPLATE: &str = include_str!("../../../../prompts/fine_tune.txt");

pub fn template_text(stage: Stage) -> &'static str {
    match stage {
        Stage::ModelSelect => MODEL_SELECT_TEMPLATE,
        Stage::Refinement => REFINEMENT_TEMPLATE,
        Stage::FineTune => FINE_TUNE_TEMPLATE,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContextError {
    #[error("the {stage} context needs {what}")]
    Missing { stage: Stage, what: &'static str },
    #[error("context budget {budget} is below the {needed} characters of mandatory content")]
    BudgetImpossible { budget: usize, needed: usize },
    #[error("bank lookup failed: {0}")]
    Bank(String),
}

impl From<AuditError> for ContextError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::BudgetImpossible { budget, needed } => ContextError::BudgetImpossible { budget, needed },
            other => ContextError::Bank(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPoint {
    pub iteration: u64,
    pub hyperparams: BTreeMap<String, HyperValue>,
    pub primary_loss: Option<f64>,
    pub accepted: bool,
}

/// Structured view of the same stage-restricted inputs, for backends that do
/// not read text.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOptions {
    ModelSelect {
        votes: Vec<ModelVote>,
    },
    Refinement {
        model_id: String,
        current: Vec<DirectiveInstance>,
        tips: Vec<RefinementEntry>,
        applicable: Vec<DirectiveKind>,
        /// Directive kinds this loop has already proposed.
        tried: Vec<DirectiveKind>,
        error: Option<String>,
    },
    FineTune {
        specs: Vec<HyperParamSpec>,
        current: BTreeMap<String, HyperValue>,
        history: Vec<HistoryPoint>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionContext {
    pub stage: Stage,
    pub candidate_id: String,
    pub iteration: u64,
    /// 0 for the regular decision, n for the n-th debug retry.
    pub attempt: u32,
    pub seed: u64,
    pub rendered: String,
    pub template_digest: String,
    pub schema: PayloadSchema,
    pub options: StageOptions,
}

/// Everything a context may be built from; each stage reads only its part.
#[derive(Debug, Clone, Copy)]
pub struct ContextSources<'a> {
    pub task: &'a TaskSpec,
    pub banks: &'a BankSet,
    pub candidate_id: &'a str,
    pub iteration: u64,
    pub attempt: u32,
    pub seed: u64,
    pub budget: usize,
    pub ranked: Option<&'a [RankedCase]>,
    pub votes: Option<&'a ModelVotes>,
    pub memory: Option<&'a Memory>,
    pub config: Option<&'a CandidateConfig>,
    pub last_result: Option<&'a RunResult>,
    pub error: Option<&'a str>,
}

impl<'a> ContextSources<'a> {
    pub fn new(task: &'a TaskSpec, banks: &'a BankSet, candidate_id: &'a str) -> Self {
        Self {
            task,
            banks,
            candidate_id,
            iteration: 0,
            attempt: 0,
            seed: 0,
            budget: DEFAULT_CONTEXT_BUDGET,
            ranked: None,
            votes: None,
            memory: None,
            config: None,
            last_result: None,
            error: None,
        }
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

fn task_text(task: &TaskSpec) -> String {
    format!(
        "{} ({} task, primary criterion {}, window p={} q={})\n{}",
        task.id,
        task.kind,
        task.primary_criterion,
        task.dataset.window.input_len,
        task.dataset.window.horizon,
        task.description.trim()
    )
}

/// Fill `template` leaving room for a memory block rendered by `memory`
/// within whatever budget remains.
fn fill_with_memory(
    template: &str,
    vars: &[(&str, &str)],
    slot: &str,
    budget: usize,
    memory: impl Fn(usize) -> Result<String, AuditError>,
) -> Result<String, ContextError> {
    let base = fill(template, vars);
    let base_len = base.replace(&format!("{{{{{slot}}}}}"), "").chars().count();
    if base_len > budget {
        return Err(ContextError::BudgetImpossible { budget, needed: base_len });
    }
    let block = memory(budget - base_len).map_err(|e| match e {
        AuditError::BudgetImpossible { needed, .. } => {
            ContextError::BudgetImpossible { budget, needed: base_len + needed }
        }
        other => ContextError::Bank(other.to_string()),
    })?;
    Ok(base.replace(&format!("{{{{{slot}}}}}"), &block))
}

fn tried_kinds(memory: &Memory) -> Vec<DirectiveKind> {
    let mut kinds = Vec::new();
    for e in memory.entries() {
        if !matches!(e.action, Action::Refinement | Action::DebugAttempt) {
            continue;
        }
        let Some(list) = e.payload.get("directives").and_then(Value::as_array) else { continue };
        for d in list {
            if let Ok(d) = serde_json::from_value::<DirectiveInstance>(d.clone()) {
                if !kinds.contains(&d.kind()) {
                    kinds.push(d.kind());
                }
            }
        }
    }
    kinds
}

fn history(memory: &Memory) -> Vec<HistoryPoint> {
    memory
        .entries()
        .iter()
        .filter(|e| e.action == Action::Logging)
        .map(|e| HistoryPoint {
            iteration: e.iteration,
            hyperparams: e
                .payload
                .get("hyperparams")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default(),
            primary_loss: e.primary_loss(),
            accepted: e.verdict == Some(Verdict::Accepted),
        })
        .collect()
}

pub fn build_context(stage: Stage, src: &ContextSources<'_>) -> Result<DecisionContext, ContextError> {
    let missing = |what| ContextError::Missing { stage, what };
    let template = template_text(stage);
    let (rendered, schema, options) = match stage {
        Stage::ModelSelect => {
            let ranked = src.ranked.ok_or(missing("retrieved cases"))?;
            let votes = src.votes.ok_or(missing("model votes"))?;
            let ids: Vec<String> = ranked.iter().map(|r| r.case_id.clone()).collect();
            let mut cases: String = ranked
                .iter()
                .map(|r| format!("- {} similarity {:.4}\n", r.case_id, r.similarity))
                .collect();
            cases.push('\n');
            cases.push_str(&bank_excerpt(src.banks, BankSection::Cases, &ids).map_err(|e| ContextError::Bank(e.to_string()))?);
            let candidates: String = votes
                .votes
                .iter()
                .map(|v| format!("- {} score {:.4}\n", v.model_id, v.score))
                .collect();
            let schema = PayloadSchema::Model { allowed: votes.votes.iter().map(|v| v.model_id.clone()).collect() };
            let rendered = fill(
                template,
                &[
                    ("task", &task_text(src.task)),
                    ("cases", cases.trim_end()),
                    ("candidates", candidates.trim_end()),
                    ("schema", &schema.describe()),
                ],
            );
            let size = rendered.chars().count();
            if size > src.budget {
                return Err(ContextError::BudgetImpossible { budget: src.budget, needed: size });
            }
            (rendered, schema, StageOptions::ModelSelect { votes: votes.votes.clone() })
        }
        Stage::Refinement => {
            let memory = src.memory.ok_or(missing("a memory view"))?;
            let config = src.config.ok_or(missing("the current configuration"))?;
            let model = src
                .banks
                .model(&config.model_id)
                .ok_or_else(|| ContextError::Bank(format!("unknown model `{}`", config.model_id)))?;
            let tips: Vec<RefinementEntry> = src.banks.refinements_for(model).into_iter().cloned().collect();
            let tip_ids: Vec<String> = tips.iter().map(|t| t.id.clone()).collect();
            let tip_text = if tip_ids.is_empty() {
                "none".to_string()
            } else {
                bank_excerpt(src.banks, BankSection::Refinements, &tip_ids).map_err(|e| ContextError::Bank(e.to_string()))?
            };
            let schema = PayloadSchema::Refinement { external: model.native().is_none(), tips: tip_ids };
            let last = src.last_result.map(RunResult::summary).unwrap_or_else(|| "none yet".into());
            let error = src.error.unwrap_or("none");
            let rendered = fill_with_memory(
                template,
                &[
                    ("task", &task_text(src.task)),
                    ("tips", tip_text.trim_end()),
                    ("config", &config.summary()),
                    ("last_result", &last),
                    ("error", error),
                    ("schema", &schema.describe()),
                ],
                "memory",
                src.budget,
                |b| memory.digest_for_context(b),
            )?;
            let applicable = DirectiveKind::ALL.iter().copied().filter(|k| model.accepts(*k)).collect();
            let options = StageOptions::Refinement {
                model_id: config.model_id.clone(),
                current: config.directives.clone(),
                tips,
                applicable,
                tried: tried_kinds(memory),
                error: src.error.map(str::to_string),
            };
            (rendered, schema, options)
        }
        Stage::FineTune => {
            let memory = src.memory.ok_or(missing("a memory view"))?;
            let config = src.config.ok_or(missing("the current configuration"))?;
            let model = src
                .banks
                .model(&config.model_id)
                .ok_or_else(|| ContextError::Bank(format!("unknown model `{}`", config.model_id)))?;
            let specs = model.hyperparam_schema.clone();
            let spec_text = if specs.is_empty() {
                "none (this model has no hyperparameters)".to_string()
            } else {
                specs.iter().map(|s| format!("- {}", s.describe())).collect::<Vec<_>>().join("\n")
            };
            let schema = PayloadSchema::FineTune { specs: specs.clone() };
            let rendered = fill_with_memory(
                template,
                &[
                    ("hyperparams", &spec_text),
                    ("assignment", &to_canonical(&config.hyperparams)),
                    ("schema", &schema.describe()),
                ],
                "history",
                src.budget,
                |b| memory.metrics_history(b),
            )?;
            let options = StageOptions::FineTune {
                specs,
                current: config.hyperparams.clone(),
                history: history(memory),
            };
            (rendered, schema, options)
        }
    };
    Ok(DecisionContext {
        stage,
        candidate_id: src.candidate_id.to_string(),
        iteration: src.iteration,
        attempt: src.attempt,
        seed: src.seed,
        rendered,
        template_digest: sha256_hex(template.as_bytes()),
        schema,
        options,
    })
}
