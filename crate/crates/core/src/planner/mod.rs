//! Decision policy: per-stage contexts, strict response parsing and the
//! pluggable backends that turn a context into a [`Decision`].

mod backends;
mod context;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::banks::{HyperParamSpec, HyperValue};
use crate::executor::{DirectiveInstance, DirectiveKind};

pub use backends::{LlmPlanner, ModelOrder, ScriptedPlanner, SeededRandomPlanner, MAX_PARSE_ATTEMPTS, SYSTEM_PROMPT};
pub use context::{
    build_context, template_text, ContextError, ContextSources, DecisionContext, HistoryPoint, StageOptions,
    DEFAULT_CONTEXT_BUDGET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ModelSelect,
    Refinement,
    FineTune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ModelSelect => "model_select",
            Stage::Refinement => "refinement",
            Stage::FineTune => "fine_tune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionPayload {
    Model {
        model_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ranking: Option<Vec<String>>,
    },
    Refinement {
        directives: Vec<DirectiveInstance>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        freeform_patch: Option<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        tip_ids: Vec<String>,
    },
    FineTune {
        hyperparams: BTreeMap<String, HyperValue>,
    },
}

impl DecisionPayload {
    pub fn stage(&self) -> Stage {
        match self {
            DecisionPayload::Model { .. } => Stage::ModelSelect,
            DecisionPayload::Refinement { .. } => Stage::Refinement,
            DecisionPayload::FineTune { .. } => Stage::FineTune,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub payload: DecisionPayload,
    pub rationale: String,
    pub backend_id: String,
    /// Re-prompts needed before the response parsed.
    #[serde(default)]
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parse_errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_digest: Option<String>,
}

impl Decision {
    pub fn new(payload: DecisionPayload, rationale: impl Into<String>, backend_id: impl Into<String>) -> Self {
        Self {
            payload,
            rationale: rationale.into(),
            backend_id: backend_id.into(),
            retries: 0,
            parse_errors: Vec::new(),
            template_digest: None,
        }
    }

    pub fn stage(&self) -> Stage {
        self.payload.stage()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in the response")]
    NoJsonFound,
    #[error("field `{path}`: {reason}")]
    FieldViolation { path: String, reason: String },
}

fn violation(path: impl Into<String>, reason: impl Into<String>) -> ParseError {
    ParseError::FieldViolation { path: path.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("response unusable after {attempts} attempts: {}", errors.join("; "))]
    ParseExhausted { attempts: u32, errors: Vec<String> },
    #[error("planner backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend does not serve the {0} stage")]
    Unsupported(Stage),
}

/// What a valid payload looks like for one stage, with the facts needed to
/// check it.
#[derive(Debug, Clone, PartialEq)]
pub enum PayloadSchema {
    Model { allowed: Vec<String> },
    Refinement { external: bool, tips: Vec<String> },
    FineTune { specs: Vec<HyperParamSpec> },
}

impl PayloadSchema {
    pub fn stage(&self) -> Stage {
        match self {
            PayloadSchema::Model { .. } => Stage::ModelSelect,
            PayloadSchema::Refinement { .. } => Stage::Refinement,
            PayloadSchema::FineTune { .. } => Stage::FineTune,
        }
    }

    /// Schema text shown to language-model backends.
    pub fn describe(&self) -> String {
        match self {
            PayloadSchema::Model { allowed } => format!(
                "{{\"model_id\": one of [{}], \"ranking\": optional list ordering the same ids, \"rationale\": non-empty string}}",
                allowed.join(", ")
            ),
            PayloadSchema::Refinement { external, tips } => {
                let kinds: Vec<String> = DirectiveKind::ALL
                    .iter()
                    .map(|k| {
                        let params: Vec<String> = k
                            .params()
                            .iter()
                            .map(|b| format!("\"{}\": {} in [{}, {}]", b.name, if b.integer { "int" } else { "real" }, b.min, b.max))
                            .collect();
                        if params.is_empty() {
                            format!("{{\"kind\": \"{k}\"}}")
                        } else {
                            format!("{{\"kind\": \"{k}\", {}}}", params.join(", "))
                        }
                    })
                    .collect();
                let mut s = format!(
                    "{{\"directives\": full ordered list replacing the current one, each one of {}, \"tip_ids\": optional list from [{}], ",
                    kinds.join(" | "),
                    tips.join(", ")
                );
                if *external {
                    s.push_str("\"freeform_patch\": optional text, ");
                }
                s.push_str("\"rationale\": non-empty string}");
                s
            }
            PayloadSchema::FineTune { specs } => {
                let items: Vec<String> = specs.iter().map(HyperParamSpec::describe).collect();
                format!(
                    "{{\"hyperparams\": object assigning any of [{}], \"rationale\": non-empty string}}",
                    items.join("; ")
                )
            }
        }
    }

    /// Check a payload, coercing hyperparameter values to their declared types.
    pub fn validate(&self, payload: &mut DecisionPayload) -> Result<(), ParseError> {
        match (self, payload) {
            (PayloadSchema::Model { allowed }, DecisionPayload::Model { model_id, ranking }) => {
                if !allowed.contains(model_id) {
                    return Err(violation("model_id", format!("`{model_id}` is not one of [{}]", allowed.join(", "))));
                }
                if let Some(r) = ranking {
                    let mut seen = BTreeSet::new();
                    for (i, id) in r.iter().enumerate() {
                        if !allowed.contains(id) {
                            return Err(violation(format!("ranking[{i}]"), format!("`{id}` is not a candidate")));
                        }
                        if !seen.insert(id) {
                            return Err(violation(format!("ranking[{i}]"), format!("`{id}` repeated")));
                        }
                    }
                }
                Ok(())
            }
            (PayloadSchema::Refinement { external, tips }, DecisionPayload::Refinement { directives, freeform_patch, tip_ids }) => {
                for (i, d) in directives.iter().enumerate() {
                    d.validate().map_err(|e| violation(format!("directives[{i}]"), e))?;
                }
                if freeform_patch.is_some() && !external {
                    return Err(violation("freeform_patch", "only external models accept free-form patches"));
                }
                for (i, t) in tip_ids.iter().enumerate() {
                    if !tips.contains(t) {
                        return Err(violation(format!("tip_ids[{i}]"), format!("unknown tip `{t}`")));
                    }
                }
                Ok(())
            }
            (PayloadSchema::FineTune { specs }, DecisionPayload::FineTune { hyperparams }) => {
                for (name, value) in hyperparams.iter_mut() {
                    let spec = specs
                        .iter()
                        .find(|s| s.name() == name)
                        .ok_or_else(|| violation(format!("hyperparams.{name}"), "unknown hyperparameter"))?;
                    *value = spec.validate(value).map_err(|e| violation(format!("hyperparams.{name}"), e))?;
                }
                Ok(())
            }
            (schema, payload) => Err(violation(
                "kind",
                format!("expected a {} payload, got {}", schema.stage(), payload.stage()),
            )),
        }
    }
}

/// First JSON object embedded in `text`.
fn first_object(text: &str) -> Option<Map<String, Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn take<T: serde::de::DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<Option<T>, ParseError> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| violation(key, e.to_string())),
    }
}

fn require<T: serde::de::DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<T, ParseError> {
    take(map, key)?.ok_or_else(|| violation(key, "required"))
}

/// Strictly parse a backend response against `schema`. Returns the payload
/// and the rationale.
pub fn parse_decision(text: &str, schema: &PayloadSchema) -> Result<(DecisionPayload, String), ParseError> {
    let mut map = first_object(text).ok_or(ParseError::NoJsonFound)?;
    let allowed: &[&str] = match schema {
        PayloadSchema::Model { .. } => &["model_id", "ranking", "rationale"],
        PayloadSchema::Refinement { .. } => &["directives", "freeform_patch", "tip_ids", "rationale"],
        PayloadSchema::FineTune { .. } => &["hyperparams", "rationale"],
    };
    if let Some(unknown) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(violation(unknown.clone(), "unknown field"));
    }
    let rationale: String = require(&mut map, "rationale")?;
    if rationale.trim().is_empty() {
        return Err(violation("rationale", "must be non-empty"));
    }
    let mut payload = match schema {
        PayloadSchema::Model { .. } => DecisionPayload::Model {
            model_id: require(&mut map, "model_id")?,
            ranking: take(&mut map, "ranking")?,
        },
        PayloadSchema::Refinement { .. } => {
            let raw: Vec<Value> = require(&mut map, "directives")?;
            let directives = raw
                .into_iter()
                .enumerate()
                .map(|(i, v)| serde_json::from_value(v).map_err(|e| violation(format!("directives[{i}]"), e.to_string())))
                .collect::<Result<Vec<DirectiveInstance>, _>>()?;
            DecisionPayload::Refinement {
                directives,
                freeform_patch: take(&mut map, "freeform_patch")?,
                tip_ids: take(&mut map, "tip_ids")?.unwrap_or_default(),
            }
        }
        PayloadSchema::FineTune { .. } => {
            let raw: Map<String, Value> = require(&mut map, "hyperparams")?;
            let hyperparams = raw
                .into_iter()
                .map(|(k, v)| {
                    serde_json::from_value(v)
                        .map(|hv| (k.clone(), hv))
                        .map_err(|e| violation(format!("hyperparams.{k}"), e.to_string()))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()?;
            DecisionPayload::FineTune { hyperparams }
        }
    };
    schema.validate(&mut payload)?;
    Ok((payload, rationale))
}

/// Anything that can make decisions. Implementations must be deterministic
/// given the same context and state, except live language models.
pub trait PlannerBackend: Send + Sync {
    fn id(&self) -> String;

    fn serves(&self, _stage: Stage) -> bool {
        true
    }

    fn decide(&self, ctx: &DecisionContext) -> Result<Decision, PlannerError>;
}
