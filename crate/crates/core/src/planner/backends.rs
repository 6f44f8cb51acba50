//! Built-in planner backends: a deterministic scripted policy, a seeded
//! random baseline and a language-model planner over the gateway.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    parse_decision, Decision, DecisionContext, DecisionPayload, PlannerBackend, PlannerError, Stage, StageOptions,
};
use crate::banks::{HyperParamSpec, HyperValue};
use crate::executor::{DirectiveInstance, DirectiveKind};
use crate::hashing::sha256_hex;
use crate::llm::{ChatMessage, ChatParams, ChatRequest, Gateway, Role};

/// Total attempts (first prompt plus re-prompts) per language-model decision.
pub const MAX_PARSE_ATTEMPTS: u32 = 3;

pub const SYSTEM_PROMPT: &str = "You are the planning component of an automated time-series modelling \
search. Answer every request with exactly one JSON object that follows the schema given in the request. \
Always include a short, specific rationale.";

/// Order in which the scripted planner adds directives.
const REFINEMENT_PLAN: [DirectiveKind; 7] = [
    DirectiveKind::NormalizeZscore,
    DirectiveKind::LrSchedulePlateau,
    DirectiveKind::EarlyStopping,
    DirectiveKind::CovShrinkage,
    DirectiveKind::WeightDecay,
    DirectiveKind::GradientClip,
    DirectiveKind::AugmentJitter,
];

fn is_normalization(kind: DirectiveKind) -> bool {
    matches!(kind, DirectiveKind::NormalizeZscore | DirectiveKind::NormalizeMinmax)
}

fn options_mismatch(stage: Stage) -> PlannerError {
    PlannerError::BackendUnavailable(format!("context options do not match the {stage} stage"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelOrder {
    /// Follow the retrieval vote order.
    #[default]
    Votes,
    /// Descending model id; deliberately ignores the votes.
    ReverseLexical,
}

/// Deterministic rule-based planner. Needs no network and produces the same
/// decisions for the same contexts.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPlanner {
    pub model_order: ModelOrder,
}

impl ScriptedPlanner {
    pub fn new(model_order: ModelOrder) -> Self {
        Self { model_order }
    }

    fn refine(ctx: &DecisionContext) -> Result<Decision, PlannerError> {
        let StageOptions::Refinement { current, tips, applicable, tried, error, .. } = &ctx.options else {
            return Err(options_mismatch(ctx.stage));
        };
        let tag = format!("[{} t={} a={}]", ctx.candidate_id, ctx.iteration, ctx.attempt);
        // repair: drop the newest directive; with none left, fall through and
        // add the next planned one instead
        if let (Some(err), Some((last, kept))) = (error, current.split_last()) {
            let rationale = format!("{tag} last run failed ({}); dropping {last}", first_line(err));
            let payload = DecisionPayload::Refinement { directives: kept.to_vec(), freeform_patch: None, tip_ids: Vec::new() };
            return Ok(Decision::new(payload, rationale, "scripted"));
        }
        let has_norm = current.iter().any(|d| is_normalization(d.kind()));
        let next = REFINEMENT_PLAN.iter().copied().find(|k| {
            applicable.contains(k)
                && !tried.contains(k)
                && !current.iter().any(|d| d.kind() == *k)
                && !(is_normalization(*k) && has_norm)
        });
        let Some(kind) = next else {
            let payload =
                DecisionPayload::Refinement { directives: current.clone(), freeform_patch: None, tip_ids: Vec::new() };
            return Ok(Decision::new(payload, format!("{tag} plan exhausted; keeping directives"), "scripted"));
        };
        let tip = tips.iter().find(|t| t.directive_template.kind == kind);
        let instance = match tip {
            Some(t) => t.directive_template.instantiate(&BTreeMap::new()),
            None => DirectiveInstance::from_parts(kind, &BTreeMap::new()),
        }
        .map_err(PlannerError::BackendUnavailable)?;
        let mut directives = current.clone();
        directives.push(instance.clone());
        let why = if error.is_some() { "after a failed run, " } else { "" };
        let rationale = match tip {
            Some(t) => format!("{tag} {why}adding {instance} following tip {}", t.id),
            None => format!("{tag} {why}adding {instance}"),
        };
        let payload = DecisionPayload::Refinement {
            directives,
            freeform_patch: None,
            tip_ids: tip.map(|t| vec![t.id.clone()]).unwrap_or_default(),
        };
        Ok(Decision::new(payload, rationale, "scripted"))
    }

    /// Coordinate search: iteration t moves parameter (t-1) mod n, upward on
    /// even sweeps and downward on odd ones.
    fn fine_tune(ctx: &DecisionContext) -> Result<Decision, PlannerError> {
        let StageOptions::FineTune { specs, current, .. } = &ctx.options else {
            return Err(options_mismatch(ctx.stage));
        };
        let tag = format!("[{} t={}]", ctx.candidate_id, ctx.iteration);
        if specs.is_empty() {
            let payload = DecisionPayload::FineTune { hyperparams: BTreeMap::new() };
            return Ok(Decision::new(payload, format!("{tag} no hyperparameters to tune"), "scripted"));
        }
        let t = ctx.iteration.max(1) - 1;
        let n = specs.len() as u64;
        let spec = &specs[(t % n) as usize];
        let up = (t / n) % 2 == 0;
        let value = current.get(spec.name()).cloned().unwrap_or_else(|| spec.default_value());
        let moved = step(spec, &value, up).filter(|v| *v != value).or_else(|| step(spec, &value, !up));
        let mut hyperparams = BTreeMap::new();
        let rationale = match moved {
            Some(v) if v != value => {
                let r = format!("{tag} moving {} from {value} to {v}", spec.name());
                hyperparams.insert(spec.name().to_string(), v);
                r
            }
            _ => format!("{tag} {} cannot move; keeping assignment", spec.name()),
        };
        Ok(Decision::new(DecisionPayload::FineTune { hyperparams }, rationale, "scripted"))
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("").trim()
}

/// One coordinate step, clamped to the declared range.
fn step(spec: &HyperParamSpec, value: &HyperValue, up: bool) -> Option<HyperValue> {
    match spec {
        HyperParamSpec::Int { min, max, .. } => {
            let v = value.as_f64()? as i64;
            let next = if up { v.saturating_mul(2).max(v + 1) } else { (v / 2).min(v - 1) };
            Some(HyperValue::Int(next.clamp(*min, *max)))
        }
        HyperParamSpec::LogReal { min, max, .. } => {
            let v = value.as_f64()?;
            let next = if up { v * 2.0 } else { v / 2.0 };
            Some(HyperValue::Real(next.clamp(*min, *max)))
        }
        HyperParamSpec::Real { min, max, .. } => {
            let v = value.as_f64()?;
            let delta = 0.1 * (max - min);
            let next = if up { v + delta } else { v - delta };
            Some(HyperValue::Real(next.clamp(*min, *max)))
        }
        HyperParamSpec::Categorical { choices, .. } => {
            let HyperValue::Text(s) = value else { return None };
            let i = choices.iter().position(|c| c == s).unwrap_or(0);
            let n = choices.len();
            let j = if up { (i + 1) % n } else { (i + n - 1) % n };
            Some(HyperValue::Text(choices[j].clone()))
        }
    }
}

impl PlannerBackend for ScriptedPlanner {
    fn id(&self) -> String {
        match self.model_order {
            ModelOrder::Votes => "scripted".into(),
            ModelOrder::ReverseLexical => "scripted:reverse-lexical".into(),
        }
    }

    fn decide(&self, ctx: &DecisionContext) -> Result<Decision, PlannerError> {
        let mut d = match ctx.stage {
            Stage::ModelSelect => {
                let StageOptions::ModelSelect { votes } = &ctx.options else {
                    return Err(options_mismatch(ctx.stage));
                };
                let mut ranking: Vec<String> = votes.iter().map(|v| v.model_id.clone()).collect();
                if self.model_order == ModelOrder::ReverseLexical {
                    ranking.sort_by(|a, b| b.cmp(a));
                }
                let first = ranking.first().cloned().ok_or_else(|| PlannerError::BackendUnavailable("no candidate models".into()))?;
                let rationale = format!("[{}] prioritising {first} by {:?} order", ctx.candidate_id, self.model_order);
                Decision::new(DecisionPayload::Model { model_id: first, ranking: Some(ranking) }, rationale, "scripted")
            }
            Stage::Refinement => Self::refine(ctx)?,
            Stage::FineTune => Self::fine_tune(ctx)?,
        };
        d.backend_id = self.id();
        d.template_digest = Some(ctx.template_digest.clone());
        Ok(d)
    }
}

/// Uniformly random valid decisions; the baseline the search is compared to.
#[derive(Debug, Clone)]
pub struct SeededRandomPlanner {
    pub seed: u64,
}

impl SeededRandomPlanner {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng_for(&self, ctx: &DecisionContext) -> ChaCha8Rng {
        let key = format!("{}|{}|{}|{}|{}|{}", self.seed, ctx.seed, ctx.candidate_id, ctx.iteration, ctx.stage, ctx.attempt);
        let digest = sha256_hex(key.as_bytes());
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        ChaCha8Rng::seed_from_u64(seed)
    }
}

fn random_directive(kind: DirectiveKind, rng: &mut ChaCha8Rng) -> Result<DirectiveInstance, String> {
    let params: BTreeMap<String, f64> = kind
        .params()
        .iter()
        .map(|b| {
            let v = if b.integer {
                // keep integer parameters in a modest range
                rng.random_range(b.min..=b.max.min(50.0)).round()
            } else if b.min > 0.0 && b.max / b.min > 100.0 {
                (rng.random_range(b.min.ln()..=b.max.ln())).exp().clamp(b.min, b.max)
            } else {
                rng.random_range(b.min..=b.max)
            };
            (b.name.to_string(), v)
        })
        .collect();
    DirectiveInstance::from_parts(kind, &params)
}

fn random_value(spec: &HyperParamSpec, rng: &mut ChaCha8Rng) -> HyperValue {
    match spec {
        HyperParamSpec::Int { min, max, .. } => HyperValue::Int(rng.random_range(*min..=*max)),
        HyperParamSpec::Real { min, max, .. } => HyperValue::Real(rng.random_range(*min..=*max)),
        HyperParamSpec::LogReal { min, max, .. } => {
            HyperValue::Real(rng.random_range(min.ln()..=max.ln()).exp().clamp(*min, *max))
        }
        HyperParamSpec::Categorical { choices, .. } => HyperValue::Text(choices[rng.random_range(0..choices.len())].clone()),
    }
}

impl PlannerBackend for SeededRandomPlanner {
    fn id(&self) -> String {
        format!("seeded-random:{}", self.seed)
    }

    fn decide(&self, ctx: &DecisionContext) -> Result<Decision, PlannerError> {
        let mut rng = self.rng_for(ctx);
        let tag = format!("[{} t={} a={}]", ctx.candidate_id, ctx.iteration, ctx.attempt);
        let (payload, rationale) = match &ctx.options {
            StageOptions::ModelSelect { votes } => {
                if votes.is_empty() {
                    return Err(PlannerError::BackendUnavailable("no candidate models".into()));
                }
                let mut ranking: Vec<String> = votes.iter().map(|v| v.model_id.clone()).collect();
                for i in (1..ranking.len()).rev() {
                    ranking.swap(i, rng.random_range(0..=i));
                }
                let first = ranking[0].clone();
                (DecisionPayload::Model { model_id: first.clone(), ranking: Some(ranking) }, format!("{tag} random pick {first}"))
            }
            StageOptions::Refinement { applicable, .. } => {
                let mut directives = Vec::new();
                let mut has_norm = false;
                for kind in applicable {
                    if !rng.random_bool(0.5) || (is_normalization(*kind) && has_norm) {
                        continue;
                    }
                    has_norm |= is_normalization(*kind);
                    directives.push(random_directive(*kind, &mut rng).map_err(PlannerError::BackendUnavailable)?);
                }
                let names: Vec<String> = directives.iter().map(ToString::to_string).collect();
                let rationale = format!("{tag} random directives [{}]", names.join(", "));
                (DecisionPayload::Refinement { directives, freeform_patch: None, tip_ids: Vec::new() }, rationale)
            }
            StageOptions::FineTune { specs, .. } => {
                let hyperparams: BTreeMap<String, HyperValue> =
                    specs.iter().map(|s| (s.name().to_string(), random_value(s, &mut rng))).collect();
                let text: Vec<String> = hyperparams.iter().map(|(k, v)| format!("{k}={v}")).collect();
                (DecisionPayload::FineTune { hyperparams }, format!("{tag} random assignment {}", text.join(", ")))
            }
        };
        if payload.stage() != ctx.stage {
            return Err(options_mismatch(ctx.stage));
        }
        let mut d = Decision::new(payload, rationale, self.id());
        d.template_digest = Some(ctx.template_digest.clone());
        Ok(d)
    }
}

/// Language-model planner. Invalid responses are re-prompted with the parse
/// error, up to [`MAX_PARSE_ATTEMPTS`] attempts in total.
#[derive(Debug, Clone)]
pub struct LlmPlanner {
    gateway: Arc<Gateway>,
    params: ChatParams,
}

impl LlmPlanner {
    pub fn new(gateway: Arc<Gateway>, params: ChatParams) -> Self {
        Self { gateway, params }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }
}

impl PlannerBackend for LlmPlanner {
    fn id(&self) -> String {
        format!("llm:{}", self.params.model_name)
    }

    fn decide(&self, ctx: &DecisionContext) -> Result<Decision, PlannerError> {
        let mut messages = vec![ChatMessage::new(Role::System, SYSTEM_PROMPT), ChatMessage::new(Role::User, &ctx.rendered)];
        let mut errors = Vec::new();
        for attempt in 0..MAX_PARSE_ATTEMPTS {
            let request = ChatRequest::new(messages.clone(), self.params.clone()).map_err(PlannerError::BackendUnavailable)?;
            let text = self
                .gateway
                .complete(&request)
                .map_err(|e| PlannerError::BackendUnavailable(e.to_string()))?;
            match parse_decision(&text, &ctx.schema) {
                Ok((payload, rationale)) => {
                    let mut d = Decision::new(payload, rationale, self.id());
                    d.retries = attempt;
                    d.parse_errors = errors;
                    d.template_digest = Some(ctx.template_digest.clone());
                    return Ok(d);
                }
                Err(e) => {
                    let msg = e.to_string();
                    messages.push(ChatMessage::new(Role::Assistant, text));
                    messages.push(ChatMessage::new(
                        Role::User,
                        format!("Your reply was rejected: {msg}. Reply again with one JSON object that follows the schema."),
                    ));
                    errors.push(msg);
                }
            }
        }
        Err(PlannerError::ParseExhausted { attempts: MAX_PARSE_ATTEMPTS, errors })
    }
}
