//! The read-only knowledge banks: past cases, refinement tips, the model
//! bank and the metric bank.
//!
//! On disk every record is one JSON file carrying `"v": 1`, grouped under
//! `cases/`, `refinements/`, `models/` and `metrics/`. Loading validates all
//! cross references and computes a content digest over the records sorted
//! by id, so the digest does not depend on directory enumeration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::executor::{DirectiveInstance, DirectiveKind, NativeModel};
use crate::hashing::digest_of;
use crate::metrics;
use crate::task::{Direction, TaskKind};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("missing file or directory: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation in {file}: {field}")]
    SchemaViolation { file: String, field: String },
    #[error("dangling reference from `{from}` to `{to}`")]
    DanglingReference { from: String, to: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn schema(file: impl Into<String>, field: impl Into<String>) -> BankError {
    BankError::SchemaViolation { file: file.into(), field: field.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub v: u32,
    pub id: String,
    pub task_kind: TaskKind,
    #[serde(default)]
    pub domain_tags: Vec<String>,
    pub description: String,
    pub solution_summary: String,
    pub recommended_model: String,
    #[serde(default)]
    pub outcome: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementCategory {
    Preprocessing,
    TrainingOptimization,
    TuningEvaluation,
}

/// Machine-actionable side of a refinement tip: a catalog directive kind and
/// the allowed range of each of its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectiveTemplate {
    pub kind: DirectiveKind,
    #[serde(default)]
    pub params: BTreeMap<String, ParamRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub min: f64,
    pub max: f64,
    pub default: f64,
}

impl DirectiveTemplate {
    /// Instantiate with template defaults, overridden by `overrides`.
    pub fn instantiate(&self, overrides: &BTreeMap<String, f64>) -> Result<DirectiveInstance, String> {
        let mut values: BTreeMap<String, f64> =
            self.params.iter().map(|(k, r)| (k.clone(), r.default)).collect();
        for (k, v) in overrides {
            if let Some(r) = self.params.get(k) {
                if *v < r.min || *v > r.max {
                    return Err(format!("{}.{k} = {v} outside template range [{}, {}]", self.kind, r.min, r.max));
                }
            }
            values.insert(k.clone(), *v);
        }
        DirectiveInstance::from_parts(self.kind, &values)
    }

    fn check(&self) -> Result<(), String> {
        let catalog = self.kind.params();
        for (name, r) in &self.params {
            let b = catalog
                .iter()
                .find(|b| b.name == name.as_str())
                .ok_or_else(|| format!("{} has no parameter `{name}`", self.kind))?;
            if !(r.min <= r.default && r.default <= r.max) || r.min < b.min || r.max > b.max {
                return Err(format!("range for {}.{name} invalid or outside catalog bounds", self.kind));
            }
        }
        self.instantiate(&BTreeMap::new()).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementEntry {
    pub v: u32,
    pub id: String,
    pub category: RefinementCategory,
    pub title: String,
    pub guidance: String,
    pub directive_template: DirectiveTemplate,
    pub applicability: Vec<ModelFamily>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Tree,
    Deep,
    Econometric,
    Gan,
    Vae,
    Diffusion,
    Linear,
    Baseline,
}

/// A hyperparameter value as stored in configs and bank defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Int(i64),
    Real(f64),
    Text(String),
}

impl HyperValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            HyperValue::Int(i) => Some(*i as f64),
            HyperValue::Real(r) => Some(*r),
            HyperValue::Text(_) => None,
        }
    }
}

impl std::fmt::Display for HyperValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HyperValue::Int(i) => write!(f, "{i}"),
            HyperValue::Real(r) => write!(f, "{r}"),
            HyperValue::Text(s) => write!(f, "{s}"),
        }
    }
}

/// One entry of a model's hyperparameter schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HyperParamSpec {
    Int { name: String, min: i64, max: i64, default: i64 },
    Real { name: String, min: f64, max: f64, default: f64 },
    LogReal { name: String, min: f64, max: f64, default: f64 },
    Categorical { name: String, choices: Vec<String>, default: String },
}

impl HyperParamSpec {
    pub fn name(&self) -> &str {
        match self {
            HyperParamSpec::Int { name, .. }
            | HyperParamSpec::Real { name, .. }
            | HyperParamSpec::LogReal { name, .. }
            | HyperParamSpec::Categorical { name, .. } => name,
        }
    }

    pub fn default_value(&self) -> HyperValue {
        match self {
            HyperParamSpec::Int { default, .. } => HyperValue::Int(*default),
            HyperParamSpec::Real { default, .. } | HyperParamSpec::LogReal { default, .. } => {
                HyperValue::Real(*default)
            }
            HyperParamSpec::Categorical { default, .. } => HyperValue::Text(default.clone()),
        }
    }

    /// Check `value` against this entry, coercing integral reals to ints and
    /// ints to reals where the type calls for it.
    pub fn validate(&self, value: &HyperValue) -> Result<HyperValue, String> {
        let name = self.name();
        match self {
            HyperParamSpec::Int { min, max, .. } => {
                let v = match value {
                    HyperValue::Int(i) => *i,
                    HyperValue::Real(r) if r.fract() == 0.0 && r.is_finite() => *r as i64,
                    other => return Err(format!("{name}: expected integer, got {other}")),
                };
                if v < *min || v > *max {
                    return Err(format!("{name} = {v} outside [{min}, {max}]"));
                }
                Ok(HyperValue::Int(v))
            }
            HyperParamSpec::Real { min, max, .. } | HyperParamSpec::LogReal { min, max, .. } => {
                let v = value.as_f64().ok_or_else(|| format!("{name}: expected number, got {value}"))?;
                if !v.is_finite() || v < *min || v > *max {
                    return Err(format!("{name} = {v} outside [{min}, {max}]"));
                }
                Ok(HyperValue::Real(v))
            }
            HyperParamSpec::Categorical { choices, .. } => match value {
                HyperValue::Text(s) if choices.contains(s) => Ok(value.clone()),
                other => Err(format!("{name}: `{other}` not one of {choices:?}")),
            },
        }
    }

    fn check(&self) -> Result<(), String> {
        let ok = match self {
            HyperParamSpec::Int { min, max, .. } => min <= max,
            HyperParamSpec::Real { min, max, .. } => min <= max && min.is_finite() && max.is_finite(),
            HyperParamSpec::LogReal { min, max, .. } => *min > 0.0 && min <= max && max.is_finite(),
            HyperParamSpec::Categorical { choices, .. } => !choices.is_empty(),
        };
        if !ok {
            return Err(format!("{}: empty or invalid range", self.name()));
        }
        self.validate(&self.default_value()).map(|_| ())
    }

    pub fn describe(&self) -> String {
        match self {
            HyperParamSpec::Int { name, min, max, default } => format!("{name}: int in [{min}, {max}], default {default}"),
            HyperParamSpec::Real { name, min, max, default } => format!("{name}: real in [{min}, {max}], default {default}"),
            HyperParamSpec::LogReal { name, min, max, default } => {
                format!("{name}: log-real in [{min}, {max}], default {default}")
            }
            HyperParamSpec::Categorical { name, choices, default } => {
                format!("{name}: one of {}, default {default}", choices.join("|"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Binding {
    Native { model: NativeModel },
    External {
        command: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub v: u32,
    pub id: String,
    pub family: ModelFamily,
    pub task_kinds: BTreeSet<TaskKind>,
    #[serde(default)]
    pub hyperparam_schema: Vec<HyperParamSpec>,
    pub binding: Binding,
    pub summary: String,
}

impl ModelDescriptor {
    pub fn native(&self) -> Option<NativeModel> {
        match self.binding {
            Binding::Native { model } => Some(model),
            Binding::External { .. } => None,
        }
    }

    pub fn param(&self, name: &str) -> Option<&HyperParamSpec> {
        self.hyperparam_schema.iter().find(|p| p.name() == name)
    }

    pub fn default_hyperparams(&self) -> BTreeMap<String, HyperValue> {
        self.hyperparam_schema
            .iter()
            .map(|p| (p.name().to_string(), p.default_value()))
            .collect()
    }

    /// Whether a directive of `kind` has an effect on this model. External
    /// models receive every directive and decide themselves.
    pub fn accepts(&self, kind: DirectiveKind) -> bool {
        self.native().map(|m| m.honors(kind)).unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricDescriptor {
    pub v: u32,
    pub id: String,
    pub task_kinds: BTreeSet<TaskKind>,
    #[serde(default)]
    pub direction: Direction,
    pub summary: String,
}

/// The validated, immutable set of all four banks.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSet {
    cases: Vec<CaseRecord>,
    refinements: Vec<RefinementEntry>,
    models: Vec<ModelDescriptor>,
    metrics: Vec<MetricDescriptor>,
    content_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSection {
    Cases,
    Refinements,
    Models,
    Metrics,
}

fn sorted_unique<T>(mut items: Vec<T>, id: impl Fn(&T) -> &str) -> Result<Vec<T>, BankError> {
    items.sort_by(|a, b| id(a).cmp(id(b)));
    if let Some(w) = items.windows(2).find(|w| id(&w[0]) == id(&w[1])) {
        return Err(BankError::DuplicateId(id(&w[0]).to_string()));
    }
    Ok(items)
}

impl BankSet {
    /// Validate records and assemble the set. Record order is irrelevant.
    pub fn from_records(
        cases: Vec<CaseRecord>,
        refinements: Vec<RefinementEntry>,
        models: Vec<ModelDescriptor>,
        metrics: Vec<MetricDescriptor>,
    ) -> Result<Self, BankError> {
        let cases = sorted_unique(cases, |c| &c.id)?;
        let refinements = sorted_unique(refinements, |r| &r.id)?;
        let models = sorted_unique(models, |m| &m.id)?;
        let metrics = sorted_unique(metrics, |m| &m.id)?;

        for m in &models {
            let file = format!("models/{}", m.id);
            check_version(&file, m.v)?;
            let mut names = BTreeSet::new();
            for p in &m.hyperparam_schema {
                if !names.insert(p.name()) {
                    return Err(schema(&file, format!("hyperparam_schema: duplicate `{}`", p.name())));
                }
                p.check().map_err(|e| schema(&file, format!("hyperparam_schema: {e}")))?;
            }
            if let Some(native) = m.native() {
                for kind in m.task_kinds.iter() {
                    if *kind != native.task_kind() {
                        return Err(schema(&file, format!("task_kinds: {} cannot serve {kind}", native.name())));
                    }
                }
                for required in native.required_params() {
                    if m.param(required).is_none() {
                        return Err(schema(&file, format!("hyperparam_schema: missing `{required}`")));
                    }
                }
            }
            if let Binding::External { command, .. } = &m.binding {
                if command.is_empty() {
                    return Err(schema(&file, "binding.command: empty"));
                }
            }
        }
        for c in &cases {
            let file = format!("cases/{}", c.id);
            check_version(&file, c.v)?;
            if c.description.trim().is_empty() {
                return Err(schema(&file, "description: empty"));
            }
            if !models.iter().any(|m| m.id == c.recommended_model) {
                return Err(BankError::DanglingReference {
                    from: c.id.clone(),
                    to: c.recommended_model.clone(),
                });
            }
        }
        for mt in &metrics {
            let file = format!("metrics/{}", mt.id);
            check_version(&file, mt.v)?;
            let info = metrics::metric_info(&mt.id).ok_or_else(|| BankError::DanglingReference {
                from: mt.id.clone(),
                to: "metric implementation".into(),
            })?;
            if mt.task_kinds.iter().any(|k| *k != info.kind) {
                return Err(schema(&file, "task_kinds: not supported by the implementation"));
            }
        }
        for r in &refinements {
            let file = format!("refinements/{}", r.id);
            check_version(&file, r.v)?;
            r.directive_template
                .check()
                .map_err(|e| schema(&file, format!("directive_template: {e}")))?;
            let usable = models.iter().any(|m| {
                r.applicability.contains(&m.family) && m.accepts(r.directive_template.kind)
            });
            if !usable {
                return Err(schema(
                    &file,
                    "applicability: no model in the listed families accepts this directive",
                ));
            }
        }

        let content_digest = digest_of(&json!({
            "cases": cases,
            "refinements": refinements,
            "models": models,
            "metrics": metrics,
        }));
        Ok(Self { cases, refinements, models, metrics, content_digest })
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.cases
    }

    pub fn refinements(&self) -> &[RefinementEntry] {
        &self.refinements
    }

    pub fn models(&self) -> &[ModelDescriptor] {
        &self.models
    }

    pub fn metrics(&self) -> &[MetricDescriptor] {
        &self.metrics
    }

    pub fn content_digest(&self) -> &str {
        &self.content_digest
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn refinement(&self, id: &str) -> Option<&RefinementEntry> {
        self.refinements.iter().find(|r| r.id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelDescriptor> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn metric(&self, id: &str) -> Option<&MetricDescriptor> {
        self.metrics.iter().find(|m| m.id == id)
    }

    /// Refinement entries usable with `model`.
    pub fn refinements_for(&self, model: &ModelDescriptor) -> Vec<&RefinementEntry> {
        self.refinements
            .iter()
            .filter(|r| r.applicability.contains(&model.family) && model.accepts(r.directive_template.kind))
            .collect()
    }
}

fn check_version(file: &str, v: u32) -> Result<(), BankError> {
    if v == RECORD_VERSION {
        Ok(())
    } else {
        Err(schema(file, format!("v: expected {RECORD_VERSION}, found {v}")))
    }
}

fn read_section<T: DeserializeOwned>(root: &Path, section: &str) -> Result<Vec<T>, BankError> {
    let dir = root.join(section);
    if !dir.is_dir() {
        return Err(BankError::MissingFile(dir));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|source| BankError::Io { path: dir.clone(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|source| BankError::Io { path: p.clone(), source })?;
            serde_json::from_str(&text).map_err(|e| schema(p.display().to_string(), e.to_string()))
        })
        .collect()
}

/// Load and validate the four bank directories under `root`.
pub fn load_banks(root: &Path) -> Result<BankSet, BankError> {
    if !root.is_dir() {
        return Err(BankError::MissingFile(root.to_path_buf()));
    }
    BankSet::from_records(
        read_section(root, "cases")?,
        read_section(root, "refinements")?,
        read_section(root, "models")?,
        read_section(root, "metrics")?,
    )
}

fn render_case(c: &CaseRecord, out: &mut String) {
    let _ = writeln!(out, "[case {}] ({}; tags: {})", c.id, c.task_kind, c.domain_tags.join(", "));
    let _ = writeln!(out, "{}", c.description);
    let _ = writeln!(out, "Solution: {}", c.solution_summary);
    let _ = writeln!(out, "Recommended model: {}", c.recommended_model);
    if !c.outcome.is_empty() {
        let o: Vec<String> = c.outcome.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "Outcome: {}", o.join(", "));
    }
}

fn render_refinement(r: &RefinementEntry, out: &mut String) {
    let _ = writeln!(out, "[tip {}] {}", r.id, r.title);
    let _ = writeln!(out, "{}", r.guidance);
    let params: Vec<String> = r
        .directive_template
        .params
        .iter()
        .map(|(k, p)| format!("{k} in [{}, {}] default {}", p.min, p.max, p.default))
        .collect();
    let _ = writeln!(out, "Directive: {} {}", r.directive_template.kind, params.join("; "));
}

fn render_model(m: &ModelDescriptor, out: &mut String) {
    let _ = writeln!(out, "[model {}] family: {:?}", m.id, m.family);
    let _ = writeln!(out, "{}", m.summary);
    for p in &m.hyperparam_schema {
        let _ = writeln!(out, "  - {}", p.describe());
    }
}

fn render_metric(m: &MetricDescriptor, out: &mut String) {
    let _ = writeln!(out, "[metric {}] {}", m.id, m.summary);
}

/// Plain-text rendering of selected records in ascending id order.
pub fn bank_excerpt(banks: &BankSet, section: BankSection, ids: &[String]) -> Result<String, BankError> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut out = String::new();
    for id in &wanted {
        if !out.is_empty() {
            out.push('\n');
        }
        match section {
            BankSection::Cases => render_case(banks.case(id).ok_or_else(|| BankError::UnknownId(id.to_string()))?, &mut out),
            BankSection::Refinements => render_refinement(
                banks.refinement(id).ok_or_else(|| BankError::UnknownId(id.to_string()))?,
                &mut out,
            ),
            BankSection::Models => render_model(banks.model(id).ok_or_else(|| BankError::UnknownId(id.to_string()))?, &mut out),
            BankSection::Metrics => {
                render_metric(banks.metric(id).ok_or_else(|| BankError::UnknownId(id.to_string()))?, &mut out)
            }
        }
    }
    Ok(out)
}
