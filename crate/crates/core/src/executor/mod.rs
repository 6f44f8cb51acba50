//! Running candidate configurations: native in-process models and the
//! external subprocess protocol.

mod directives;
mod external;
mod linalg;
mod native;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::banks::{BankSet, Binding, HyperValue, ModelDescriptor};
use crate::hashing::digest_of;
use crate::task::{TaskKind, TaskSpec};

pub use directives::{
    apply_directives, DirectiveInstance, DirectiveKind, EffectiveSettings, Normalization, ParamBounds,
};
pub use external::{run_external, ExecRequest, ExecResponse, PredictionsFile, Scoring, TAIL_LIMIT};
pub use native::{run_native, FitReport, GdLinear, GdLinearParams, Scaler};

pub const DEFAULT_NATIVE_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(600);

/// Models implemented in-process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NativeModel {
    NaiveLast,
    GdLinear,
    ExpSmoothing,
    GaussianGen,
    BlockBootstrapGen,
}

impl NativeModel {
    pub fn name(self) -> &'static str {
        match self {
            NativeModel::NaiveLast => "naive_last",
            NativeModel::GdLinear => "gd_linear",
            NativeModel::ExpSmoothing => "exp_smoothing",
            NativeModel::GaussianGen => "gaussian_gen",
            NativeModel::BlockBootstrapGen => "block_bootstrap_gen",
        }
    }

    pub fn task_kind(self) -> TaskKind {
        match self {
            NativeModel::NaiveLast | NativeModel::GdLinear | NativeModel::ExpSmoothing => TaskKind::Forecasting,
            NativeModel::GaussianGen | NativeModel::BlockBootstrapGen => TaskKind::Generation,
        }
    }

    /// Hyperparameters the model reads; the descriptor schema must declare them.
    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            NativeModel::NaiveLast | NativeModel::GaussianGen => &[],
            NativeModel::GdLinear => &["lr", "epochs", "val_fraction"],
            NativeModel::ExpSmoothing => &["alpha"],
            NativeModel::BlockBootstrapGen => &["block_len"],
        }
    }
}

/// The editable artifact of the search: model, hyperparameters, directives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub model_id: String,
    pub hyperparams: BTreeMap<String, HyperValue>,
    #[serde(default)]
    pub directives: Vec<DirectiveInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeform_patch: Option<String>,
    pub seed: u64,
}

impl CandidateConfig {
    /// Bank defaults, no directives.
    pub fn defaults_for(model: &ModelDescriptor, seed: u64) -> Self {
        Self {
            model_id: model.id.clone(),
            hyperparams: model.default_hyperparams(),
            directives: Vec::new(),
            freeform_patch: None,
            seed,
        }
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Check against the model bank: known model, complete and in-range
    /// hyperparameters, valid directives, patches only for external models.
    pub fn validate<'b>(&self, banks: &'b BankSet) -> Result<&'b ModelDescriptor, String> {
        let model = banks
            .model(&self.model_id)
            .ok_or_else(|| format!("unknown model `{}`", self.model_id))?;
        for spec in &model.hyperparam_schema {
            let value = self
                .hyperparams
                .get(spec.name())
                .ok_or_else(|| format!("missing hyperparameter `{}`", spec.name()))?;
            spec.validate(value)?;
        }
        if let Some(extra) = self.hyperparams.keys().find(|k| model.param(k).is_none()) {
            return Err(format!("`{}` has no hyperparameter `{extra}`", model.id));
        }
        for d in &self.directives {
            d.validate()?;
        }
        if self.freeform_patch.is_some() && model.native().is_some() {
            return Err("freeform patches are only accepted by external models".into());
        }
        Ok(model)
    }

    pub fn summary(&self) -> String {
        let hp: Vec<String> = self.hyperparams.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let dirs: Vec<String> = self.directives.iter().map(ToString::to_string).collect();
        format!(
            "model {} | hyperparams {{{}}} | directives [{}]{}",
            self.model_id,
            hp.join(", "),
            dirs.join(", "),
            if self.freeform_patch.is_some() { " | freeform patch attached" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    TrainError { message: String, log_excerpt: String },
    Timeout,
    InvalidOutput { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_loss: Option<f64>,
    pub duration_ms: u64,
    #[serde(default)]
    pub stdout_tail: String,
    #[serde(default)]
    pub stderr_tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunResult {
    pub fn failed(status: RunStatus, started: Instant) -> Self {
        Self {
            status,
            metrics: BTreeMap::new(),
            primary_loss: None,
            duration_ms: started.elapsed().as_millis() as u64,
            stdout_tail: String::new(),
            stderr_tail: String::new(),
            artifact_digest: None,
            warnings: Vec::new(),
        }
    }

    pub fn train_error(message: impl Into<String>, started: Instant) -> Self {
        Self::failed(
            RunStatus::TrainError { message: message.into(), log_excerpt: String::new() },
            started,
        )
    }

    /// A successful result; fails over to `InvalidOutput` when a requested
    /// criterion is missing or non-finite.
    pub fn success(metrics: BTreeMap<String, f64>, task: &TaskSpec, started: Instant) -> Self {
        if let Some(missing) = task
            .criteria
            .iter()
            .chain(std::iter::once(&task.primary_criterion))
            .find(|c| !metrics.get(*c).map(|v| v.is_finite()).unwrap_or(false))
        {
            return Self::failed(
                RunStatus::InvalidOutput { message: format!("criterion `{missing}` missing or non-finite") },
                started,
            );
        }
        let primary_loss = metrics.get(&task.primary_criterion).copied();
        Self {
            status: RunStatus::Success,
            metrics,
            primary_loss,
            duration_ms: started.elapsed().as_millis() as u64,
            stdout_tail: String::new(),
            stderr_tail: String::new(),
            artifact_digest: None,
            warnings: Vec::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self.status, RunStatus::Success)
    }

    /// Error text for feeding back to the planner, including any stderr tail.
    pub fn error_text(&self) -> Option<String> {
        let mut text = match &self.status {
            RunStatus::Success => return None,
            RunStatus::TrainError { message, log_excerpt } if !log_excerpt.is_empty() => {
                format!("train_error: {message}\n{log_excerpt}")
            }
            RunStatus::TrainError { message, .. } => format!("train_error: {message}"),
            RunStatus::Timeout => "timeout".to_string(),
            RunStatus::InvalidOutput { message } => format!("invalid_output: {message}"),
        };
        if !self.stderr_tail.is_empty() && !text.contains(&self.stderr_tail) {
            text.push_str("\nstderr:\n");
            text.push_str(&self.stderr_tail);
        }
        Some(text)
    }

    pub fn status_name(&self) -> &'static str {
        match self.status {
            RunStatus::Success => "success",
            RunStatus::TrainError { .. } => "train_error",
            RunStatus::Timeout => "timeout",
            RunStatus::InvalidOutput { .. } => "invalid_output",
        }
    }

    /// One-line summary for planner context.
    pub fn summary(&self) -> String {
        match &self.status {
            RunStatus::Success => {
                let m: Vec<String> = self.metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
                format!("success: {}", m.join(", "))
            }
            _ => self.error_text().unwrap_or_default(),
        }
    }
}

/// Anything that can turn a configuration into a measured result.
pub trait Executor: Send + Sync {
    fn run(&self, config: &CandidateConfig, task: &TaskSpec, banks: &BankSet) -> RunResult;
}

/// Default executor: native models in-process, external models through the
/// subprocess protocol.
#[derive(Debug, Clone)]
pub struct ModelRunner {
    pub native_timeout: Duration,
    pub external_timeout: Duration,
    pub scoring: Scoring,
}

impl Default for ModelRunner {
    fn default() -> Self {
        Self {
            native_timeout: DEFAULT_NATIVE_TIMEOUT,
            external_timeout: DEFAULT_EXTERNAL_TIMEOUT,
            scoring: Scoring::Child,
        }
    }
}

impl Executor for ModelRunner {
    fn run(&self, config: &CandidateConfig, task: &TaskSpec, banks: &BankSet) -> RunResult {
        let started = Instant::now();
        let model = match config.validate(banks) {
            Ok(m) => m,
            Err(e) => return RunResult::train_error(format!("invalid config: {e}"), started),
        };
        if !model.task_kinds.contains(&task.kind) {
            return RunResult::train_error(
                format!("model `{}` does not serve {} tasks", model.id, task.kind),
                started,
            );
        }
        match &model.binding {
            Binding::Native { model: native } => run_native(*native, config, task, self.native_timeout),
            Binding::External { command, timeout_ms } => {
                let timeout = timeout_ms.map(Duration::from_millis).unwrap_or(self.external_timeout);
                run_external(config, task, command, timeout, self.scoring)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::banks::fixtures::small_bank;

    #[test]
    fn config_validation() {
        let banks = small_bank();
        let model = banks.model("gd_linear").unwrap();
        let mut c = CandidateConfig::defaults_for(model, 7);
        assert!(c.validate(&banks).is_ok());
        c.hyperparams.insert("lr".into(), HyperValue::Real(5.0));
        assert!(c.validate(&banks).is_err());
        let mut c = CandidateConfig::defaults_for(model, 7);
        c.freeform_patch = Some("diff".into());
        assert!(c.validate(&banks).is_err());
        let mut c = CandidateConfig::defaults_for(model, 7);
        c.hyperparams.remove("epochs");
        assert!(c.validate(&banks).unwrap_err().contains("epochs"));
    }

    #[test]
    fn digest_tracks_content() {
        let banks = small_bank();
        let a = CandidateConfig::defaults_for(banks.model("gd_linear").unwrap(), 1);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.directives.push(DirectiveInstance::NormalizeZscore);
        assert_ne!(a.digest(), b.digest());
    }
}
