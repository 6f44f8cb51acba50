//! The closed catalog of refinement directives and their translation into
//! per-model training settings.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::NativeModel;

/// One refinement directive with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectiveInstance {
    NormalizeZscore,
    NormalizeMinmax,
    EarlyStopping { patience: u32 },
    LrSchedulePlateau { factor: f64, patience: u32 },
    WeightDecay { lambda: f64 },
    GradientClip { max_norm: f64 },
    AugmentJitter { sigma: f64 },
    CovShrinkage { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    NormalizeZscore,
    NormalizeMinmax,
    EarlyStopping,
    LrSchedulePlateau,
    WeightDecay,
    GradientClip,
    AugmentJitter,
    CovShrinkage,
}

/// Catalog bounds of one directive parameter (inclusive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBounds {
    pub name: &'static str,
    pub min: f64,
    pub max: f64,
    pub integer: bool,
    pub default: f64,
}

const fn bounds(name: &'static str, min: f64, max: f64, integer: bool, default: f64) -> ParamBounds {
    ParamBounds { name, min, max, integer, default }
}

impl DirectiveKind {
    pub const ALL: [DirectiveKind; 8] = [
        DirectiveKind::NormalizeZscore,
        DirectiveKind::NormalizeMinmax,
        DirectiveKind::EarlyStopping,
        DirectiveKind::LrSchedulePlateau,
        DirectiveKind::WeightDecay,
        DirectiveKind::GradientClip,
        DirectiveKind::AugmentJitter,
        DirectiveKind::CovShrinkage,
    ];

    pub fn params(self) -> &'static [ParamBounds] {
        use DirectiveKind::*;
        const PATIENCE: ParamBounds = bounds("patience", 1.0, 1000.0, true, 5.0);
        const PLATEAU: [ParamBounds; 2] = [bounds("factor", 0.01, 0.99, false, 0.5), PATIENCE];
        const DECAY: ParamBounds = bounds("lambda", 0.0, 1.0, false, 1e-4);
        const CLIP: ParamBounds = bounds("max_norm", 1e-6, 1e6, false, 1.0);
        const JITTER: ParamBounds = bounds("sigma", 0.0, 1.0, false, 0.01);
        const SHRINK: ParamBounds = bounds("lambda", 0.0, 1.0, false, 0.1);
        match self {
            NormalizeZscore | NormalizeMinmax => &[],
            EarlyStopping => &[PATIENCE],
            LrSchedulePlateau => &PLATEAU,
            WeightDecay => &[DECAY],
            GradientClip => &[CLIP],
            AugmentJitter => &[JITTER],
            CovShrinkage => &[SHRINK],
        }
    }

    pub fn name(self) -> &'static str {
        use DirectiveKind::*;
        match self {
            NormalizeZscore => "normalize_zscore",
            NormalizeMinmax => "normalize_minmax",
            EarlyStopping => "early_stopping",
            LrSchedulePlateau => "lr_schedule_plateau",
            WeightDecay => "weight_decay",
            GradientClip => "gradient_clip",
            AugmentJitter => "augment_jitter",
            CovShrinkage => "cov_shrinkage",
        }
    }
}

impl fmt::Display for DirectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl DirectiveInstance {
    pub fn kind(&self) -> DirectiveKind {
        use DirectiveInstance as D;
        match self {
            D::NormalizeZscore => DirectiveKind::NormalizeZscore,
            D::NormalizeMinmax => DirectiveKind::NormalizeMinmax,
            D::EarlyStopping { .. } => DirectiveKind::EarlyStopping,
            D::LrSchedulePlateau { .. } => DirectiveKind::LrSchedulePlateau,
            D::WeightDecay { .. } => DirectiveKind::WeightDecay,
            D::GradientClip { .. } => DirectiveKind::GradientClip,
            D::AugmentJitter { .. } => DirectiveKind::AugmentJitter,
            D::CovShrinkage { .. } => DirectiveKind::CovShrinkage,
        }
    }

    pub fn params(&self) -> BTreeMap<&'static str, f64> {
        use DirectiveInstance as D;
        let mut m = BTreeMap::new();
        match *self {
            D::NormalizeZscore | D::NormalizeMinmax => {}
            D::EarlyStopping { patience } => {
                m.insert("patience", f64::from(patience));
            }
            D::LrSchedulePlateau { factor, patience } => {
                m.insert("factor", factor);
                m.insert("patience", f64::from(patience));
            }
            D::WeightDecay { lambda } | D::CovShrinkage { lambda } => {
                m.insert("lambda", lambda);
            }
            D::GradientClip { max_norm } => {
                m.insert("max_norm", max_norm);
            }
            D::AugmentJitter { sigma } => {
                m.insert("sigma", sigma);
            }
        }
        m
    }

    /// Build from a kind and named parameters; missing parameters take the
    /// catalog default, unknown ones are rejected.
    pub fn from_parts(kind: DirectiveKind, params: &BTreeMap<String, f64>) -> Result<Self, String> {
        let spec = kind.params();
        if let Some(unknown) = params.keys().find(|k| !spec.iter().any(|b| b.name == k.as_str())) {
            return Err(format!("{kind} has no parameter `{unknown}`"));
        }
        let get = |name: &str| {
            let b = spec.iter().find(|b| b.name == name).expect("catalog parameter");
            params.get(name).copied().unwrap_or(b.default)
        };
        use DirectiveKind as K;
        let d = match kind {
            K::NormalizeZscore => DirectiveInstance::NormalizeZscore,
            K::NormalizeMinmax => DirectiveInstance::NormalizeMinmax,
            K::EarlyStopping => DirectiveInstance::EarlyStopping { patience: to_u32(get("patience")) },
            K::LrSchedulePlateau => DirectiveInstance::LrSchedulePlateau {
                factor: get("factor"),
                patience: to_u32(get("patience")),
            },
            K::WeightDecay => DirectiveInstance::WeightDecay { lambda: get("lambda") },
            K::GradientClip => DirectiveInstance::GradientClip { max_norm: get("max_norm") },
            K::AugmentJitter => DirectiveInstance::AugmentJitter { sigma: get("sigma") },
            K::CovShrinkage => DirectiveInstance::CovShrinkage { lambda: get("lambda") },
        };
        for (name, value) in params {
            let b = spec.iter().find(|b| b.name == name.as_str()).expect("checked above");
            if b.integer && value.fract() != 0.0 {
                return Err(format!("{kind}.{name} must be an integer, got {value}"));
            }
        }
        d.validate()?;
        Ok(d)
    }

    /// Check every parameter against the catalog bounds.
    pub fn validate(&self) -> Result<(), String> {
        let kind = self.kind();
        for (name, value) in self.params() {
            let b = kind
                .params()
                .iter()
                .find(|b| b.name == name)
                .expect("catalog parameter");
            if !value.is_finite() || value < b.min || value > b.max {
                return Err(format!(
                    "{kind}.{name} = {value} outside [{}, {}]",
                    b.min, b.max
                ));
            }
        }
        Ok(())
    }
}

fn to_u32(x: f64) -> u32 {
    if x.is_finite() && x >= 0.0 && x <= f64::from(u32::MAX) {
        x as u32
    } else {
        0
    }
}

impl fmt::Display for DirectiveInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params = self.params();
        if params.is_empty() {
            return write!(f, "{}", self.kind());
        }
        let inner: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{}({})", self.kind(), inner.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Zscore,
    Minmax,
}

/// Training settings a native model actually uses after applying directives.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EffectiveSettings {
    pub normalization: Option<Normalization>,
    pub early_stopping: Option<u32>,
    pub lr_plateau: Option<(f64, u32)>,
    pub weight_decay: Option<f64>,
    pub gradient_clip: Option<f64>,
    pub jitter: Option<f64>,
    pub cov_shrinkage: Option<f64>,
    pub warnings: Vec<String>,
}

impl NativeModel {
    pub fn honors(self, kind: DirectiveKind) -> bool {
        use DirectiveKind as K;
        match self {
            NativeModel::NaiveLast | NativeModel::ExpSmoothing => false,
            NativeModel::GdLinear => !matches!(kind, K::CovShrinkage),
            NativeModel::GaussianGen => {
                matches!(kind, K::NormalizeZscore | K::NormalizeMinmax | K::CovShrinkage)
            }
            NativeModel::BlockBootstrapGen => matches!(kind, K::AugmentJitter),
        }
    }
}

/// Translate directives into settings for `model`. Directives the model does
/// not use are skipped with a warning; for repeated settings the last wins.
pub fn apply_directives(directives: &[DirectiveInstance], model: NativeModel) -> EffectiveSettings {
    let mut s = EffectiveSettings::default();
    for d in directives {
        if !model.honors(d.kind()) {
            let msg = format!("{} ignored: not applicable to {}", d, model.name());
            log::warn!("{msg}");
            s.warnings.push(msg);
            continue;
        }
        let overwritten = match *d {
            DirectiveInstance::NormalizeZscore => s.normalization.replace(Normalization::Zscore).is_some(),
            DirectiveInstance::NormalizeMinmax => s.normalization.replace(Normalization::Minmax).is_some(),
            DirectiveInstance::EarlyStopping { patience } => s.early_stopping.replace(patience).is_some(),
            DirectiveInstance::LrSchedulePlateau { factor, patience } => {
                s.lr_plateau.replace((factor, patience)).is_some()
            }
            DirectiveInstance::WeightDecay { lambda } => s.weight_decay.replace(lambda).is_some(),
            DirectiveInstance::GradientClip { max_norm } => s.gradient_clip.replace(max_norm).is_some(),
            DirectiveInstance::AugmentJitter { sigma } => s.jitter.replace(sigma).is_some(),
            DirectiveInstance::CovShrinkage { lambda } => s.cov_shrinkage.replace(lambda).is_some(),
        };
        if overwritten {
            let msg = format!("{d} overrides an earlier directive");
            log::warn!("{msg}");
            s.warnings.push(msg);
        }
    }
    s
}
