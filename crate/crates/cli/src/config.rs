//! Run configuration: defaults, then a YAML file, then environment, then
//! flags. Later layers win field by field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Deserialize;
use tsloop::controller::PhaseConfig;
use tsloop::llm::ChatParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Scripted,
    Random,
    Llm,
    Replay,
}

impl std::str::FromStr for PlannerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, false).map_err(|_| format!("unknown planner `{s}` (scripted|random|llm|replay)"))
    }
}

/// One source of settings. Every field is optional so layers can be merged.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub task: Option<PathBuf>,
    pub banks: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub planner: Option<PlannerKind>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub warmup: Option<u64>,
    pub opt: Option<u64>,
    pub debug_retries: Option<u32>,
    pub parallel: Option<usize>,
    pub context_budget: Option<usize>,
    pub transcript: Option<PathBuf>,
    pub llm_model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl Layer {
    pub fn overlay(mut self, top: Layer) -> Layer {
        overlay!(
            self, top, task, banks, out, planner, seed, k, warmup, opt, debug_retries, parallel, context_budget,
            transcript, llm_model, temperature, max_tokens
        );
        self
    }

    /// Settings from `TSLOOP_*` variables, plus `LLM_MODEL`.
    pub fn from_env(env: &BTreeMap<String, String>) -> Result<Layer, String> {
        fn get<T: std::str::FromStr>(env: &BTreeMap<String, String>, name: &str) -> Result<Option<T>, String>
        where
            T::Err: std::fmt::Display,
        {
            match env.get(name).filter(|v| !v.is_empty()) {
                None => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|e| format!("environment variable {name}={v:?}: {e}")),
            }
        }
        Ok(Layer {
            task: get(env, "TSLOOP_TASK")?,
            banks: get(env, "TSLOOP_BANKS")?,
            out: get(env, "TSLOOP_OUT")?,
            planner: get(env, "TSLOOP_PLANNER")?,
            seed: get(env, "TSLOOP_SEED")?,
            k: get(env, "TSLOOP_K")?,
            warmup: get(env, "TSLOOP_WARMUP")?,
            opt: get(env, "TSLOOP_OPT")?,
            debug_retries: get(env, "TSLOOP_DEBUG_RETRIES")?,
            parallel: get(env, "TSLOOP_PARALLEL")?,
            context_budget: get(env, "TSLOOP_CONTEXT_BUDGET")?,
            transcript: get(env, "TSLOOP_TRANSCRIPT")?,
            llm_model: get(env, "LLM_MODEL")?,
            temperature: get(env, "TSLOOP_TEMPERATURE")?,
            max_tokens: get(env, "TSLOOP_MAX_TOKENS")?,
        })
    }

    pub fn from_yaml(text: &str) -> Result<Layer, String> {
        check_strict_yaml(text)?;
        if text.trim().is_empty() {
            return Ok(Layer::default());
        }
        let value: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
        if has_tag(&value) {
            return Err("tags are not allowed".into());
        }
        serde_yaml::from_value(value).map_err(|e| e.to_string())
    }

    pub fn from_yaml_file(path: &Path) -> Result<Layer, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_yaml(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

fn has_tag(v: &serde_yaml::Value) -> bool {
    use serde_yaml::Value;
    match v {
        Value::Tagged(_) => true,
        Value::Sequence(s) => s.iter().any(has_tag),
        Value::Mapping(m) => m.iter().any(|(k, v)| has_tag(k) || has_tag(v)),
        _ => false,
    }
}

/// Reject YAML features outside the accepted subset: anchors, aliases, tags,
/// merge keys, directives and multiple documents. serde_yaml would resolve
/// most of these silently, so this runs on the raw text.
pub fn check_strict_yaml(text: &str) -> Result<(), String> {
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let bad = |what: &str| Err(format!("line {line_no}: {what} are not allowed"));
        if line.starts_with('%') {
            return bad("directives");
        }
        if (line.starts_with("---") && n > 0) || line.starts_with("...") {
            return bad("multiple documents");
        }
        let chars: Vec<char> = line.chars().collect();
        let mut quote: Option<char> = None;
        let mut at_value = true;
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if let Some(q) = quote {
                if c == q {
                    quote = None;
                }
                i += 1;
                continue;
            }
            if c == ' ' || c == '\t' {
                i += 1;
                continue;
            }
            if c == '#' {
                break;
            }
            if at_value {
                match c {
                    '&' => return bad("anchors"),
                    '*' => return bad("aliases"),
                    '!' => return bad("tags"),
                    '<' if chars.get(i + 1) == Some(&'<') => return bad("merge keys"),
                    '"' | '\'' => {
                        quote = Some(c);
                        at_value = false;
                        i += 1;
                        continue;
                    }
                    _ => {}
                }
            }
            let next_blank = chars.get(i + 1).is_none_or(|n| *n == ' ' || *n == '\t');
            at_value = match c {
                '[' | '{' | ',' => true,
                ':' | '-' | '?' => next_blank,
                _ => false,
            };
            i += 1;
        }
    }
    Ok(())
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: PathBuf,
    pub banks: PathBuf,
    pub out: PathBuf,
    pub planner: PlannerKind,
    pub phase: PhaseConfig,
    pub transcript: Option<PathBuf>,
    pub chat: ChatParams,
}

impl RunConfig {
    pub fn resolve(layer: Layer) -> Result<RunConfig, String> {
        let defaults = PhaseConfig::default();
        let chat_defaults = ChatParams::default();
        let task = layer.task.ok_or("no task file given (--task, TSLOOP_TASK or `task:` in the config)")?;
        let planner = layer.planner.unwrap_or(PlannerKind::Scripted);
        if planner == PlannerKind::Replay && layer.transcript.is_none() {
            return Err("the replay planner needs --transcript".into());
        }
        let phase = PhaseConfig {
            k: layer.k.unwrap_or(defaults.k),
            warmup_iters: layer.warmup.unwrap_or(defaults.warmup_iters),
            opt_iters: layer.opt.unwrap_or(defaults.opt_iters),
            debug_retries: layer.debug_retries.unwrap_or(defaults.debug_retries),
            seed: layer.seed.unwrap_or(defaults.seed),
            parallelism: layer.parallel.or(defaults.parallelism),
            context_budget: layer.context_budget.unwrap_or(defaults.context_budget),
        };
        phase.validate().map_err(|e| e.to_string())?;
        let temperature = layer.temperature.unwrap_or(chat_defaults.temperature);
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(format!("temperature must be a finite value >= 0, got {temperature}"));
        }
        Ok(RunConfig {
            task,
            banks: layer.banks.unwrap_or_else(|| PathBuf::from("banks")),
            out: layer.out.unwrap_or_else(|| PathBuf::from("out")),
            planner,
            phase,
            transcript: layer.transcript,
            chat: ChatParams {
                temperature,
                max_tokens: layer.max_tokens.unwrap_or(chat_defaults.max_tokens),
                model_name: layer.llm_model.unwrap_or(chat_defaults.model_name),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let file = Layer::from_yaml("task: a.json\nseed: 1\nk: 3\nwarmup: 4\n").unwrap();
        let env = Layer::from_env(&env(&[("TSLOOP_SEED", "2"), ("TSLOOP_K", "5")])).unwrap();
        let flags = Layer { seed: Some(3), ..Layer::default() };
        let cfg = RunConfig::resolve(Layer::default().overlay(file).overlay(env).overlay(flags)).unwrap();
        assert_eq!(cfg.phase.seed, 3);
        assert_eq!(cfg.phase.k, 5);
        assert_eq!(cfg.phase.warmup_iters, 4);
        assert_eq!(cfg.phase.opt_iters, PhaseConfig::default().opt_iters);
        assert_eq!(cfg.task, PathBuf::from("a.json"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = Layer::from_yaml("task: a.json\nseeds: 3\n").unwrap_err();
        assert!(err.contains("seeds"), "{err}");
    }

    #[test]
    fn strict_subset() {
        assert!(Layer::from_yaml("k: 2 # two candidates\nplanner: random\n").is_ok());
        assert!(Layer::from_yaml("task: \"a&b*!.json\"\n").is_ok());
        for bad in [
            "base: &b 3\nk: *b\n",
            "k: *b\n",
            "k: !!int 3\n",
            "<<: {k: 2}\n",
            "%YAML 1.2\n---\nk: 2\n",
            "k: 2\n---\nk: 3\n",
            "k: [1, *x]\n",
        ] {
            assert!(Layer::from_yaml(bad).is_err(), "{bad:?} accepted");
        }
    }

    #[test]
    fn env_errors_name_the_variable() {
        let err = Layer::from_env(&env(&[("TSLOOP_K", "two")])).unwrap_err();
        assert!(err.contains("TSLOOP_K"));
        let err = Layer::from_env(&env(&[("TSLOOP_PLANNER", "oracle")])).unwrap_err();
        assert!(err.contains("oracle"));
    }

    #[test]
    fn validation() {
        let base = || Layer { task: Some("t.json".into()), ..Layer::default() };
        assert!(RunConfig::resolve(Layer { opt: Some(0), ..base() }).is_err());
        assert!(RunConfig::resolve(Layer { k: Some(0), ..base() }).is_err());
        assert!(RunConfig::resolve(Layer { planner: Some(PlannerKind::Replay), ..base() }).is_err());
        assert!(RunConfig::resolve(Layer::default()).is_err());
        assert_eq!(RunConfig::resolve(base()).unwrap().planner, PlannerKind::Scripted);
    }
}
