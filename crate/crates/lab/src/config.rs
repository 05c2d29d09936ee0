//! Experiment configuration: a TOML file with `[env]`, `[train]` and `[trace]`
//! sections.
//!
//! Required keys are `env.kind`, `env.vocab_size`, `env.prompt_len`,
//! `env.max_completion` (plus `env.min_filler` for `delayed_key`),
//! `train.variant`, `train.steps` and `train.lr`. Everything else has a default.

use std::fmt;
use std::path::Path;

use grpo_lambda_core::advantage::DEFAULT_CLAMP_FLOOR;
use grpo_lambda_core::envs::{EnvKind, EnvSpec};
use grpo_lambda_core::losses::{Normalization, SoftClamp};
use grpo_lambda_core::traces::{TraceConfig, TraceStyle, TraceUpdate};
use grpo_lambda_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
    Missing(&'static str),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse(e) => write!(f, "cannot parse config: {e}"),
            ConfigError::Missing(key) => write!(f, "missing required key `{key}`"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// On-disk layout. Every field is optional so missing keys can be reported by name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    env: RawEnv,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    trace: RawTrace,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnv {
    kind: Option<String>,
    vocab_size: Option<usize>,
    prompt_len: Option<usize>,
    max_completion: Option<usize>,
    min_filler: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    variant: Option<String>,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    clip_eps: Option<f64>,
    beta: Option<f64>,
    clamp: Option<bool>,
    clamp_floor: Option<f64>,
    group_size: Option<usize>,
    max_grad_norm: Option<f64>,
    batch_prompts: Option<usize>,
    normalization: Option<String>,
    soft_clamp: Option<String>,
    epochs: Option<usize>,
    context_order: Option<usize>,
    warm_start_steps: Option<usize>,
    warm_start_lr: Option<f64>,
    bias_correction: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrace {
    gamma: Option<f64>,
    lambda: Option<f64>,
    style: Option<String>,
    update: Option<String>,
    floor: Option<f64>,
}

/// Fully resolved configuration, serialized back out as the canonical form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub train: TrainSection,
    pub trace: TraceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvSection {
    pub kind: String,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub max_completion: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_filler: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    pub variant: String,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_eps: f64,
    pub beta: f64,
    pub clamp: bool,
    pub clamp_floor: f64,
    pub group_size: usize,
    pub max_grad_norm: f64,
    pub batch_prompts: usize,
    pub normalization: String,
    pub soft_clamp: String,
    pub epochs: usize,
    pub context_order: usize,
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    pub bias_correction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSection {
    pub gamma: f64,
    pub lambda: f64,
    pub style: String,
    pub update: String,
    pub floor: f64,
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub style: Option<String>,
    pub update: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let defaults = TrainConfig::default();
        let trace_defaults = TraceConfig::default();
        let env = raw.env;
        let train = raw.train;
        let trace = raw.trace;
        let cfg = ExperimentConfig {
            env: EnvSection {
                kind: env.kind.ok_or(ConfigError::Missing("env.kind"))?,
                vocab_size: env
                    .vocab_size
                    .ok_or(ConfigError::Missing("env.vocab_size"))?,
                prompt_len: env
                    .prompt_len
                    .ok_or(ConfigError::Missing("env.prompt_len"))?,
                max_completion: env
                    .max_completion
                    .ok_or(ConfigError::Missing("env.max_completion"))?,
                min_filler: env.min_filler,
            },
            train: TrainSection {
                variant: train.variant.ok_or(ConfigError::Missing("train.variant"))?,
                steps: train.steps.ok_or(ConfigError::Missing("train.steps"))?,
                lr: train.lr.ok_or(ConfigError::Missing("train.lr"))?,
                seed: train.seed.unwrap_or(defaults.seed),
                clip_eps: train.clip_eps.unwrap_or(defaults.clip_eps),
                beta: train.beta.unwrap_or(defaults.beta),
                clamp: train.clamp.unwrap_or(true),
                clamp_floor: train.clamp_floor.unwrap_or(DEFAULT_CLAMP_FLOOR),
                group_size: train.group_size.unwrap_or(defaults.group_size),
                max_grad_norm: train.max_grad_norm.unwrap_or(defaults.max_grad_norm),
                batch_prompts: train.batch_prompts.unwrap_or(defaults.batch_prompts),
                normalization: train.normalization.unwrap_or_else(|| "token_mean".into()),
                soft_clamp: train.soft_clamp.unwrap_or_else(|| "sigmoid".into()),
                epochs: train.epochs.unwrap_or(defaults.epochs),
                context_order: train
                    .context_order
                    .unwrap_or(env.prompt_len.unwrap_or(0) + 1),
                warm_start_steps: train.warm_start_steps.unwrap_or(defaults.warm_start_steps),
                warm_start_lr: train.warm_start_lr.unwrap_or(defaults.warm_start_lr),
                bias_correction: train.bias_correction.unwrap_or(defaults.bias_correction),
            },
            trace: TraceSection {
                gamma: trace.gamma.unwrap_or(trace_defaults.gamma),
                lambda: trace.lambda.unwrap_or(trace_defaults.lambda),
                style: trace.style.unwrap_or_else(|| "recent".into()),
                update: trace.update.unwrap_or_else(|| "eps_trace".into()),
                floor: trace.floor.unwrap_or(trace_defaults.floor),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(v) = &o.variant {
            self.train.variant = v.clone();
        }
        if let Some(v) = o.lambda {
            self.trace.lambda = v;
        }
        if let Some(v) = o.gamma {
            self.trace.gamma = v;
        }
        if let Some(v) = &o.style {
            self.trace.style = v.clone();
        }
        if let Some(v) = &o.update {
            self.trace.update = v.clone();
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.steps {
            self.train.steps = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        self.validate()
    }

    /// Checks every value by building the typed configurations.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env_spec()?;
        self.variant()?;
        self.train_config()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.trace_config()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn env_spec(&self) -> Result<EnvSpec, ConfigError> {
        let e = &self.env;
        let kind = match e.kind.as_str() {
            "copy_sum" => EnvKind::CopySum,
            "parity_chain" => EnvKind::ParityChain,
            "delayed_key" => EnvKind::DelayedKey {
                min_filler: e.min_filler.ok_or(ConfigError::Missing("env.min_filler"))?,
            },
            "all_success" => EnvKind::AllSuccess,
            other => return Err(ConfigError::Invalid(format!("unknown env.kind `{other}`"))),
        };
        EnvSpec::new(kind, e.vocab_size, e.prompt_len, e.max_completion)
            .map_err(|err| ConfigError::Invalid(err.to_string()))
    }

    pub fn variant(&self) -> Result<Variant, ConfigError> {
        parse_variant(&self.train.variant)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        Ok(TrainConfig {
            clip_eps: t.clip_eps,
            beta: t.beta,
            clamp_floor: t.clamp.then_some(t.clamp_floor),
            group_size: t.group_size,
            lr: t.lr,
            max_grad_norm: t.max_grad_norm,
            steps: t.steps,
            batch_prompts: t.batch_prompts,
            normalization: match t.normalization.as_str() {
                "token_mean" => Normalization::TokenMean,
                "max_len" => Normalization::MaxLen,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown train.normalization `{other}`"
                    )))
                }
            },
            soft_clamp: match t.soft_clamp.as_str() {
                "sigmoid" => SoftClamp::Sigmoid,
                "tanh" => SoftClamp::Tanh,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown train.soft_clamp `{other}`"
                    )))
                }
            },
            seed: t.seed,
            epochs: t.epochs,
            context_order: t.context_order,
            warm_start_steps: t.warm_start_steps,
            warm_start_lr: t.warm_start_lr,
            bias_correction: t.bias_correction,
        })
    }

    pub fn trace_config(&self) -> Result<TraceConfig, ConfigError> {
        let t = &self.trace;
        Ok(TraceConfig {
            gamma: t.gamma,
            lambda: t.lambda,
            style: parse_style(&t.style)?,
            update: match t.update.as_str() {
                "eps_trace" => TraceUpdate::EpsTrace,
                "eps_weight" => TraceUpdate::EpsWeight,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "unknown trace.update `{other}`"
                    )))
                }
            },
            floor: t.floor,
        })
    }

    /// Canonical TOML text; what gets persisted next to a run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical form with the seed zeroed, so runs of one
    /// configuration share a prefix across seeds.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.seed = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<env>-<variant>-<hash>-seed<seed>`.
    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-{}-seed{}",
            self.env.kind,
            self.train.variant,
            self.hash(),
            self.train.seed
        )
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, ConfigError> {
    match s {
        "grpo" => Ok(Variant::Grpo),
        "grpo_lambda" => Ok(Variant::GrpoLambda),
        other => Err(ConfigError::Invalid(format!(
            "unknown train.variant `{other}`"
        ))),
    }
}

pub fn parse_style(s: &str) -> Result<TraceStyle, ConfigError> {
    match s {
        "recent" => Ok(TraceStyle::Recent),
        "both" => Ok(TraceStyle::Both),
        other => Err(ConfigError::Invalid(format!(
            "unknown trace.style `{other}`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[env]
kind = "copy_sum"
vocab_size = 8
prompt_len = 2
max_completion = 4

[train]
variant = "grpo_lambda"
steps = 10
lr = 20.0
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.group_size, 8);
        assert_eq!(cfg.train.beta, 0.04);
        assert_eq!(cfg.train.clamp_floor, -0.1);
        assert_eq!(cfg.train.max_grad_norm, 1.0);
        assert_eq!(cfg.train.batch_prompts, 16);
        assert_eq!(cfg.train.context_order, 3);
        assert_eq!(cfg.trace.lambda, 0.99);
    }

    #[test]
    fn canonical_form_roundtrips() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut other = cfg.clone();
        other
            .apply(&Overrides {
                seed: Some(5),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(cfg.hash(), other.hash());
        assert_ne!(cfg.run_name(), other.run_name());
        other
            .apply(&Overrides {
                lambda: Some(0.5),
                ..Overrides::default()
            })
            .unwrap();
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn missing_keys_are_named() {
        let text = MINIMAL.replace("lr = 20.0\n", "");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
        let text = MINIMAL.replace("kind = \"copy_sum\"", "kind = \"delayed_key\"");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("env.min_filler"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        for (from, to) in [
            ("lr = 20.0", "lr = -1.0"),
            ("variant = \"grpo_lambda\"", "variant = \"ppo\""),
            ("steps = 10", "steps = 10\nunknown_key = 1"),
            ("vocab_size = 8", "vocab_size = 1"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(ExperimentConfig::parse(&text).is_err(), "{to}");
        }
    }
}
