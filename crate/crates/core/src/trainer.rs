//! The optimization loop: sample, score, clip, update, record.

use alloc::format;
use alloc::vec::Vec;

use crate::advantage::{nae, nae_with_bias_correction, DEFAULT_CLAMP_FLOOR};
use crate::envs::EnvSpec;
use crate::error::{invalid, Error, Result};
use crate::losses::{compute_loss, LossConfig, LossInputs, LossKind, Normalization, SoftClamp};
use crate::policy::{Gradient, PolicyParams, Visits};
use crate::rollout::{sample_group, Group, StreamId};
use crate::traces::{build_trace_matrix, TraceConfig, TraceMatrix, TraceUpdate};

/// Member index of the warm-start demonstration streams.
pub const WARM_START_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Grpo,
    /// Uses the trace configuration's update rule.
    GrpoLambda,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Grpo => "grpo",
            Variant::GrpoLambda => "grpo_lambda",
        }
    }

    pub fn loss_kind(&self, trace: &TraceConfig) -> LossKind {
        match (self, trace.update) {
            (Variant::Grpo, _) => LossKind::Grpo,
            (Variant::GrpoLambda, TraceUpdate::EpsTrace) => LossKind::EpsTrace,
            (Variant::GrpoLambda, TraceUpdate::EpsWeight) => LossKind::EpsWeight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub clip_eps: f64,
    pub beta: f64,
    /// Floor for negative advantages; `None` disables clamping.
    pub clamp_floor: Option<f64>,
    pub group_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    /// Prompts per step.
    pub batch_prompts: usize,
    pub normalization: Normalization,
    pub soft_clamp: SoftClamp,
    pub seed: u64,
    /// Gradient updates per sampled batch.
    pub epochs: usize,
    /// Tokens of history the tabular policy conditions on.
    pub context_order: usize,
    /// Behavior-cloning steps on format demonstrations before RL.
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    /// Adds the ΔV bound to the advantages.
    pub bias_correction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            beta: 0.04,
            clamp_floor: Some(DEFAULT_CLAMP_FLOOR),
            group_size: 8,
            lr: 1.0,
            max_grad_norm: 1.0,
            steps: 500,
            batch_prompts: 16,
            normalization: Normalization::TokenMean,
            soft_clamp: SoftClamp::Sigmoid,
            seed: 0,
            epochs: 1,
            context_order: 3,
            warm_start_steps: 0,
            warm_start_lr: 1.0,
            bias_correction: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(floor) = self.clamp_floor {
            if !(floor <= 0.0) {
                return Err(invalid("clamp_floor must be <= 0"));
            }
        }
        if self.group_size < 2 {
            return Err(invalid("group_size must be >= 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be finite and >= 0"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(invalid("max_grad_norm must be > 0"));
        }
        if self.batch_prompts == 0 {
            return Err(invalid("batch_prompts must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if !(self.warm_start_lr >= 0.0) {
            return Err(invalid("warm_start_lr must be >= 0"));
        }
        self.loss_config(1).validate()
    }

    pub fn loss_config(&self, max_len: usize) -> LossConfig {
        LossConfig {
            clip_eps: self.clip_eps,
            beta: self.beta,
            normalization: self.normalization,
            max_len,
            soft_clamp: self.soft_clamp,
        }
    }
}

/// Runs independent jobs and returns their results in index order.
pub trait Executor: Sync {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_reward: f64,
    pub kl_to_ref: f64,
    pub mean_completion_len: f64,
    pub policy_loss: f64,
    pub kl_loss: f64,
    pub clipped_fraction: f64,
    pub degenerate_group_fraction: f64,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 8] = [
        "step",
        "mean_reward",
        "kl_to_ref",
        "mean_completion_len",
        "policy_loss",
        "kl_loss",
        "clipped_fraction",
        "degenerate_group_fraction",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub policy: PolicyParams,
    pub reference: PolicyParams,
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_grad_norm(grad: &mut Gradient, max_norm: f64) -> f64 {
    let norm = grad.l2_norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

/// Trailing moving average over at most `window` points.
pub fn smoothed(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &x) in series.iter().enumerate() {
        sum += x;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// First step (1-based count of completed steps) whose smoothed value
/// reaches `threshold`.
pub fn steps_to_threshold(series: &[f64], threshold: f64, window: usize) -> Option<usize> {
    smoothed(series, window)
        .iter()
        .position(|&v| v >= threshold)
        .map(|i| i + 1)
}

struct GroupResult {
    group: Group,
    advantages: Vec<Vec<f64>>,
    degenerate: bool,
}

struct GroupLoss {
    policy_loss: f64,
    kl_loss: f64,
    clipped: f64,
    tokens: usize,
    gradient: Gradient,
}

/// Trains a fresh tabular policy on `env`.
pub fn train<E: Executor>(
    env: &EnvSpec,
    cfg: &TrainConfig,
    trace_cfg: &TraceConfig,
    variant: Variant,
    executor: &E,
) -> Result<TrainOutcome> {
    train_with_trace(env, cfg, trace_cfg, variant, executor, None)
}

/// Like [`train`], optionally substituting the trace matrix (fault injection).
pub fn train_with_trace<E: Executor>(
    env: &EnvSpec,
    cfg: &TrainConfig,
    trace_cfg: &TraceConfig,
    variant: Variant,
    executor: &E,
    trace_override: Option<TraceMatrix>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    trace_cfg.validate()?;
    let mut policy = PolicyParams::new(env.vocab_size(), cfg.context_order)?;
    warm_start(env, cfg, &mut policy)?;
    let reference = policy.clone();
    let trace = match trace_override {
        Some(t) => t,
        None => build_trace_matrix(trace_cfg, env.max_completion())?,
    };
    let kind = variant.loss_kind(trace_cfg);
    let loss_cfg = cfg.loss_config(env.max_completion());
    let b = cfg.batch_prompts;
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let step_id = step as u64;
        let snapshot = policy.snapshot();
        let groups = executor
            .map(b, |i| {
                let mut rng = StreamId::prompt(cfg.seed, step_id, i as u64).rng();
                let prompt = env.sample_prompt(&mut rng);
                let group = sample_group(
                    env,
                    &prompt,
                    &snapshot,
                    cfg.group_size,
                    cfg.seed,
                    step_id,
                    i as u64,
                )?;
                let raw = if cfg.bias_correction {
                    nae_with_bias_correction(&group, trace_cfg.gamma, &snapshot, env.eos() as usize)
                } else {
                    nae(&group, trace_cfg.gamma)
                };
                let adv = match cfg.clamp_floor {
                    Some(floor) => raw.clamped(floor)?,
                    None => raw,
                };
                Ok(GroupResult {
                    group,
                    advantages: adv.per_trajectory,
                    degenerate: adv.degenerate,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let mut last = None;
        for _ in 0..cfg.epochs {
            let losses = executor
                .map(b, |i| {
                    let inputs = LossInputs {
                        policy: &policy,
                        reference: &reference,
                        group: &groups[i].group,
                        advantages: &groups[i].advantages,
                    };
                    let out = compute_loss(kind, &inputs, &trace, &loss_cfg)?;
                    let bd = &out.breakdown;
                    if !bd.total.is_finite() || !out.gradient.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            step,
                            dump: format!(
                                "prompt index {i}: policy_loss={} kl_loss={} group={:?} advantages={:?}",
                                bd.policy_loss, bd.kl_loss, groups[i].group, groups[i].advantages
                            ),
                        });
                    }
                    Ok(GroupLoss {
                        policy_loss: bd.policy_loss,
                        kl_loss: bd.kl_loss,
                        clipped: bd.clipped_fraction * bd.tokens as f64,
                        tokens: bd.tokens,
                        gradient: out.gradient,
                    })
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;

            // Reduce in prompt order so the result is independent of scheduling.
            let mut grad = Gradient::new();
            for l in &losses {
                grad.add_scaled(&l.gradient, 1.0 / b as f64);
            }
            clip_global_grad_norm(&mut grad, cfg.max_grad_norm);
            policy.apply_update(&grad, cfg.lr);
            last = Some(losses);
        }
        let losses = last.unwrap_or_default();

        let mut visits = Visits::new();
        let mut reward = 0.0;
        let mut length = 0.0;
        let mut n = 0usize;
        for r in &groups {
            for traj in &r.group.trajectories {
                reward += traj.reward;
                length += traj.len() as f64;
                n += 1;
                for t in 0..traj.len() {
                    visits.record(policy.context_key(&traj.state_at(t)), 1.0);
                }
            }
        }
        let tokens: usize = losses.iter().map(|l| l.tokens).sum();
        let clipped: f64 = losses.iter().map(|l| l.clipped).sum();
        let kl_to_ref = policy.kl_to_reference(&reference, &visits)?;
        let row = MetricsRow {
            step,
            mean_reward: reward / n as f64,
            kl_to_ref,
            mean_completion_len: length / n as f64,
            policy_loss: losses.iter().map(|l| l.policy_loss).sum::<f64>() / b as f64,
            kl_loss: losses.iter().map(|l| l.kl_loss).sum::<f64>() / b as f64,
            clipped_fraction: if tokens == 0 {
                0.0
            } else {
                clipped / tokens as f64
            },
            degenerate_group_fraction: groups.iter().filter(|r| r.degenerate).count() as f64
                / b as f64,
        };
        if !row.kl_to_ref.is_finite() || !policy.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                dump: format!("parameters or KL became non-finite: {row:?}"),
            });
        }
        metrics.push(row);
    }
    Ok(TrainOutcome {
        metrics,
        policy,
        reference,
    })
}

/// Behavior cloning on [`EnvSpec::format_demo`] completions.
fn warm_start(env: &EnvSpec, cfg: &TrainConfig, policy: &mut PolicyParams) -> Result<()> {
    for step in 0..cfg.warm_start_steps {
        let mut grad = Gradient::new();
        let mut tokens = 0usize;
        for i in 0..cfg.batch_prompts {
            let mut rng = StreamId::new(cfg.seed, step as u64, i as u64, WARM_START_STREAM).rng();
            let mut state = env.sample_prompt(&mut rng);
            for a in env.format_demo(&mut rng) {
                let (key, row) = policy.grad_log_prob_row(&state, a)?;
                grad.add_row_scaled(key, &row, -1.0);
                tokens += 1;
                state.push(a);
            }
        }
        grad.scale(1.0 / tokens.max(1) as f64);
        clip_global_grad_norm(&mut grad, cfg.max_grad_norm);
        policy.apply_update(&grad, cfg.warm_start_lr);
    }
    Ok(())
}
