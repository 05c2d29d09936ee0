//! GRPO and GRPO-λ objectives with analytic parameter gradients.
//!
//! All objectives are in minimization form,
//! `total = policy_loss + β · kl_loss`, where the policy loss is the negated
//! clipped surrogate and `kl_loss` is the exact KL to the reference policy
//! over the states visited by the group.
//!
//! The behavior log-probabilities stored in each trajectory play the role of
//! `log π_old`; `log π_θ` and its gradient come from the `policy` argument.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::policy::{ContextKey, Gradient, PolicyParams, Visits};
use crate::rollout::{Group, Trajectory};
use crate::traces::{gae_ratio, TraceMatrix};

/// How per-token losses are reduced to one scalar per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Mean over the sequence's tokens, then mean over the group.
    #[default]
    TokenMean,
    /// Sum over tokens divided by the maximum completion length, then mean over the group.
    MaxLen,
}

/// Soft clamp applied to log-probabilities in the ε-weight objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftClamp {
    /// `1 + sigmoid(x - 1)`
    #[default]
    Sigmoid,
    /// `1 + tanh(x - 1)`
    Tanh,
}

impl SoftClamp {
    pub fn value(&self, logp: f64) -> f64 {
        match self {
            SoftClamp::Sigmoid => 1.0 + math::sigmoid(logp - 1.0),
            SoftClamp::Tanh => 1.0 + math::tanh(logp - 1.0),
        }
    }

    pub fn derivative(&self, logp: f64) -> f64 {
        match self {
            SoftClamp::Sigmoid => {
                let s = math::sigmoid(logp - 1.0);
                s * (1.0 - s)
            }
            SoftClamp::Tanh => {
                let t = math::tanh(logp - 1.0);
                1.0 - t * t
            }
        }
    }
}

/// Which objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Grpo,
    EpsTrace,
    EpsWeight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub normalization: Normalization,
    /// Denominator for [`Normalization::MaxLen`].
    pub max_len: usize,
    pub soft_clamp: SoftClamp,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            beta: 0.04,
            normalization: Normalization::TokenMean,
            max_len: 1,
            soft_clamp: SoftClamp::Sigmoid,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(invalid("clip_eps must be > 0"));
        }
        if !(self.beta >= 0.0) {
            return Err(invalid("beta must be >= 0"));
        }
        if self.max_len == 0 {
            return Err(invalid("max_len must be >= 1"));
        }
        Ok(())
    }
}

/// Everything a loss needs besides its configuration.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// Current parameters θ.
    pub policy: &'a PolicyParams,
    /// Frozen reference π_ref for the KL term.
    pub reference: &'a PolicyParams,
    pub group: &'a Group,
    /// Clamped per-token advantages, one vector per trajectory.
    pub advantages: &'a [Vec<f64>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub policy_loss: f64,
    pub kl_loss: f64,
    pub total: f64,
    /// Ratio fed to the clip for every token (per-token or trace-accumulated).
    pub ratios: Vec<Vec<f64>>,
    /// Fraction of tokens on the clipped branch.
    pub clipped_fraction: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub gradient: Gradient,
}

/// Minimization-form total: `policy + β · kl`.
pub fn total_objective(policy_loss: f64, kl_loss: f64, beta: f64) -> f64 {
    policy_loss + beta * kl_loss
}

/// One token of the clipped surrogate `-min(c·δ, clip(c, 1±ε)·δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub loss: f64,
    /// Derivative of `loss` with respect to the ratio `c`.
    pub dloss_dratio: f64,
    pub clipped: bool,
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> Surrogate {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        Surrogate {
            loss: -unclipped,
            dloss_dratio: -advantage,
            clipped: false,
        }
    } else {
        Surrogate {
            loss: -clipped,
            dloss_dratio: 0.0,
            clipped: true,
        }
    }
}

/// ε-weight trace weights `ε^w_t = Σ_{c≤t} W[t][c] · f(logp_c)`.
pub fn eps_weights(trace: &TraceMatrix, logp: &[f64], clamp: SoftClamp) -> Result<Vec<f64>> {
    if logp.len() > trace.dim() {
        return Err(Error::LengthMismatch {
            expected: trace.dim(),
            got: logp.len(),
        });
    }
    let f: Vec<f64> = logp.iter().map(|&v| clamp.value(v)).collect();
    Ok((0..logp.len())
        .map(|t| trace.row(t).iter().zip(&f).map(|(w, v)| w * v).sum())
        .collect())
}

/// Current-policy log-probabilities and gradient rows along a trajectory.
struct SequenceEval {
    keys: Vec<ContextKey>,
    logp: Vec<f64>,
    grad_rows: Vec<Vec<f64>>,
}

fn evaluate(policy: &PolicyParams, traj: &Trajectory) -> Result<SequenceEval> {
    let mut keys = Vec::with_capacity(traj.len());
    let mut logp = Vec::with_capacity(traj.len());
    let mut grad_rows = Vec::with_capacity(traj.len());
    for (state, action) in traj.steps() {
        let (key, row) = policy.grad_log_prob_row(&state, action)?;
        let lp = policy.log_probs_at(key)[action as usize];
        if !lp.is_finite() {
            return Err(Error::NonFinite("current log-probabilities"));
        }
        keys.push(key);
        logp.push(lp);
        grad_rows.push(row);
    }
    Ok(SequenceEval {
        keys,
        logp,
        grad_rows,
    })
}

fn check_inputs(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    let trajs = &inputs.group.trajectories;
    if inputs.advantages.len() != trajs.len() {
        return Err(Error::LengthMismatch {
            expected: trajs.len(),
            got: inputs.advantages.len(),
        });
    }
    for (traj, adv) in trajs.iter().zip(inputs.advantages) {
        if adv.len() != traj.len() || traj.behavior_logp.len() != traj.len() {
            return Err(Error::LengthMismatch {
                expected: traj.len(),
                got: adv.len(),
            });
        }
        if !adv.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("advantages"));
        }
        if !traj.behavior_logp.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("behavior log-probabilities"));
        }
    }
    Ok(())
}

/// Per-sequence reduction weight, including the `1/g` group mean.
fn sequence_weight(cfg: &LossConfig, group_size: usize, len: usize) -> f64 {
    let denom = match cfg.normalization {
        Normalization::TokenMean => len.max(1),
        Normalization::MaxLen => cfg.max_len,
    };
    1.0 / (group_size as f64 * denom as f64)
}

/// Adds the KL term and assembles the output.
fn finish(
    inputs: &LossInputs<'_>,
    cfg: &LossConfig,
    evals: &[SequenceEval],
    policy_loss: f64,
    mut gradient: Gradient,
    ratios: Vec<Vec<f64>>,
    clipped: usize,
) -> Result<LossOutput> {
    let mut visits = Visits::new();
    for e in evals {
        for &k in &e.keys {
            visits.record(k, 1.0);
        }
    }
    let (kl_loss, kl_grad) = inputs
        .policy
        .kl_to_reference_with_grad(inputs.reference, &visits)?;
    if cfg.beta != 0.0 {
        gradient.add_scaled(&kl_grad, cfg.beta);
    }
    let tokens: usize = evals.iter().map(|e| e.keys.len()).sum();
    Ok(LossOutput {
        breakdown: LossBreakdown {
            policy_loss,
            kl_loss,
            total: total_objective(policy_loss, kl_loss, cfg.beta),
            ratios,
            clipped_fraction: if tokens == 0 {
                0.0
            } else {
                clipped as f64 / tokens as f64
            },
            tokens,
        },
        gradient,
    })
}

/// GRPO: per-token ratio `exp(logp_new - logp_old)` in the clipped surrogate.
pub fn grpo_loss(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    check_inputs(inputs, cfg)?;
    let g = inputs.group.size();
    let mut policy_loss = 0.0;
    let mut gradient = Gradient::new();
    let mut ratios = Vec::with_capacity(g);
    let mut clipped = 0;
    let mut evals = Vec::with_capacity(g);
    for (traj, adv) in inputs.group.trajectories.iter().zip(inputs.advantages) {
        let eval = evaluate(inputs.policy, traj)?;
        let w = sequence_weight(cfg, g, traj.len());
        let mut traj_ratios = Vec::with_capacity(traj.len());
        for t in 0..traj.len() {
            let ratio = math::exp(eval.logp[t] - traj.behavior_logp[t]);
            let s = clipped_surrogate(ratio, adv[t], cfg.clip_eps);
            policy_loss += w * s.loss;
            clipped += s.clipped as usize;
            let a = w * s.dloss_dratio * ratio;
            gradient.add_row_scaled(eval.keys[t], &eval.grad_rows[t], a);
            traj_ratios.push(ratio);
        }
        ratios.push(traj_ratios);
        evals.push(eval);
    }
    finish(inputs, cfg, &evals, policy_loss, gradient, ratios, clipped)
}

/// GRPO-λ (ε-trace): the trace-accumulated ratio `exp(Σ_c W[t][c](new_c - old_c))`
/// replaces the per-token ratio; its gradient is
/// `ratio_t · Σ_c W[t][c] ∇log π(a_c | s_c)`.
pub fn grpo_lambda_eps_trace_loss(
    inputs: &LossInputs<'_>,
    trace: &TraceMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_inputs(inputs, cfg)?;
    let g = inputs.group.size();
    let mut policy_loss = 0.0;
    let mut gradient = Gradient::new();
    let mut ratios = Vec::with_capacity(g);
    let mut clipped = 0;
    let mut evals = Vec::with_capacity(g);
    for (traj, adv) in inputs.group.trajectories.iter().zip(inputs.advantages) {
        let eval = evaluate(inputs.policy, traj)?;
        let n = traj.len();
        let w = sequence_weight(cfg, g, n);
        let coef = gae_ratio(trace, &eval.logp, &traj.behavior_logp)?;
        let mut coeffs = vec![0.0; n];
        for t in 0..n {
            let s = clipped_surrogate(coef[t], adv[t], cfg.clip_eps);
            policy_loss += w * s.loss;
            clipped += s.clipped as usize;
            let a = w * s.dloss_dratio * coef[t];
            if a != 0.0 {
                for (c, &wt) in trace.row(t).iter().enumerate() {
                    if wt != 0.0 {
                        coeffs[c] += a * wt;
                    }
                }
            }
        }
        for c in 0..n {
            gradient.add_row_scaled(eval.keys[c], &eval.grad_rows[c], coeffs[c]);
        }
        ratios.push(coef);
        evals.push(eval);
    }
    finish(inputs, cfg, &evals, policy_loss, gradient, ratios, clipped)
}

/// GRPO-λ (ε-weight): per-token clipped objective `A_t` weighted by
/// `ε^w_t = Σ_c W[t][c] f(log π_θ(a_c | s_c))`; gradients flow through both factors.
pub fn grpo_lambda_eps_weight_loss(
    inputs: &LossInputs<'_>,
    trace: &TraceMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_inputs(inputs, cfg)?;
    let g = inputs.group.size();
    let mut policy_loss = 0.0;
    let mut gradient = Gradient::new();
    let mut ratios = Vec::with_capacity(g);
    let mut clipped = 0;
    let mut evals = Vec::with_capacity(g);
    for (traj, adv) in inputs.group.trajectories.iter().zip(inputs.advantages) {
        let eval = evaluate(inputs.policy, traj)?;
        let n = traj.len();
        let w = sequence_weight(cfg, g, n);
        let weights = eps_weights(trace, &eval.logp, cfg.soft_clamp)?;
        let fprime: Vec<f64> = eval
            .logp
            .iter()
            .map(|&v| cfg.soft_clamp.derivative(v))
            .collect();
        let mut coeffs = vec![0.0; n];
        let mut traj_ratios = Vec::with_capacity(n);
        for t in 0..n {
            let ratio = math::exp(eval.logp[t] - traj.behavior_logp[t]);
            let s = clipped_surrogate(ratio, adv[t], cfg.clip_eps);
            policy_loss += w * weights[t] * s.loss;
            clipped += s.clipped as usize;
            coeffs[t] += w * weights[t] * s.dloss_dratio * ratio;
            let a = w * s.loss;
            if a != 0.0 {
                for (c, &wt) in trace.row(t).iter().enumerate() {
                    if wt != 0.0 {
                        coeffs[c] += a * wt * fprime[c];
                    }
                }
            }
            traj_ratios.push(ratio);
        }
        for c in 0..n {
            gradient.add_row_scaled(eval.keys[c], &eval.grad_rows[c], coeffs[c]);
        }
        ratios.push(traj_ratios);
        evals.push(eval);
    }
    finish(inputs, cfg, &evals, policy_loss, gradient, ratios, clipped)
}

/// Dispatches on `kind`; the trace matrix is ignored for [`LossKind::Grpo`].
pub fn compute_loss(
    kind: LossKind,
    inputs: &LossInputs<'_>,
    trace: &TraceMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    match kind {
        LossKind::Grpo => grpo_loss(inputs, cfg),
        LossKind::EpsTrace => grpo_lambda_eps_trace_loss(inputs, trace, cfg),
        LossKind::EpsWeight => grpo_lambda_eps_weight_loss(inputs, trace, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Token;
    use crate::traces::{build_trace_matrix, eligibility_accumulate, TraceConfig, TraceStyle};

    fn single_group(policy: &PolicyParams, completions: &[&[Token]], logp_shift: f64) -> Group {
        let prompt = vec![0];
        let trajectories = completions
            .iter()
            .map(|c| {
                let mut t = Trajectory {
                    prompt: prompt.clone(),
                    completion: c.to_vec(),
                    behavior_logp: vec![],
                    reward: 0.0,
                    truncated: false,
                };
                t.behavior_logp = t
                    .steps()
                    .map(|(s, a)| policy.log_prob(&s, a).unwrap() + logp_shift)
                    .collect();
                t
            })
            .collect();
        Group::new(prompt, trajectories).unwrap()
    }

    fn cfg() -> LossConfig {
        LossConfig {
            beta: 0.0,
            max_len: 4,
            ..LossConfig::default()
        }
    }

    #[test]
    fn surrogate_branches() {
        let s = clipped_surrogate(1.0, 1.0, 0.2);
        assert_eq!((s.loss, s.dloss_dratio, s.clipped), (-1.0, -1.0, false));
        let s = clipped_surrogate(1.5, 1.0, 0.2);
        assert_eq!(s.loss, -1.2);
        assert_eq!(s.dloss_dratio, 0.0);
        assert!(s.clipped);
        // negative advantage below the lower edge is clipped
        let s = clipped_surrogate(0.5, -0.1, 0.2);
        assert!(s.clipped);
        assert!((s.loss - 0.08).abs() < 1e-15);
        // negative advantage above the upper edge stays unclipped
        let s = clipped_surrogate(3.0, -0.1, 0.2);
        assert!(!s.clipped);
        assert!((s.loss - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ratio_one_gradient_is_mean_score() {
        let policy = PolicyParams::new(3, 1).unwrap();
        let group = single_group(&policy, &[&[0, 2], &[1, 1, 2]], 0.0);
        let adv = vec![vec![1.0; 2], vec![1.0; 3]];
        let reference = policy.clone();
        let inputs = LossInputs {
            policy: &policy,
            reference: &reference,
            group: &group,
            advantages: &adv,
        };
        let out = grpo_loss(&inputs, &cfg()).unwrap();
        assert!((out.breakdown.policy_loss + 1.0).abs() < 1e-15);
        let mut expected = Gradient::new();
        for traj in &group.trajectories {
            for (s, a) in traj.steps() {
                let g = policy.grad_log_prob(&s, a).unwrap();
                expected.add_scaled(&g, -1.0 / (2.0 * traj.len() as f64));
            }
        }
        assert!(out.gradient.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn clipped_tokens_carry_no_gradient() {
        let policy = PolicyParams::new(3, 1).unwrap();
        // behavior logp lower by ln 1.5 -> ratio 1.5 everywhere
        let group = single_group(&policy, &[&[0, 2], &[1, 2]], -(1.5f64).ln());
        let adv = vec![vec![1.0; 2], vec![1.0; 2]];
        let inputs = LossInputs {
            policy: &policy,
            reference: &policy,
            group: &group,
            advantages: &adv,
        };
        let out = grpo_loss(&inputs, &cfg()).unwrap();
        assert!((out.breakdown.policy_loss + 1.2).abs() < 1e-12);
        assert_eq!(out.breakdown.clipped_fraction, 1.0);
        assert!(out.gradient.l2_norm() == 0.0);
    }

    #[test]
    fn zero_advantages_give_zero_policy_gradient() {
        let policy = PolicyParams::new(4, 1).unwrap();
        let group = single_group(&policy, &[&[0, 3], &[1, 2, 3]], 0.1);
        let adv = vec![vec![0.0; 2], vec![0.0; 3]];
        let trace = build_trace_matrix(&TraceConfig::new(1.0, 0.9, TraceStyle::Both), 4).unwrap();
        let inputs = LossInputs {
            policy: &policy,
            reference: &policy,
            group: &group,
            advantages: &adv,
        };
        for kind in [LossKind::Grpo, LossKind::EpsTrace, LossKind::EpsWeight] {
            let out = compute_loss(kind, &inputs, &trace, &cfg()).unwrap();
            assert_eq!(out.breakdown.policy_loss, 0.0);
            assert_eq!(out.gradient.l2_norm(), 0.0);
        }
    }

    #[test]
    fn eps_weight_limits() {
        let id = TraceMatrix::identity(3);
        let w = eps_weights(&id, &[-1e6, -1e6, -1e6], SoftClamp::Sigmoid).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let w = eps_weights(&id, &[1.0, 1.0, 1.0], SoftClamp::Sigmoid).unwrap();
        assert_eq!(w, vec![1.5; 3]);
        let w = eps_weights(&id, &[1.0], SoftClamp::Tanh).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn eps_trace_at_ratio_one_matches_eligibility_form() {
        let mut policy = PolicyParams::new(3, 1).unwrap();
        for s in 0..3 {
            let key = policy.context_key(&[s]);
            policy
                .set_logits(key, vec![0.2 * s as f64, -0.4, 0.1])
                .unwrap();
        }
        let group = single_group(&policy, &[&[0, 1, 0, 2], &[1, 2]], 0.0);
        let adv = vec![vec![0.5, -0.1, 0.3, 1.0], vec![-0.1, 0.7]];
        let tc = TraceConfig::new(1.0, 0.8, TraceStyle::Recent);
        let trace = build_trace_matrix(&tc, 4).unwrap();
        let inputs = LossInputs {
            policy: &policy,
            reference: &policy,
            group: &group,
            advantages: &adv,
        };
        let out = grpo_lambda_eps_trace_loss(&inputs, &trace, &cfg()).unwrap();
        assert_eq!(out.breakdown.clipped_fraction, 0.0);
        let mut expected = Gradient::new();
        for (traj, a) in group.trajectories.iter().zip(&adv) {
            let grads: Vec<Gradient> = traj
                .steps()
                .map(|(s, act)| policy.grad_log_prob(&s, act).unwrap())
                .collect();
            let elig = eligibility_accumulate(&grads, tc.decay());
            for (t, e) in elig.iter().enumerate() {
                expected.add_scaled(e, -a[t] / (2.0 * traj.len() as f64));
            }
        }
        assert!(out.gradient.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn mismatched_advantages_are_rejected() {
        let policy = PolicyParams::new(3, 1).unwrap();
        let group = single_group(&policy, &[&[0, 2], &[1, 2]], 0.0);
        let adv = vec![vec![1.0; 2]];
        let inputs = LossInputs {
            policy: &policy,
            reference: &policy,
            group: &group,
            advantages: &adv,
        };
        assert!(grpo_loss(&inputs, &cfg()).is_err());
        let bad = vec![vec![f64::NAN, 0.0], vec![0.0, 0.0]];
        let inputs = LossInputs {
            advantages: &bad,
            ..inputs
        };
        assert_eq!(
            grpo_loss(&inputs, &cfg()),
            Err(Error::NonFinite("advantages"))
        );
    }

    #[test]
    fn max_len_normalization_scales_by_budget() {
        let policy = PolicyParams::new(3, 1).unwrap();
        let group = single_group(&policy, &[&[0, 2], &[1, 1, 2]], 0.0);
        let adv = vec![vec![1.0; 2], vec![1.0; 3]];
        let inputs = LossInputs {
            policy: &policy,
            reference: &policy,
            group: &group,
            advantages: &adv,
        };
        let c = LossConfig {
            normalization: Normalization::MaxLen,
            ..cfg()
        };
        let out = grpo_loss(&inputs, &c).unwrap();
        // (2 + 3) tokens / (2 sequences * 4 max_len)
        assert!((out.breakdown.policy_loss + 5.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn total_objective_examples() {
        assert_eq!(total_objective(1.0, 0.5, 0.0), 1.0);
        assert!((total_objective(1.0, 0.5, 0.04) - 1.02).abs() < 1e-15);
    }

    #[test]
    fn kl_term_enters_total() {
        let policy = PolicyParams::new(3, 1).unwrap();
        let mut reference = policy.clone();
        let key = reference.context_key(&[0]);
        reference.set_logits(key, vec![1.0, 0.0, -1.0]).unwrap();
        let group = single_group(&policy, &[&[0, 2], &[1, 2]], 0.0);
        let adv = vec![vec![1.0; 2], vec![-0.1; 2]];
        let inputs = LossInputs {
            policy: &policy,
            reference: &reference,
            group: &group,
            advantages: &adv,
        };
        let c = LossConfig {
            beta: 0.04,
            ..cfg()
        };
        let out = grpo_loss(&inputs, &c).unwrap();
        let b = &out.breakdown;
        assert!(b.kl_loss > 0.0);
        assert_eq!(b.total, b.policy_loss + 0.04 * b.kl_loss);
    }
}
