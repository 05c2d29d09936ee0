//! Cross-module properties of the core crate.

use grpo_lambda_core::advantage::nae;
use grpo_lambda_core::envs::EnvSpec;
use grpo_lambda_core::losses::{compute_loss, LossConfig, LossInputs, LossKind};
use grpo_lambda_core::oracle::{exact_values, three_forms};
use grpo_lambda_core::policy::{ContextKey, Gradient, PolicyParams};
use grpo_lambda_core::rollout::sample_group;
use grpo_lambda_core::traces::{build_trace_matrix, TraceConfig, TraceStyle};
use grpo_lambda_core::trainer::{train, Executor, Sequential, TrainConfig, Variant};
use proptest::prelude::*;

fn policy_from(vocab: usize, order: usize, logits: &[f64]) -> PolicyParams {
    let mut p = PolicyParams::new(vocab, order).unwrap();
    let contexts = (vocab as u64 + 1).pow(order as u32);
    for k in 0..contexts {
        let row = (0..vocab)
            .map(|j| logits[(k as usize * vocab + j) % logits.len()])
            .collect();
        p.set_logits(ContextKey(k), row).unwrap();
    }
    p
}

/// Runs jobs in reverse order; results must not depend on it.
struct Reversed;

impl Executor for Reversed {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let mut out: Vec<R> = (0..n).rev().map(f).collect();
        out.reverse();
        out
    }
}

#[test]
fn training_ignores_job_order() {
    let env = EnvSpec::delayed_key(5, 1, 5, 1).unwrap();
    let cfg = TrainConfig {
        steps: 15,
        batch_prompts: 5,
        lr: 5.0,
        context_order: 3,
        ..TrainConfig::default()
    };
    let a = train(
        &env,
        &cfg,
        &TraceConfig::default(),
        Variant::GrpoLambda,
        &Sequential,
    )
    .unwrap();
    let b = train(
        &env,
        &cfg,
        &TraceConfig::default(),
        Variant::GrpoLambda,
        &Reversed,
    )
    .unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.policy, b.policy);
}

#[test]
fn all_success_value_is_one_under_any_policy() {
    let env = EnvSpec::all_success(3, 1, 4).unwrap();
    let p = policy_from(3, 2, &[0.3, -1.2, 2.0, 0.7, -0.4]);
    let table = exact_values(&env, &p, &[1], 1.0).unwrap();
    assert!(table.values.values().all(|v| (v - 1.0).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_zero_loss_equals_grpo(
        logits in prop::collection::vec(-2.0f64..2.0, 7),
        shift in -0.3f64..0.3,
        seed in any::<u64>(),
        gamma in 0.5f64..=1.0,
    ) {
        let env = EnvSpec::copy_sum(4, 1, 5).unwrap();
        let behavior = policy_from(4, 2, &logits);
        let mut policy = behavior.clone();
        let keys: Vec<ContextKey> = behavior.rows().map(|(k, _)| k).collect();
        for (i, k) in keys.into_iter().enumerate() {
            policy.row_mut(k)[i % 4] += shift;
        }
        let group = sample_group(&env, &[2], &behavior, 6, seed, 0, 0).unwrap();
        let adv = nae(&group, gamma).clamped(-0.1).unwrap();
        let inputs = LossInputs {
            policy: &policy,
            reference: &behavior,
            group: &group,
            advantages: &adv.per_trajectory,
        };
        let trace = build_trace_matrix(&TraceConfig::new(gamma, 0.0, TraceStyle::Both), 5).unwrap();
        let cfg = LossConfig::default();
        let a = compute_loss(LossKind::Grpo, &inputs, &trace, &cfg).unwrap();
        let b = compute_loss(LossKind::EpsTrace, &inputs, &trace, &cfg).unwrap();
        prop_assert_eq!(a.breakdown.total, b.breakdown.total);
        prop_assert!(a.gradient.max_abs_diff(&b.gradient) <= 1e-12);
    }

    #[test]
    fn eps_trace_gradient_at_ratio_one_is_eligibility_form(
        logits in prop::collection::vec(-2.0f64..2.0, 11),
        seed in any::<u64>(),
        lambda in 0.0f64..=1.0,
    ) {
        let env = EnvSpec::copy_sum(5, 1, 6).unwrap();
        let policy = policy_from(5, 2, &logits);
        let group = sample_group(&env, &[3], &policy, 4, seed, 1, 2).unwrap();
        let adv: Vec<Vec<f64>> = group
            .trajectories
            .iter()
            .map(|t| (0..t.len()).map(|i| 0.5 - 0.2 * i as f64).collect())
            .collect();
        let inputs = LossInputs { policy: &policy, reference: &policy, group: &group, advantages: &adv };
        let trace_cfg = TraceConfig::new(1.0, lambda, TraceStyle::Recent);
        let trace = build_trace_matrix(&trace_cfg, 6).unwrap();
        let cfg = LossConfig { beta: 0.0, ..LossConfig::default() };
        let out = compute_loss(LossKind::EpsTrace, &inputs, &trace, &cfg).unwrap();
        let mut expected = Gradient::new();
        let mut scale = 0.0;
        for (t, a) in group.trajectories.iter().zip(&adv) {
            let grads: Vec<Gradient> = t.steps().map(|(s, x)| policy.grad_log_prob(&s, x).unwrap()).collect();
            let forms = three_forms(a, &grads, trace_cfg.decay()).unwrap();
            let w = 1.0 / (4.0 * t.len() as f64);
            expected.add_scaled(&forms.advantage_form, -w);
            scale += w * forms.magnitude;
        }
        prop_assert!(out.gradient.max_abs_diff(&expected) <= 1e-10 * scale.max(1.0));
        prop_assert_eq!(out.breakdown.clipped_fraction, 0.0);
    }
}
