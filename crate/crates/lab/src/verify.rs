//! Oracle suites behind `grpo-lambda verify`.
//!
//! Every suite draws its random instances from per-instance ChaCha streams,
//! so results do not depend on the thread count.

use std::fmt;
use std::time::{Duration, Instant};

use grpo_lambda_core::advantage::nae;
use grpo_lambda_core::envs::{EnvSpec, Token};
use grpo_lambda_core::losses::{compute_loss, LossConfig, LossInputs, LossKind, SoftClamp};
use grpo_lambda_core::oracle;
use grpo_lambda_core::policy::{ContextKey, Gradient, PolicyParams};
use grpo_lambda_core::rollout::{sample_group, Group, Trajectory};
use grpo_lambda_core::traces::{build_trace_matrix, TraceConfig, TraceMatrix, TraceStyle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed: Duration,
    pub note: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:<20} instances={:<6} max_error={:.3e} tolerance={:.0e} time={:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.tolerance,
            self.elapsed.as_secs_f64()
        )?;
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        Ok(())
    }
}

/// Knobs for `verify`; the defaults are the acceptance sizes.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub lambda0_groups: usize,
    pub identity_instances: usize,
    pub gradient_groups: usize,
    pub bound_instances: usize,
    pub nae_groups: usize,
    pub max_trace_dim: usize,
    /// Perturbs one entry of every trace matrix handed to the losses.
    pub inject_trace_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda0_groups: 1000,
            identity_instances: 1000,
            gradient_groups: 100,
            bound_instances: 50,
            nae_groups: 1000,
            max_trace_dim: 32,
            inject_trace_fault: false,
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    vec![
        lambda0_fallback(opts),
        three_form(opts),
        gradients(opts),
        value_gap_bound(opts),
        value_gap_expected(opts),
        nae_semantics(opts),
        trace_structure(opts),
        enumeration_mass(opts),
    ]
}

fn instance_rng(seed: u64, suite: u64, i: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&suite.to_le_bytes());
    key[16..24].copy_from_slice(&(i as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn finish(
    name: &'static str,
    instances: usize,
    max_error: f64,
    tolerance: f64,
    start: Instant,
    note: String,
) -> SuiteReport {
    SuiteReport {
        name,
        instances,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
        elapsed: start.elapsed(),
        note,
    }
}

/// NaN-aware maximum: any NaN poisons the result so the suite fails.
fn worst(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |acc, v| {
        if v.is_nan() || acc.is_nan() {
            f64::NAN
        } else {
            acc.max(v)
        }
    })
}

fn random_policy(rng: &mut ChaCha8Rng, vocab: usize, order: usize, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::new(vocab, order).expect("small policy");
    let contexts = (vocab as u64 + 1).pow(order as u32);
    for k in 0..contexts {
        let logits = (0..vocab).map(|_| rng.gen_range(-scale..scale)).collect();
        p.set_logits(ContextKey(k), logits).expect("finite logits");
    }
    p
}

fn perturbed(rng: &mut ChaCha8Rng, base: &PolicyParams, scale: f64) -> PolicyParams {
    let mut p = base.clone();
    let keys: Vec<ContextKey> = base.rows().map(|(k, _)| k).collect();
    for k in keys {
        for z in p.row_mut(k).iter_mut() {
            *z += rng.gen_range(-scale..scale);
        }
    }
    p
}

/// A sampled group plus everything a loss needs.
pub struct LossInstance {
    pub env: EnvSpec,
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub group: Group,
    pub advantages: Vec<Vec<f64>>,
}

impl LossInstance {
    /// Random group on CopySum. `ratio_one` makes the current policy equal
    /// the behavior policy.
    pub fn random(rng: &mut ChaCha8Rng, ratio_one: bool) -> Self {
        let vocab = rng.gen_range(3..=6);
        let tmax = rng.gen_range(2..=8);
        let env = EnvSpec::copy_sum(vocab, 1, tmax).expect("valid env");
        let mut behavior = random_policy(rng, vocab, 2, 1.5);
        // keep sequences long enough for the traces to matter
        let eos = env.eos() as usize;
        let keys: Vec<ContextKey> = behavior.rows().map(|(k, _)| k).collect();
        for k in keys {
            behavior.row_mut(k)[eos] -= 1.0;
        }
        let policy = if ratio_one {
            behavior.clone()
        } else {
            perturbed(rng, &behavior, 0.3)
        };
        let reference = perturbed(rng, &behavior, 0.5);
        let prompt = env.sample_prompt(rng);
        let g = rng.gen_range(2..=8);
        let group = sample_group(&env, &prompt, &behavior, g, rng.gen(), 0, 0).expect("sampling");
        let advantages = group
            .trajectories
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.gen_range(-0.1..1.5)).collect())
            .collect();
        Self {
            env,
            policy,
            reference,
            group,
            advantages,
        }
    }

    pub fn inputs(&self) -> LossInputs<'_> {
        LossInputs {
            policy: &self.policy,
            reference: &self.reference,
            group: &self.group,
            advantages: &self.advantages,
        }
    }

    pub fn touched_keys(&self) -> Vec<ContextKey> {
        let mut keys: Vec<ContextKey> = self
            .group
            .trajectories
            .iter()
            .flat_map(|t| (0..t.len()).map(|i| self.policy.context_key(&t.state_at(i))))
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }
}

fn corrupt(mut trace: TraceMatrix) -> TraceMatrix {
    if trace.dim() >= 3 {
        let v = trace.get(2, 0);
        trace.set(2, 0, v + 0.5);
    }
    trace
}

fn trace_for(cfg: &TraceConfig, dim: usize, fault: bool) -> TraceMatrix {
    let t = build_trace_matrix(cfg, dim).expect("valid trace config");
    if fault {
        corrupt(t)
    } else {
        t
    }
}

/// ε-trace at `λ = 0` against GRPO: loss and gradient, absolute difference.
pub fn lambda0_fallback(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let errors: Vec<f64> = (0..opts.lambda0_groups)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(opts.seed, 1, i);
            let inst = LossInstance::random(&mut rng, false);
            let cfg = LossConfig {
                max_len: inst.env.max_completion(),
                ..LossConfig::default()
            };
            let trace_cfg = TraceConfig::new(rng.gen_range(0.5..=1.0), 0.0, TraceStyle::Recent);
            let trace = trace_for(
                &trace_cfg,
                inst.env.max_completion(),
                opts.inject_trace_fault,
            );
            let a = compute_loss(LossKind::Grpo, &inst.inputs(), &trace, &cfg).expect("grpo");
            let b =
                compute_loss(LossKind::EpsTrace, &inst.inputs(), &trace, &cfg).expect("eps-trace");
            let loss = (a.breakdown.total - b.breakdown.total).abs();
            loss.max(a.gradient.max_abs_diff(&b.gradient))
        })
        .collect();
    finish(
        "lambda0_fallback",
        errors.len(),
        worst(errors.into_iter()),
        1e-12,
        start,
        String::new(),
    )
}

/// The three-form identity on random vectors, plus the same identity
/// realized by the ε-trace loss gradient at ratio 1.
pub fn three_form(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let forms: Vec<f64> = (0..opts.identity_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(opts.seed, 2, i);
            let n = rng.gen_range(1..=64);
            let dim = rng.gen_range(1..=6);
            let decay = rng.gen_range(0.0..=1.0);
            let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let grads: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            oracle::three_form_identity(&deltas, &grads, decay).expect("finite")
        })
        .collect();
    let losses: Vec<f64> = (0..opts.identity_instances / 10)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(opts.seed, 3, i);
            identity_loss_discrepancy(&mut rng, opts.inject_trace_fault)
        })
        .collect();
    let worst_forms = worst(forms.iter().copied());
    let worst_loss = worst(losses.iter().copied());
    finish(
        "three_form",
        forms.len() + losses.len(),
        worst_forms.max(worst_loss),
        1e-10,
        start,
        format!("forms {worst_forms:.1e}, loss gradient {worst_loss:.1e}"),
    )
}

/// Relative gap between the ε-trace loss gradient at ratio 1 (no KL) and
/// `-Σ_i w_i Σ_t δ_t ε_t` computed by the oracle from per-token score rows.
fn identity_loss_discrepancy(rng: &mut ChaCha8Rng, fault: bool) -> f64 {
    let inst = LossInstance::random(rng, true);
    let trace_cfg = TraceConfig::new(1.0, rng.gen_range(0.0..=1.0), TraceStyle::Recent);
    let trace = trace_for(&trace_cfg, inst.env.max_completion(), fault);
    let cfg = LossConfig {
        beta: 0.0,
        ..LossConfig::default()
    };
    let out = compute_loss(LossKind::EpsTrace, &inst.inputs(), &trace, &cfg).expect("eps-trace");
    let g = inst.group.size() as f64;
    let mut expected = Gradient::new();
    let mut magnitude = 0.0;
    for (traj, adv) in inst.group.trajectories.iter().zip(&inst.advantages) {
        let grads: Vec<Gradient> = traj
            .steps()
            .map(|(s, a)| inst.policy.grad_log_prob(&s, a).expect("in range"))
            .collect();
        let forms = oracle::three_forms(adv, &grads, trace_cfg.decay()).expect("finite");
        let w = 1.0 / (g * traj.len() as f64);
        expected.add_scaled(&forms.recursive_form, -w);
        magnitude += w * forms.magnitude;
    }
    let gap = out.gradient.max_abs_diff(&expected);
    if magnitude == 0.0 {
        gap
    } else {
        gap / magnitude
    }
}

/// Each loss variant against central finite differences of its total.
pub fn gradients(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let variants: [(&str, LossKind, TraceStyle); 5] = [
        ("grpo", LossKind::Grpo, TraceStyle::Recent),
        ("eps_trace/recent", LossKind::EpsTrace, TraceStyle::Recent),
        ("eps_trace/both", LossKind::EpsTrace, TraceStyle::Both),
        ("eps_weight/recent", LossKind::EpsWeight, TraceStyle::Recent),
        ("eps_weight/both", LossKind::EpsWeight, TraceStyle::Both),
    ];
    let mut notes = Vec::new();
    let mut overall = 0.0;
    let mut count = 0;
    for (vi, (name, kind, style)) in variants.iter().enumerate() {
        let reports: Vec<oracle::FiniteDiffReport> = (0..opts.gradient_groups)
            .into_par_iter()
            .map(|i| {
                let mut rng = instance_rng(opts.seed, 10 + vi as u64, i);
                let inst = LossInstance::random(&mut rng, false);
                let trace_cfg = TraceConfig::new(1.0, rng.gen_range(0.5..=1.0), *style);
                let trace = trace_for(
                    &trace_cfg,
                    inst.env.max_completion(),
                    opts.inject_trace_fault,
                );
                let cfg = LossConfig {
                    soft_clamp: if rng.gen_bool(0.5) {
                        SoftClamp::Sigmoid
                    } else {
                        SoftClamp::Tanh
                    },
                    ..LossConfig::default()
                };
                let analytic = compute_loss(*kind, &inst.inputs(), &trace, &cfg)
                    .expect("loss")
                    .gradient;
                let loss_at = |p: &PolicyParams| {
                    let inputs = LossInputs {
                        policy: p,
                        ..inst.inputs()
                    };
                    compute_loss(*kind, &inputs, &trace, &cfg).map(|o| o.breakdown.total)
                };
                oracle::finite_diff_check(
                    loss_at,
                    &inst.policy,
                    &analytic,
                    &inst.touched_keys(),
                    oracle::FD_DEFAULT_STEP,
                )
                .expect("finite")
            })
            .collect();
        let w = worst(reports.iter().map(|r| r.max_rel_error));
        let abs = worst(reports.iter().map(|r| r.max_abs_error));
        notes.push(format!("{name} rel {w:.1e} abs {abs:.1e}"));
        overall = worst([overall, w].into_iter());
        count += reports.len();
    }
    finish("gradients", count, overall, 1e-5, start, notes.join(", "))
}

fn random_value_gap_env(rng: &mut ChaCha8Rng) -> (EnvSpec, PolicyParams, Vec<Token>) {
    let vocab = rng.gen_range(2..=4);
    let tmax = rng.gen_range(1..=6);
    let env = EnvSpec::all_success(vocab, 1, tmax).expect("valid env");
    let order = rng.gen_range(0..=3);
    let policy = random_policy(rng, vocab, order, 2.0);
    let prompt = env.sample_prompt(rng);
    (env, policy, prompt)
}

/// Per-state ΔV bound on all-success MDPs with γ = 1.
pub fn value_gap_bound(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let reports: Vec<oracle::ValueGapReport> = (0..opts.bound_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(opts.seed, 20, i);
            let (env, policy, prompt) = random_value_gap_env(&mut rng);
            oracle::check_value_gap(&env, &policy, &prompt, 1.0).expect("within budget")
        })
        .collect();
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let states: usize = reports.iter().map(|r| r.states).sum();
    let excess = reports
        .iter()
        .map(|r| r.max_excess)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut r = finish(
        "value_gap_bound",
        reports.len(),
        excess.max(0.0),
        oracle::VALUE_GAP_TOLERANCE,
        start,
        format!("{states} states, {violations} violations, max(ΔV - bound) = {excess:.2e}"),
    );
    r.passed = violations == 0;
    r
}

/// The expectation form of the bound on CopySum with γ < 1, where truncation
/// is unrewarded and the per-state form does not apply.
pub fn value_gap_expected(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let gaps: Vec<f64> = (0..opts.bound_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(opts.seed, 21, i);
            let vocab = rng.gen_range(3..=4);
            let env = EnvSpec::copy_sum(vocab, 1, rng.gen_range(2..=6)).expect("valid env");
            let policy = random_policy(&mut rng, vocab, 2, 2.0);
            let prompt = env.sample_prompt(&mut rng);
            let gamma = rng.gen_range(0.5..=1.0);
            oracle::check_value_gap_expected(&env, &policy, &prompt, gamma).expect("within budget")
        })
        .collect();
    let w = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    finish(
        "value_gap_expected",
        gaps.len(),
        w.max(0.0),
        1e-12,
        start,
        format!("max(lhs - rhs) = {w:.2e}"),
    )
}

fn synthetic_group(rng: &mut ChaCha8Rng, degenerate: bool) -> Group {
    let g = rng.gen_range(2..=16);
    let shared = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    let binary = rng.gen_bool(0.5);
    let trajectories = (0..g)
        .map(|_| {
            let len = rng.gen_range(1..=8);
            let reward = match (degenerate, binary) {
                (true, _) => shared,
                (false, true) => f64::from(rng.gen_bool(0.5) as u8),
                (false, false) => rng.gen_range(0.0..1.0),
            };
            Trajectory {
                prompt: vec![0],
                completion: (0..len).map(|_| rng.gen_range(0..3)).collect(),
                behavior_logp: (0..len).map(|_| rng.gen_range(-2.0..-0.1)).collect(),
                reward,
                truncated: false,
            }
        })
        .collect();
    Group::new(vec![0], trajectories).expect("valid group")
}

/// Sequence-level mean 0 and population variance 1; degenerate groups give
/// zero advantages and zero policy gradient for every loss.
pub fn nae_semantics(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let results: Vec<(f64, f64, f64)> = (0..opts.nae_groups)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(opts.seed, 30, i);
            let degenerate = i % 4 == 0;
            let mut group = synthetic_group(&mut rng, degenerate);
            let adv = nae(&group, 1.0);
            let seq = adv.sequence_level();
            let n = seq.len() as f64;
            if adv.degenerate {
                let zero_adv = adv
                    .per_trajectory
                    .iter()
                    .flatten()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
                // zero gradient for every variant (policy term only)
                let policy = random_policy(&mut rng, 3, 1, 1.0);
                for t in group.trajectories.iter_mut() {
                    t.behavior_logp = t
                        .steps()
                        .map(|(s, a)| policy.log_prob(&s, a).unwrap() - 0.05)
                        .collect();
                }
                let cfg = LossConfig {
                    beta: 0.0,
                    ..LossConfig::default()
                };
                let trace = build_trace_matrix(&TraceConfig::default(), 8).expect("trace");
                let mut grad = 0.0f64;
                for kind in [LossKind::Grpo, LossKind::EpsTrace, LossKind::EpsWeight] {
                    let inputs = LossInputs {
                        policy: &policy,
                        reference: &policy,
                        group: &group,
                        advantages: &adv.per_trajectory,
                    };
                    let out = compute_loss(kind, &inputs, &trace, &cfg).expect("loss");
                    grad = grad
                        .max(out.gradient.l2_norm())
                        .max(out.breakdown.policy_loss.abs());
                }
                (zero_adv.max(grad), 0.0, 0.0)
            } else {
                let mean = seq.iter().sum::<f64>() / n;
                let var = seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (0.0, mean.abs(), (var - 1.0).abs())
            }
        })
        .collect();
    let zero = worst(results.iter().map(|r| r.0));
    let mean = worst(results.iter().map(|r| r.1));
    let var = worst(results.iter().map(|r| r.2));
    let mut r = finish(
        "nae",
        results.len(),
        mean.max(zero),
        1e-12,
        start,
        format!("|mean| {mean:.1e}, |var - 1| {var:.1e} (tol 1e-10), degenerate {zero:.1e}"),
    );
    r.passed = mean <= 1e-12 && zero == 0.0 && var <= 1e-10;
    r
}

/// Lower-triangular, unit diagonal, both-style symmetry, recent-style
/// monotonicity and the λ = 0 identity, for every size up to the maximum.
pub fn trace_structure(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let grid = [0.0, 0.05, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 1.0];
    let mut err = 0.0f64;
    let mut count = 0;
    for dim in 1..=opts.max_trace_dim {
        for &lambda in &grid {
            for style in [TraceStyle::Recent, TraceStyle::Both] {
                let m =
                    build_trace_matrix(&TraceConfig::new(1.0, lambda, style), dim).expect("trace");
                count += 1;
                for t in 0..dim {
                    err = err.max((m.get(t, t) - 1.0).abs());
                    for c in t + 1..dim {
                        err = err.max(m.get(t, c).abs());
                    }
                    for c in 0..=t {
                        let w = m.get(t, c);
                        if lambda == 0.0 {
                            err = err.max((w - f64::from(u8::from(c == t))).abs());
                        }
                        if !(0.0..=1.0).contains(&w) {
                            err = err.max(1.0);
                        }
                        match style {
                            TraceStyle::Both if lambda > 0.0 => {
                                err = err.max((w - m.get(t, t - c)).abs());
                            }
                            TraceStyle::Recent if c > 0 => {
                                err = err.max((m.get(t, c - 1) - w).max(0.0));
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
    }
    finish(
        "trace_matrix",
        count,
        err,
        0.0,
        start,
        format!("T <= {}", opts.max_trace_dim),
    )
}

/// Enumerated probability mass under random policies.
pub fn enumeration_mass(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let errors: Vec<f64> = (0..opts.bound_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(opts.seed, 40, i);
            let (env, policy, prompt) = random_value_gap_env(&mut rng);
            oracle::exact_values(&env, &policy, &prompt, 1.0)
                .expect("within budget")
                .max_mass_error
        })
        .collect();
    finish(
        "enumeration_mass",
        errors.len(),
        worst(errors.into_iter()),
        1e-10,
        start,
        String::new(),
    )
}
