//! Brute-force verifiers that share no code path with the estimators they check.
//!
//! - exact state values by enumerating the completion trie,
//! - the ΔV bound check over every reachable state,
//! - the three equivalent forms of the trace-reparameterized policy gradient,
//! - central finite differences over the logit table.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::envs::{EnvSpec, Token};
use crate::error::{Error, Result};
use crate::math;
use crate::policy::{ContextKey, Gradient, PolicyParams};
use crate::traces::TraceVector;

/// Exact values of every reachable non-terminal state of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    /// Keyed by completion prefix; the empty prefix is `s_0`.
    pub values: BTreeMap<Vec<Token>, f64>,
    /// Probability of reaching each prefix from `s_0`.
    pub reach: BTreeMap<Vec<Token>, f64>,
    /// Largest deviation from 1 of the terminal probability mass below a state.
    pub max_mass_error: f64,
}

impl ValueTable {
    pub fn root(&self) -> f64 {
        self.values[&Vec::new()]
    }
}

/// Enumerates every completion of `prompt` under `policy`, memoizing
/// `V(s) = Σ_a π(a|s) [r if terminal else γ V(s')]` over the trie.
pub fn exact_values(
    env: &EnvSpec,
    policy: &PolicyParams,
    prompt: &[Token],
    gamma: f64,
) -> Result<ValueTable> {
    env.enumeration_size()?;
    if policy.vocab_size() != env.vocab_size() {
        return Err(Error::IncompatiblePolicies(
            "policy and environment vocabularies differ",
        ));
    }
    let mut table = ValueTable {
        values: BTreeMap::new(),
        reach: BTreeMap::new(),
        max_mass_error: 0.0,
    };
    let mut state: Vec<Token> = prompt.to_vec();
    let mut prefix = Vec::new();
    visit(env, policy, gamma, &mut state, &mut prefix, 1.0, &mut table);
    Ok(table)
}

/// Returns `(value, terminal mass)` of the state `prompt ++ prefix`.
fn visit(
    env: &EnvSpec,
    policy: &PolicyParams,
    gamma: f64,
    state: &mut Vec<Token>,
    prefix: &mut Vec<Token>,
    reach: f64,
    table: &mut ValueTable,
) -> (f64, f64) {
    let probs = policy.probs_at(policy.context_key(state));
    let prompt_len = state.len() - prefix.len();
    let mut value = 0.0;
    let mut mass = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        let a = a as Token;
        prefix.push(a);
        state.push(a);
        if env.is_terminal(prefix) {
            value += p * env.verify(&state[..prompt_len], prefix);
            mass += p;
        } else {
            let (v, m) = visit(env, policy, gamma, state, prefix, reach * p, table);
            value += p * gamma * v;
            mass += p * m;
        }
        prefix.pop();
        state.pop();
    }
    table.max_mass_error = table.max_mass_error.max((mass - 1.0).abs());
    table.values.insert(prefix.clone(), value);
    table.reach.insert(prefix.clone(), reach);
    (value, mass)
}

/// Outcome of checking `V(s_0) - V(s_t) ≤ bound(t)` over all reachable states.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGapReport {
    pub states: usize,
    pub violations: usize,
    /// `max(ΔV - bound)`; non-positive when the bound holds everywhere.
    pub max_excess: f64,
    /// Smallest `bound - ΔV` (the tightest state).
    pub min_gap: f64,
    /// Largest `bound - ΔV`.
    pub max_gap: f64,
}

/// Absolute tolerance used when counting violations.
pub const VALUE_GAP_TOLERANCE: f64 = 1e-12;

/// Per-state check of the ΔV bound along each state's own prefix.
///
/// The bound is derived assuming every episode succeeds; with
/// [`crate::envs::EnvKind::AllSuccess`] and `γ = 1` it holds for every
/// state. Unrewarded truncation breaks that assumption.
pub fn check_value_gap(
    env: &EnvSpec,
    policy: &PolicyParams,
    prompt: &[Token],
    gamma: f64,
) -> Result<ValueGapReport> {
    let table = exact_values(env, policy, prompt, gamma)?;
    let root = table.root();
    let eos = env.eos() as usize;
    let mut report = ValueGapReport {
        states: 0,
        violations: 0,
        max_excess: f64::NEG_INFINITY,
        min_gap: f64::INFINITY,
        max_gap: f64::NEG_INFINITY,
    };
    for (prefix, &v) in &table.values {
        let mut survive = 1.0;
        let mut state = prompt.to_vec();
        for &tok in prefix {
            survive *= crate::advantage::non_eos_mass(policy, &state, eos);
            state.push(tok);
        }
        let bound = 1.0 - survive;
        let dv = root - v;
        report.states += 1;
        report.max_excess = report.max_excess.max(dv - bound);
        report.min_gap = report.min_gap.min(bound - dv);
        report.max_gap = report.max_gap.max(bound - dv);
        if dv > bound + VALUE_GAP_TOLERANCE {
            report.violations += 1;
        }
    }
    Ok(report)
}

/// The expectation form of the bound, which holds for any binary terminal
/// reward: `V(s_0) - γ^t E[V(s_t); alive] ≤ P(terminated before t)`.
///
/// Returns the largest `lhs - rhs` over `t`.
pub fn check_value_gap_expected(
    env: &EnvSpec,
    policy: &PolicyParams,
    prompt: &[Token],
    gamma: f64,
) -> Result<f64> {
    let table = exact_values(env, policy, prompt, gamma)?;
    let root = table.root();
    let mut worst = f64::NEG_INFINITY;
    for t in 0..=env.max_completion() {
        let mut alive = 0.0;
        let mut expected_v = 0.0;
        for (prefix, &v) in &table.values {
            if prefix.len() == t {
                let r = table.reach[prefix];
                alive += r;
                expected_v += r * v;
            }
        }
        let lhs = root - math::powi(gamma, t) * expected_v;
        let rhs = 1.0 - alive;
        worst = worst.max(lhs - rhs);
    }
    Ok(worst)
}

/// The three forms of the trace-reparameterized policy gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeForms<V> {
    /// `Σ_t A_GAE(s_t) ∇_t`, with `A_GAE(s_t) = Σ_{l=0}^{T-1-t} (γλ)^l δ_{t+l}`.
    pub advantage_form: V,
    /// `Σ_t δ_t Σ_{l=0}^t (γλ)^l ∇_{t-l}`.
    pub trace_form: V,
    /// `Σ_t δ_t ε_t` with `ε_t = γλ ε_{t-1} + ∇_t`.
    pub recursive_form: V,
    /// `Σ_t Σ_l (γλ)^l |δ| ‖∇‖`: the scale relative errors are measured against.
    pub magnitude: f64,
}

impl<V: TraceVector> ThreeForms<V> {
    /// Largest pairwise discrepancy relative to the summand magnitude.
    pub fn max_relative_discrepancy(&self) -> f64 {
        let pairs = [
            self.advantage_form.distance(&self.trace_form),
            self.advantage_form.distance(&self.recursive_form),
            self.trace_form.distance(&self.recursive_form),
        ];
        let worst = pairs.iter().copied().fold(0.0, f64::max);
        if self.magnitude == 0.0 {
            worst
        } else {
            worst / self.magnitude
        }
    }
}

/// Evaluates the three forms independently, without the crate's trace code.
pub fn three_forms<V: TraceVector>(
    deltas: &[f64],
    grads: &[V],
    decay: f64,
) -> Result<ThreeForms<V>> {
    if deltas.len() != grads.len() {
        return Err(Error::LengthMismatch {
            expected: deltas.len(),
            got: grads.len(),
        });
    }
    if !deltas.iter().all(|d| d.is_finite()) {
        return Err(Error::NonFinite("deltas"));
    }
    let n = deltas.len();
    let Some(first) = grads.first() else {
        return Err(Error::LengthMismatch {
            expected: 1,
            got: 0,
        });
    };
    let zero = first.zeros_like();
    let pow = |l: usize| math::powi(decay, l);

    let mut advantage_form = zero.clone();
    for t in 0..n {
        let a_gae: f64 = (0..n - t).map(|l| pow(l) * deltas[t + l]).sum();
        advantage_form.add_scaled(&grads[t], a_gae);
    }

    let mut trace_form = zero.clone();
    let mut magnitude = 0.0;
    for t in 0..n {
        for l in 0..=t {
            trace_form.add_scaled(&grads[t - l], deltas[t] * pow(l));
            magnitude += pow(l) * deltas[t].abs() * grads[t - l].norm();
        }
    }

    let mut recursive_form = zero.clone();
    let mut eligibility = zero;
    for t in 0..n {
        eligibility.scale(decay);
        eligibility.add_scaled(&grads[t], 1.0);
        recursive_form.add_scaled(&eligibility, deltas[t]);
    }

    Ok(ThreeForms {
        advantage_form,
        trace_form,
        recursive_form,
        magnitude,
    })
}

/// Max pairwise relative discrepancy among the three forms.
pub fn three_form_identity<V: TraceVector>(deltas: &[f64], grads: &[V], decay: f64) -> Result<f64> {
    Ok(three_forms(deltas, grads, decay)?.max_relative_discrepancy())
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Gradient entries smaller than this are compared in absolute terms.
pub const FD_RELATIVE_FLOOR: f64 = 1e-6;

pub const FD_DEFAULT_STEP: f64 = 1e-5;

/// Central differences of `loss` on every logit of the rows in `keys`,
/// compared with `analytic` (absent rows count as zero).
pub fn finite_diff_check<F>(
    loss: F,
    params: &PolicyParams,
    analytic: &Gradient,
    keys: &[ContextKey],
    step: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
    };
    let mut probe = params.clone();
    for &key in keys {
        for j in 0..params.vocab_size() {
            let original = probe.row_mut(key)[j];
            probe.row_mut(key)[j] = original + step;
            let plus = loss(&probe)?;
            probe.row_mut(key)[j] = original - step;
            let minus = loss(&probe)?;
            probe.row_mut(key)[j] = original;
            let fd = (plus - minus) / (2.0 * step);
            let an = analytic.get(key, j);
            let abs = (fd - an).abs();
            let rel = abs / fd.abs().max(an.abs()).max(FD_RELATIVE_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.entries += 1;
        }
    }
    Ok(report)
}
