//! Normalized advantage estimation (NAE) and the EOS-based value-gap bound.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::policy::PolicyParams;
use crate::rollout::{returns, Group, Trajectory};

/// Below this group standard deviation the group carries no signal.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Default negative-advantage floor.
pub const DEFAULT_CLAMP_FLOOR: f64 = -0.1;

/// Per-token advantages for every trajectory of a group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    /// `per_trajectory[i][t]` is `δ_t` for member `i`.
    pub per_trajectory: Vec<Vec<f64>>,
    /// Mean of the sequence-level returns `G_0^i`.
    pub mean: f64,
    /// Population standard deviation of the sequence-level returns.
    pub std: f64,
    pub degenerate: bool,
}

impl GroupAdvantages {
    /// Applies [`clamp_advantage`] to every trajectory.
    pub fn clamped(&self, floor: f64) -> Result<Self> {
        let per_trajectory = self
            .per_trajectory
            .iter()
            .map(|adv| clamp_advantage(adv, floor))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            per_trajectory,
            ..*self
        })
    }

    /// `A_NAE` at `t = 0` for every member.
    pub fn sequence_level(&self) -> Vec<f64> {
        self.per_trajectory
            .iter()
            .map(|a| a.first().copied().unwrap_or(0.0))
            .collect()
    }
}

/// `δ_t^i = (G_t^i - μ) / σ`, with `μ`, `σ` taken over the group's `G_0^i`.
///
/// Groups whose returns have `σ < 1e-8` get all-zero advantages and are
/// flagged degenerate.
pub fn nae(group: &Group, gamma: f64) -> GroupAdvantages {
    let per_token: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| returns(t, gamma))
        .collect();
    let seq: Vec<f64> = per_token
        .iter()
        .map(|g| g.first().copied().unwrap_or(0.0))
        .collect();
    let n = seq.len() as f64;
    let mean = seq.iter().sum::<f64>() / n;
    let var = seq.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
    let std = crate::math::sqrt(var);
    if !(std >= DEGENERATE_STD) {
        return GroupAdvantages {
            per_trajectory: per_token
                .iter()
                .map(|g| alloc::vec![0.0; g.len()])
                .collect(),
            mean,
            std,
            degenerate: true,
        };
    }
    GroupAdvantages {
        per_trajectory: per_token
            .iter()
            .map(|g| standardize(g, mean, std))
            .collect(),
        mean,
        std,
        degenerate: false,
    }
}

/// `(G_t - mean) / std` for every token return.
pub fn standardize(token_returns: &[f64], mean: f64, std: f64) -> Vec<f64> {
    token_returns.iter().map(|g| (g - mean) / std).collect()
}

/// Elementwise `max(a, floor)`; `floor` must be non-positive.
pub fn clamp_advantage(adv: &[f64], floor: f64) -> Result<Vec<f64>> {
    if !(floor <= 0.0) {
        return Err(invalid("advantage clamp floor must be <= 0"));
    }
    Ok(adv.iter().map(|&a| a.max(floor)).collect())
}

/// `1 - Π_{k<t} Σ_{a≠EOS} π(a | s_k)` along the trajectory's own prefix.
pub fn delta_v_bound(
    traj: &Trajectory,
    snapshot: &PolicyParams,
    eos: usize,
    t: usize,
) -> Result<f64> {
    if t > traj.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            limit: traj.len(),
        });
    }
    Ok(delta_v_bounds(traj, snapshot, eos)[t])
}

/// The bound for every `t` in `0..=len`.
pub fn delta_v_bounds(traj: &Trajectory, snapshot: &PolicyParams, eos: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len() + 1);
    let mut survive = 1.0;
    out.push(0.0);
    for t in 0..traj.len() {
        survive *= non_eos_mass(snapshot, &traj.state_at(t), eos);
        out.push((1.0 - survive).clamp(0.0, 1.0));
    }
    out
}

pub(crate) fn non_eos_mass(policy: &PolicyParams, state: &[crate::envs::Token], eos: usize) -> f64 {
    policy
        .probs_at(policy.context_key(state))
        .iter()
        .enumerate()
        .filter(|(a, _)| *a != eos)
        .map(|(_, p)| p)
        .sum()
}

/// Experimental: NAE plus the ΔV upper bound at each token.
///
/// Off by default in training; adding the bound tends to over-correct.
pub fn nae_with_bias_correction(
    group: &Group,
    gamma: f64,
    snapshot: &PolicyParams,
    eos: usize,
) -> GroupAdvantages {
    let mut adv = nae(group, gamma);
    for (traj, a) in group.trajectories.iter().zip(adv.per_trajectory.iter_mut()) {
        let bounds = delta_v_bounds(traj, snapshot, eos);
        for (t, v) in a.iter_mut().enumerate() {
            *v += bounds[t];
        }
    }
    adv
}
