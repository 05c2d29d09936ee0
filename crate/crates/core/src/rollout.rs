//! Group sampling and Monte-Carlo returns.

use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{EnvSpec, Token};
use crate::error::{Error, Result};
use crate::math;
use crate::policy::PolicyParams;

/// Member index reserved for prompt sampling streams.
pub const PROMPT_STREAM: u64 = u64::MAX;

/// One sampled completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub completion: Vec<Token>,
    /// `log π_old(a_t | s_t)` recorded at sampling time.
    pub behavior_logp: Vec<f64>,
    pub reward: f64,
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completion.is_empty()
    }

    /// `s_t`: the prompt followed by the first `t` completion tokens.
    pub fn state_at(&self, t: usize) -> Vec<Token> {
        let mut s = Vec::with_capacity(self.prompt.len() + t);
        s.extend_from_slice(&self.prompt);
        s.extend_from_slice(&self.completion[..t]);
        s
    }

    /// Iterates `(s_t, a_t)` over the completion.
    pub fn steps(&self) -> impl Iterator<Item = (Vec<Token>, Token)> + '_ {
        (0..self.len()).map(move |t| (self.state_at(t), self.completion[t]))
    }
}

/// `g` completions of a single prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt: Vec<Token>,
    pub trajectories: Vec<Trajectory>,
}

impl Group {
    pub fn new(prompt: Vec<Token>, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::GroupTooSmall(trajectories.len()));
        }
        if trajectories.iter().any(|t| t.prompt != prompt) {
            return Err(Error::InvalidConfig(
                "trajectories must share the group prompt".into(),
            ));
        }
        Ok(Self {
            prompt,
            trajectories,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn mean_reward(&self) -> f64 {
        self.trajectories.iter().map(|t| t.reward).sum::<f64>() / self.size() as f64
    }
}

/// Identifies a random stream by `(seed, step, prompt index, member index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamId {
    pub seed: u64,
    pub step: u64,
    pub prompt_index: u64,
    pub member: u64,
}

impl StreamId {
    pub fn new(seed: u64, step: u64, prompt_index: u64, member: u64) -> Self {
        Self {
            seed,
            step,
            prompt_index,
            member,
        }
    }

    /// Stream for drawing the prompt itself.
    pub fn prompt(seed: u64, step: u64, prompt_index: u64) -> Self {
        Self::new(seed, step, prompt_index, PROMPT_STREAM)
    }

    /// The four words packed into a ChaCha key, so distinct ids give
    /// distinct streams independent of scheduling.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (chunk, word) in
            key.chunks_exact_mut(8)
                .zip([self.seed, self.step, self.prompt_index, self.member])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Ancestral sampling of one completion under `policy`.
pub fn sample_trajectory<R: rand::Rng + ?Sized>(
    env: &EnvSpec,
    prompt: &[Token],
    policy: &PolicyParams,
    rng: &mut R,
) -> Result<Trajectory> {
    if policy.vocab_size() != env.vocab_size() {
        return Err(Error::IncompatiblePolicies(
            "policy and environment vocabularies differ",
        ));
    }
    let eos = env.eos();
    let mut state: Vec<Token> = prompt.to_vec();
    let mut completion = Vec::new();
    let mut behavior_logp = Vec::new();
    loop {
        let logp = policy.log_probs_at(policy.context_key(&state));
        let probs: Vec<f64> = logp.iter().map(|&v| math::exp(v)).collect();
        let dist =
            WeightedIndex::new(&probs).map_err(|_| Error::NonFinite("policy probabilities"))?;
        let action = dist.sample(rng) as Token;
        behavior_logp.push(logp[action as usize]);
        completion.push(action);
        state.push(action);
        if env.is_terminal(&completion) {
            break;
        }
    }
    let truncated = *completion.last().unwrap_or(&eos) != eos;
    let reward = env.verify(prompt, &completion);
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        completion,
        behavior_logp,
        reward,
        truncated,
    })
}

/// Samples `g` trajectories, member `i` drawing from stream
/// `(seed, step, prompt_index, i)`.
pub fn sample_group(
    env: &EnvSpec,
    prompt: &[Token],
    snapshot: &PolicyParams,
    g: usize,
    seed: u64,
    step: u64,
    prompt_index: u64,
) -> Result<Group> {
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let trajectories = (0..g as u64)
        .map(|member| {
            let mut rng = StreamId::new(seed, step, prompt_index, member).rng();
            sample_trajectory(env, prompt, snapshot, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Group {
        prompt: prompt.to_vec(),
        trajectories,
    })
}

/// Per-token returns `G_t = γ^{T-t} r_T` for a terminal-reward trajectory.
pub fn returns(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let n = traj.len();
    let mut out = alloc::vec![0.0; n];
    let mut g = traj.reward;
    for t in (0..n).rev() {
        out[t] = g;
        g *= gamma;
    }
    out
}
