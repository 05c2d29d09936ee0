//! Trace weights for GRPO-λ.
//!
//! A trace matrix `W` is lower-triangular with a unit diagonal; row `t`
//! weights the log-probabilities of tokens `c ≤ t` (lag `t - c`):
//!
//! - recent: `W[t][c] = max(floor, (γλ)^(t-c))`
//! - both:   `W[t][c] = max(floor, (γλ)^(t-c), (γλ)^c)` for `c < t`
//!
//! With `γλ = 0` both styles reduce to the identity, which turns GRPO-λ
//! back into GRPO.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::policy::Gradient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceStyle {
    /// Weights decay going back in time.
    #[default]
    Recent,
    /// Weights are large at both ends of the sequence.
    Both,
}

/// Where the trace enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceUpdate {
    /// Trace-weighted log-probabilities inside the clipped ratio.
    #[default]
    EpsTrace,
    /// Per-token PPO objective reweighted by soft-clamped trace weights.
    EpsWeight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub style: TraceStyle,
    pub update: TraceUpdate,
    pub floor: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.99,
            style: TraceStyle::Recent,
            update: TraceUpdate::EpsTrace,
            floor: 0.0,
        }
    }
}

impl TraceConfig {
    pub fn new(gamma: f64, lambda: f64, style: TraceStyle) -> Self {
        Self {
            gamma,
            lambda,
            style,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda must be in [0, 1]"));
        }
        if !(self.floor >= 0.0) {
            return Err(invalid("trace floor must be >= 0"));
        }
        Ok(())
    }

    /// The decay `γλ`.
    pub fn decay(&self) -> f64 {
        self.gamma * self.lambda
    }
}

/// Precomputed lower-triangular trace weights.
///
/// Entries depend only on `(t, c)`, so the matrix built for the maximum
/// completion length serves every shorter sequence through its leading block.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl TraceMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.dim + c]
    }

    /// Row `t` restricted to columns `0..=t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..t * self.dim + t + 1]
    }

    /// Identity of the given size.
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for t in 0..dim {
            data[t * dim + t] = 1.0;
        }
        Self { dim, data }
    }

    /// Overwrites one entry; meant for fault-injection fixtures.
    pub fn set(&mut self, t: usize, c: usize, value: f64) {
        self.data[t * self.dim + c] = value;
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.dim {
            Err(Error::LengthMismatch {
                expected: self.dim,
                got: len,
            })
        } else {
            Ok(())
        }
    }
}

/// Builds the `dim × dim` trace matrix for `cfg`.
pub fn build_trace_matrix(cfg: &TraceConfig, dim: usize) -> Result<TraceMatrix> {
    cfg.validate()?;
    if dim < 1 {
        return Err(invalid("trace matrix size must be at least 1"));
    }
    let decay = cfg.decay();
    if decay == 0.0 {
        return Ok(TraceMatrix::identity(dim));
    }
    let powers: Vec<f64> = (0..dim).map(|l| math::powi(decay, l)).collect();
    let mut data = vec![0.0; dim * dim];
    for t in 0..dim {
        data[t * dim + t] = 1.0;
        for c in 0..t {
            let recent = powers[t - c];
            let w = match cfg.style {
                TraceStyle::Recent => recent,
                TraceStyle::Both => recent.max(powers[c]),
            };
            data[t * dim + c] = w.max(cfg.floor);
        }
    }
    Ok(TraceMatrix { dim, data })
}

/// `L_t = Σ_{c≤t} W[t][c] · logp_c`.
pub fn accumulated_logp(trace: &TraceMatrix, logp: &[f64]) -> Result<Vec<f64>> {
    trace.check_len(logp.len())?;
    Ok((0..logp.len())
        .map(|t| trace.row(t).iter().zip(logp).map(|(w, lp)| w * lp).sum())
        .collect())
}

/// `exp(L_new,t - L_old,t)`, computed as `exp(Σ_c W[t][c] (new_c - old_c))`.
pub fn gae_ratio(trace: &TraceMatrix, logp_new: &[f64], logp_old: &[f64]) -> Result<Vec<f64>> {
    if logp_new.len() != logp_old.len() {
        return Err(Error::LengthMismatch {
            expected: logp_new.len(),
            got: logp_old.len(),
        });
    }
    if !logp_new.iter().chain(logp_old).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("log-probabilities"));
    }
    let diff: Vec<f64> = logp_new.iter().zip(logp_old).map(|(a, b)| a - b).collect();
    Ok(accumulated_logp(trace, &diff)?
        .into_iter()
        .map(math::exp)
        .collect())
}

/// Values that can be accumulated into an eligibility trace.
pub trait TraceVector: Clone {
    /// Additive identity shaped like `self`.
    fn zeros_like(&self) -> Self;
    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64);
    fn scale(&mut self, factor: f64);
    fn norm(&self) -> f64;
    /// Norm of `self - other`.
    fn distance(&self, other: &Self) -> f64;
}

impl TraceVector for f64 {
    fn zeros_like(&self) -> Self {
        0.0
    }
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        *self += scale * other;
    }
    fn scale(&mut self, factor: f64) {
        *self *= factor;
    }
    fn norm(&self) -> f64 {
        self.abs()
    }
    fn distance(&self, other: &Self) -> f64 {
        (self - other).abs()
    }
}

impl TraceVector for Vec<f64> {
    fn zeros_like(&self) -> Self {
        vec![0.0; self.len()]
    }
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += scale * b;
        }
    }
    fn scale(&mut self, factor: f64) {
        for a in self.iter_mut() {
            *a *= factor;
        }
    }
    fn norm(&self) -> f64 {
        math::sqrt(self.iter().map(|v| v * v).sum())
    }
    fn distance(&self, other: &Self) -> f64 {
        math::sqrt(self.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

impl TraceVector for Gradient {
    fn zeros_like(&self) -> Self {
        Gradient::new()
    }
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        Gradient::add_scaled(self, other, scale);
    }
    fn scale(&mut self, factor: f64) {
        Gradient::scale(self, factor);
    }
    fn norm(&self) -> f64 {
        self.l2_norm()
    }
    fn distance(&self, other: &Self) -> f64 {
        let mut d = self.clone();
        Gradient::add_scaled(&mut d, other, -1.0);
        d.l2_norm()
    }
}

/// `ε_0 = ∇_0`, `ε_t = γλ · ε_{t-1} + ∇_t`.
pub fn eligibility_accumulate<V: TraceVector>(grads: &[V], decay: f64) -> Vec<V> {
    let mut out: Vec<V> = Vec::with_capacity(grads.len());
    for g in grads {
        let next = match out.last() {
            Some(prev) => {
                let mut e = prev.clone();
                e.scale(decay);
                e.add_scaled(g, 1.0);
                e
            }
            None => g.clone(),
        };
        out.push(next);
    }
    out
}
