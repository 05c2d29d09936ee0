//! Tabular softmax policy over truncated token contexts.
//!
//! The policy reads the last `context_order` tokens of the state (left-padded
//! with a reserved pad id when the state is shorter) and looks up a logit row
//! for that context. Rows that were never written read as all-zero logits,
//! i.e. the uniform distribution.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::envs::Token;
use crate::error::{invalid, Error, Result};
use crate::math;

/// Encoded context: the last `k` tokens in base `vocab_size + 1`, oldest
/// token in the lowest digit, with `vocab_size` standing for padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey(pub u64);

/// Sparse gradient (or any sparse update) over the logit table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl Gradient {
    pub fn new() -> Self {
        Self::default()
    }

    /// `self[key] += scale * row`.
    pub fn add_row_scaled(&mut self, key: ContextKey, row: &[f64], scale: f64) {
        let entry = self.rows.entry(key).or_insert_with(|| vec![0.0; row.len()]);
        for (e, &r) in entry.iter_mut().zip(row) {
            *e += scale * r;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (key, row) in &other.rows {
            self.add_row_scaled(*key, row, scale);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        math::sqrt(self.rows.values().flatten().map(|v| v * v).sum())
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.rows
            .iter()
            .filter_map(|(k, row)| other.rows.get(k).map(|o| (row, o)))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn row(&self, key: ContextKey) -> Option<&[f64]> {
        self.rows.get(&key).map(Vec::as_slice)
    }

    /// Entry lookup; absent rows read as zero.
    pub fn get(&self, key: ContextKey, action: usize) -> f64 {
        self.rows
            .get(&key)
            .and_then(|r| r.get(action))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn rows(&self) -> impl Iterator<Item = (ContextKey, &[f64])> {
        self.rows.iter().map(|(k, r)| (*k, r.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }

    /// Largest absolute entrywise difference, treating absent rows as zero.
    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        let mut worst: f64 = 0.0;
        for (key, row) in &self.rows {
            for (a, v) in row.iter().enumerate() {
                worst = worst.max((v - other.get(*key, a)).abs());
            }
        }
        for (key, row) in &other.rows {
            for (a, v) in row.iter().enumerate() {
                worst = worst.max((v - self.get(*key, a)).abs());
            }
        }
        worst
    }
}

/// Visit weights over policy contexts.
///
/// The tabular policy depends on a state only through its context, so
/// states sharing a context are merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Visits {
    weights: BTreeMap<ContextKey, f64>,
}

impl Visits {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, key: ContextKey, weight: f64) {
        *self.weights.entry(key).or_insert(0.0) += weight;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ContextKey, f64)> + '_ {
        self.weights.iter().map(|(k, w)| (*k, *w))
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Logit table defining a softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    context_order: usize,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl PolicyParams {
    /// Uniform policy (every context reads as zero logits).
    pub fn new(vocab_size: usize, context_order: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(invalid("policy vocab_size must be at least 2"));
        }
        let base = vocab_size as u64 + 1;
        if base.checked_pow(context_order as u32).is_none() {
            return Err(invalid(
                "context_order too large to encode contexts in 64 bits",
            ));
        }
        Ok(Self {
            vocab_size,
            context_order,
            rows: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    /// Reserved id used for left padding.
    pub fn pad_token(&self) -> Token {
        self.vocab_size as Token
    }

    pub fn context_key(&self, state: &[Token]) -> ContextKey {
        let base = self.vocab_size as u64 + 1;
        let k = self.context_order;
        let take = k.min(state.len());
        let pad = k - take;
        let mut key = 0u64;
        let mut place = 1u64;
        for i in 0..k {
            let digit = if i < pad {
                self.pad_token() as u64
            } else {
                state[state.len() - take + (i - pad)] as u64
            };
            key += digit * place;
            place = place.wrapping_mul(base);
        }
        ContextKey(key)
    }

    /// Decodes a context key into tokens, oldest first; `None` marks padding.
    pub fn context_tokens(&self, key: ContextKey) -> Vec<Option<Token>> {
        let base = self.vocab_size as u64 + 1;
        let mut rest = key.0;
        (0..self.context_order)
            .map(|_| {
                let digit = rest % base;
                rest /= base;
                if digit == self.vocab_size as u64 {
                    None
                } else {
                    Some(digit as Token)
                }
            })
            .collect()
    }

    /// Inverse of [`context_tokens`](Self::context_tokens).
    pub fn encode_context(&self, tokens: &[Option<Token>]) -> Result<ContextKey> {
        if tokens.len() != self.context_order {
            return Err(Error::LengthMismatch {
                expected: self.context_order,
                got: tokens.len(),
            });
        }
        let base = self.vocab_size as u64 + 1;
        let mut key = 0u64;
        let mut place = 1u64;
        for tok in tokens {
            let digit = match tok {
                Some(t) if (*t as usize) < self.vocab_size => *t as u64,
                Some(t) => {
                    return Err(Error::ActionOutOfRange {
                        action: *t,
                        vocab_size: self.vocab_size,
                    })
                }
                None => self.vocab_size as u64,
            };
            key += digit * place;
            place = place.wrapping_mul(base);
        }
        Ok(ContextKey(key))
    }

    /// Stored logits, or `None` for a never-written (uniform) row.
    pub fn logits(&self, key: ContextKey) -> Option<&[f64]> {
        self.rows.get(&key).map(Vec::as_slice)
    }

    pub fn log_probs_at(&self, key: ContextKey) -> Vec<f64> {
        match self.rows.get(&key) {
            Some(row) => math::log_softmax(row),
            None => vec![-math::ln(self.vocab_size as f64); self.vocab_size],
        }
    }

    pub fn probs_at(&self, key: ContextKey) -> Vec<f64> {
        match self.rows.get(&key) {
            Some(row) => math::softmax(row),
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
        }
    }

    fn check_action(&self, action: Token) -> Result<()> {
        if (action as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(Error::ActionOutOfRange {
                action,
                vocab_size: self.vocab_size,
            })
        }
    }

    /// `log π(action | state)`.
    pub fn log_prob(&self, state: &[Token], action: Token) -> Result<f64> {
        self.check_action(action)?;
        Ok(self.log_probs_at(self.context_key(state))[action as usize])
    }

    /// Gradient of `log π(action | state)` with respect to the logit table:
    /// `one_hot(action) - softmax(row)` on the context row, zero elsewhere.
    pub fn grad_log_prob(&self, state: &[Token], action: Token) -> Result<Gradient> {
        let (key, row) = self.grad_log_prob_row(state, action)?;
        let mut g = Gradient::new();
        g.add_row_scaled(key, &row, 1.0);
        Ok(g)
    }

    /// Dense form of [`grad_log_prob`](Self::grad_log_prob): the context and its row.
    pub fn grad_log_prob_row(
        &self,
        state: &[Token],
        action: Token,
    ) -> Result<(ContextKey, Vec<f64>)> {
        self.check_action(action)?;
        let key = self.context_key(state);
        let mut row: Vec<f64> = self.probs_at(key).into_iter().map(|p| -p).collect();
        row[action as usize] += 1.0;
        Ok((key, row))
    }

    fn check_compatible(&self, other: &PolicyParams) -> Result<()> {
        if self.vocab_size != other.vocab_size {
            return Err(Error::IncompatiblePolicies("vocabulary sizes differ"));
        }
        if self.context_order != other.context_order {
            return Err(Error::IncompatiblePolicies("context orders differ"));
        }
        Ok(())
    }

    /// Exact `KL(π_θ(·|s) ‖ π_ref(·|s))` for one context.
    pub fn kl_at(&self, reference: &PolicyParams, key: ContextKey) -> f64 {
        let lp = self.log_probs_at(key);
        let lq = reference.log_probs_at(key);
        lp.iter()
            .zip(&lq)
            .map(|(&p, &q)| math::exp(p) * (p - q))
            .sum()
    }

    /// Visit-weighted average of the exact per-state KL to `reference`.
    pub fn kl_to_reference(&self, reference: &PolicyParams, visits: &Visits) -> Result<f64> {
        Ok(self.kl_to_reference_with_grad(reference, visits)?.0)
    }

    /// KL as in [`kl_to_reference`](Self::kl_to_reference) plus its gradient
    /// with respect to this policy's logits:
    /// `∂KL_s/∂z_j = p_j (log p_j - log q_j - KL_s)`.
    pub fn kl_to_reference_with_grad(
        &self,
        reference: &PolicyParams,
        visits: &Visits,
    ) -> Result<(f64, Gradient)> {
        self.check_compatible(reference)?;
        let total = visits.total_weight();
        let mut grad = Gradient::new();
        if total <= 0.0 {
            return Ok((0.0, grad));
        }
        let mut kl = 0.0;
        for (key, weight) in visits.iter() {
            let lp = self.log_probs_at(key);
            let lq = reference.log_probs_at(key);
            let p: Vec<f64> = lp.iter().map(|&v| math::exp(v)).collect();
            let kl_s: f64 = p
                .iter()
                .zip(lp.iter().zip(&lq))
                .map(|(pi, (a, b))| pi * (a - b))
                .sum();
            let w = weight / total;
            kl += w * kl_s;
            let row: Vec<f64> = p
                .iter()
                .zip(lp.iter().zip(&lq))
                .map(|(pi, (a, b))| pi * (a - b - kl_s))
                .collect();
            grad.add_row_scaled(key, &row, w);
        }
        Ok((kl.max(0.0), grad))
    }

    /// Deep, independent copy (π_θ_old and π_ref).
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// Mutable row access, creating the zero row on first touch.
    pub fn row_mut(&mut self, key: ContextKey) -> &mut Vec<f64> {
        let vocab = self.vocab_size;
        self.rows.entry(key).or_insert_with(|| vec![0.0; vocab])
    }

    pub fn set_logits(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab_size {
            return Err(Error::LengthMismatch {
                expected: self.vocab_size,
                got: logits.len(),
            });
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        self.rows.insert(key, logits);
        Ok(())
    }

    /// Gradient-descent step `θ ← θ - lr · grad`.
    pub fn apply_update(&mut self, grad: &Gradient, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for (key, g) in grad.rows() {
            let row = self.row_mut(key);
            for (z, d) in row.iter_mut().zip(g) {
                *z -= lr * d;
            }
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (ContextKey, &[f64])> {
        self.rows.iter().map(|(k, r)| (*k, r.as_slice()))
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(
        rng: &mut ChaCha8Rng,
        vocab: usize,
        order: usize,
        rows: usize,
    ) -> PolicyParams {
        let mut p = PolicyParams::new(vocab, order).unwrap();
        for _ in 0..rows {
            let state: Vec<Token> = (0..order)
                .map(|_| rng.gen_range(0..vocab as Token))
                .collect();
            let key = p.context_key(&state);
            let logits = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
            p.set_logits(key, logits).unwrap();
        }
        p
    }

    #[test]
    fn uniform_log_prob() {
        let p = PolicyParams::new(4, 2).unwrap();
        for a in 0..4 {
            assert!((p.log_prob(&[1, 2, 3], a).unwrap() - (0.25f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn peaked_log_prob() {
        let mut p = PolicyParams::new(4, 1).unwrap();
        let key = p.context_key(&[2]);
        p.set_logits(key, vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let lp = p.log_prob(&[2], 0).unwrap();
        // exact: -ln(1 + 3 e^-10)
        let expected = -(1.0 + 3.0 * (-10.0f64).exp()).ln();
        assert!((lp - expected).abs() < 1e-15);
        assert!(lp > 0.99f64.ln() && lp < 0.0);
    }

    #[test]
    fn out_of_range_action_is_rejected() {
        let p = PolicyParams::new(4, 1).unwrap();
        assert!(matches!(
            p.log_prob(&[0], 4),
            Err(Error::ActionOutOfRange { .. })
        ));
        assert!(p.grad_log_prob(&[0], 9).is_err());
    }

    #[test]
    fn uniform_gradient_row() {
        let p = PolicyParams::new(4, 1).unwrap();
        let (_, row) = p.grad_log_prob_row(&[0], 2).unwrap();
        assert_eq!(row, vec![-0.25, -0.25, 0.75, -0.25]);
    }

    #[test]
    fn context_padding_and_roundtrip() {
        let p = PolicyParams::new(5, 3).unwrap();
        let short = p.context_key(&[4]);
        assert_eq!(p.context_tokens(short), vec![None, None, Some(4)]);
        let long = p.context_key(&[0, 1, 2, 3]);
        assert_eq!(p.context_tokens(long), vec![Some(1), Some(2), Some(3)]);
        assert_eq!(p.encode_context(&p.context_tokens(long)).unwrap(), long);
        let empty = p.context_key(&[]);
        assert_eq!(p.context_tokens(empty), vec![None, None, None]);
    }

    #[test]
    fn zero_order_context_is_global() {
        let p = PolicyParams::new(3, 0).unwrap();
        assert_eq!(p.context_key(&[]), p.context_key(&[1, 2, 0]));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let vocab = rng.gen_range(2..6);
            let mut p = random_policy(&mut rng, vocab, 2, 3);
            let state: Vec<Token> = (0..3).map(|_| rng.gen_range(0..vocab as Token)).collect();
            let action = rng.gen_range(0..vocab as Token);
            let key = p.context_key(&state);
            if p.logits(key).is_none() {
                let logits = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                p.set_logits(key, logits).unwrap();
            }
            let (_, analytic) = p.grad_log_prob_row(&state, action).unwrap();
            for j in 0..vocab {
                let mut plus = p.clone();
                plus.row_mut(key)[j] += h;
                let mut minus = p.clone();
                minus.row_mut(key)[j] -= h;
                let fd = (plus.log_prob(&state, action).unwrap()
                    - minus.log_prob(&state, action).unwrap())
                    / (2.0 * h);
                let rel = (fd - analytic[j]).abs() / analytic[j].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn kl_hand_value() {
        let mut p = PolicyParams::new(2, 0).unwrap();
        let mut q = PolicyParams::new(2, 0).unwrap();
        let key = p.context_key(&[]);
        p.set_logits(key, vec![0.0, 0.0]).unwrap();
        q.set_logits(key, vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let mut visits = Visits::new();
        visits.record(key, 1.0);
        let kl = p.kl_to_reference(&q, &visits).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_policy(&mut rng, 4, 1, 4);
        let q = random_policy(&mut rng, 4, 1, 4);
        let mut visits = Visits::new();
        for s in 0..4u32 {
            visits.record(p.context_key(&[s]), 1.0 + s as f64);
        }
        let (_, grad) = p.kl_to_reference_with_grad(&q, &visits).unwrap();
        let h = 1e-5;
        for s in 0..4u32 {
            let key = p.context_key(&[s]);
            for j in 0..4 {
                let mut plus = p.clone();
                plus.row_mut(key)[j] += h;
                let mut minus = p.clone();
                minus.row_mut(key)[j] -= h;
                let fd = (plus.kl_to_reference(&q, &visits).unwrap()
                    - minus.kl_to_reference(&q, &visits).unwrap())
                    / (2.0 * h);
                let an = grad.get(key, j);
                assert!((fd - an).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-6);
            }
        }
    }

    #[test]
    fn kl_to_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_policy(&mut rng, 5, 2, 10);
        let mut visits = Visits::new();
        for (k, _) in p.rows() {
            visits.record(k, 2.0);
        }
        assert_eq!(p.kl_to_reference(&p.snapshot(), &visits).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_mismatched_policies() {
        let p = PolicyParams::new(3, 1).unwrap();
        let q = PolicyParams::new(4, 1).unwrap();
        assert!(p.kl_to_reference(&q, &Visits::new()).is_err());
    }

    #[test]
    fn snapshot_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_policy(&mut rng, 4, 2, 5);
        let snap = p.snapshot();
        assert_eq!(snap.snapshot(), snap);
        for _ in 0..100 {
            let state: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let a = rng.gen_range(0..4);
            assert_eq!(
                p.log_prob(&state, a).unwrap(),
                snap.log_prob(&state, a).unwrap()
            );
        }
        let key = p.context_key(&[0, 0]);
        let before = snap.clone();
        let mut g = Gradient::new();
        g.add_row_scaled(key, &[1.0, -1.0, 0.5, 0.0], 1.0);
        p.apply_update(&g, 0.3);
        assert_eq!(snap, before);
        assert_ne!(p, snap);
    }

    #[test]
    fn gradient_algebra() {
        let mut g = Gradient::new();
        g.add_row_scaled(ContextKey(1), &[3.0, 4.0], 1.0);
        assert_eq!(g.l2_norm(), 5.0);
        let mut h = g.clone();
        h.scale(2.0);
        assert_eq!(g.dot(&h), 50.0);
        h.add_scaled(&g, -2.0);
        assert_eq!(h.l2_norm(), 0.0);
        assert_eq!(g.get(ContextKey(7), 0), 0.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalize_and_gradients_sum_to_zero(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..8),
            action_seed in 0usize..100,
        ) {
            let vocab = logits.len();
            let mut p = PolicyParams::new(vocab, 1).unwrap();
            let key = p.context_key(&[0]);
            p.set_logits(key, logits).unwrap();
            let mass: f64 = (0..vocab as Token).map(|a| p.log_prob(&[0], a).unwrap().exp()).sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
            let action = (action_seed % vocab) as Token;
            let (_, row) = p.grad_log_prob_row(&[0], action).unwrap();
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
            prop_assert!(p.log_prob(&[0], action).unwrap() <= 0.0);
        }

        #[test]
        fn kl_is_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_policy(&mut rng, 4, 1, 4);
            let q = random_policy(&mut rng, 4, 1, 4);
            let mut visits = Visits::new();
            for s in 0..4u32 {
                visits.record(p.context_key(&[s]), 1.0);
            }
            prop_assert!(p.kl_to_reference(&q, &visits).unwrap() >= 0.0);
        }
    }
}
