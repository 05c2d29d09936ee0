//! Synthetic token-generation MDPs.
//!
//! A state is the prompt followed by the completion generated so far; every
//! action appends one token. Episodes end when the EOS token is emitted or
//! when the completion reaches `max_completion` tokens (truncation). The only
//! reward is the terminal verifier score in {0, 1}.
//!
//! Token layout shared by every environment: ids `0..vocab_size - 1` are
//! ordinary symbols and `vocab_size - 1` is EOS.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Token id.
pub type Token = u32;

/// Paths allowed for brute-force enumeration.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

/// Built-in task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// Answer token is the prompt sum modulo `vocab_size - 1`; the only correct
    /// completion is `[answer, EOS]`.
    CopySum,
    /// Prompt is a bit string; the completion may open with any number of
    /// scratch tokens (ids `2..EOS`) and must then emit the parity bit and EOS.
    ParityChain,
    /// The first completion token must equal the key (prompt sum modulo
    /// `vocab_size - 1`), followed by at least `min_filler` arbitrary
    /// non-EOS tokens and then EOS.
    DelayedKey { min_filler: usize },
    /// Every terminated episode scores 1, truncated ones included. Used by the
    /// value-bias oracle, which assumes every episode succeeds.
    AllSuccess,
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::CopySum => "copy_sum",
            EnvKind::ParityChain => "parity_chain",
            EnvKind::DelayedKey { .. } => "delayed_key",
            EnvKind::AllSuccess => "all_success",
        }
    }
}

/// A fully specified environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvSpec {
    kind: EnvKind,
    vocab_size: usize,
    prompt_len: usize,
    max_completion: usize,
}

impl EnvSpec {
    pub fn new(
        kind: EnvKind,
        vocab_size: usize,
        prompt_len: usize,
        max_completion: usize,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if vocab_size > Token::MAX as usize {
            return Err(invalid("vocab_size does not fit the token type"));
        }
        if prompt_len < 1 {
            return Err(invalid("prompt_len must be at least 1"));
        }
        if max_completion < 1 {
            return Err(invalid("max_completion must be at least 1"));
        }
        match kind {
            EnvKind::CopySum if max_completion < 2 => {
                return Err(invalid("copy_sum needs max_completion >= 2"));
            }
            EnvKind::ParityChain if vocab_size < 3 => {
                return Err(invalid("parity_chain needs vocab_size >= 3"));
            }
            EnvKind::ParityChain if max_completion < 2 => {
                return Err(invalid("parity_chain needs max_completion >= 2"));
            }
            EnvKind::DelayedKey { min_filler } if max_completion < min_filler + 2 => {
                return Err(invalid(format!(
                    "delayed_key with min_filler = {min_filler} needs max_completion >= {}",
                    min_filler + 2
                )));
            }
            _ => {}
        }
        Ok(Self {
            kind,
            vocab_size,
            prompt_len,
            max_completion,
        })
    }

    pub fn copy_sum(vocab_size: usize, prompt_len: usize, max_completion: usize) -> Result<Self> {
        Self::new(EnvKind::CopySum, vocab_size, prompt_len, max_completion)
    }

    pub fn parity_chain(
        vocab_size: usize,
        prompt_len: usize,
        max_completion: usize,
    ) -> Result<Self> {
        Self::new(EnvKind::ParityChain, vocab_size, prompt_len, max_completion)
    }

    pub fn delayed_key(
        vocab_size: usize,
        prompt_len: usize,
        max_completion: usize,
        min_filler: usize,
    ) -> Result<Self> {
        Self::new(
            EnvKind::DelayedKey { min_filler },
            vocab_size,
            prompt_len,
            max_completion,
        )
    }

    pub fn all_success(
        vocab_size: usize,
        prompt_len: usize,
        max_completion: usize,
    ) -> Result<Self> {
        Self::new(EnvKind::AllSuccess, vocab_size, prompt_len, max_completion)
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn max_completion(&self) -> usize {
        self.max_completion
    }

    pub fn eos(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    /// Best expected reward any policy can reach.
    pub fn max_achievable_reward(&self) -> f64 {
        1.0
    }

    /// Number of distinct values a single prompt token can take.
    fn prompt_alphabet(&self) -> usize {
        match self.kind {
            EnvKind::ParityChain => 2,
            EnvKind::AllSuccess => self.vocab_size,
            EnvKind::CopySum | EnvKind::DelayedKey { .. } => self.vocab_size - 1,
        }
    }

    /// Modulus of the answer / key token.
    fn answer_modulus(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    /// Draws a prompt uniformly from the valid prompts.
    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Token> {
        let alphabet = self.prompt_alphabet() as Token;
        (0..self.prompt_len)
            .map(|_| rng.gen_range(0..alphabet))
            .collect()
    }

    /// All valid prompts in lexicographic order.
    pub fn all_prompts(&self) -> Vec<Vec<Token>> {
        let alphabet = self.prompt_alphabet() as Token;
        let mut out = vec![Vec::new()];
        for _ in 0..self.prompt_len {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..alphabet).map(move |tok| {
                        let mut next = p.clone();
                        next.push(tok);
                        next
                    })
                })
                .collect();
        }
        out
    }

    /// Whether `completion` is a finished episode.
    pub fn is_terminal(&self, completion: &[Token]) -> bool {
        completion.last() == Some(&self.eos()) || completion.len() >= self.max_completion
    }

    /// Binary verifier. Truncated completions score 0 except in `AllSuccess`.
    pub fn verify(&self, prompt: &[Token], completion: &[Token]) -> f64 {
        let eos = self.eos();
        let Some((&last, body)) = completion.split_last() else {
            return 0.0;
        };
        if completion.len() > self.max_completion || body.contains(&eos) {
            return 0.0;
        }
        if let EnvKind::AllSuccess = self.kind {
            return 1.0;
        }
        if last != eos {
            return 0.0;
        }
        let correct = match self.kind {
            EnvKind::CopySum => body == [self.answer(prompt)],
            EnvKind::ParityChain => match body.split_last() {
                Some((&bit, scratch)) => {
                    bit == self.answer(prompt) && scratch.iter().all(|&t| t >= 2)
                }
                None => false,
            },
            EnvKind::DelayedKey { min_filler } => {
                body.len() > min_filler && body[0] == self.answer(prompt)
            }
            EnvKind::AllSuccess => true,
        };
        if correct {
            1.0
        } else {
            0.0
        }
    }

    /// The answer or key token for a prompt.
    pub fn answer(&self, prompt: &[Token]) -> Token {
        match self.kind {
            EnvKind::ParityChain => prompt.iter().fold(0, |acc, &b| acc ^ (b & 1)),
            _ => {
                let m = self.answer_modulus() as u64;
                (prompt.iter().map(|&t| t as u64).sum::<u64>() % m) as Token
            }
        }
    }

    /// A reward-1 completion for `prompt`.
    pub fn reference_completion(&self, prompt: &[Token]) -> Vec<Token> {
        let eos = self.eos();
        match self.kind {
            EnvKind::CopySum | EnvKind::ParityChain => vec![self.answer(prompt), eos],
            EnvKind::DelayedKey { min_filler } => {
                let mut c = vec![self.answer(prompt)];
                c.extend(core::iter::repeat_n(0, min_filler));
                c.push(eos);
                c
            }
            EnvKind::AllSuccess => vec![eos],
        }
    }

    /// A well-formed completion whose answer token is drawn at random.
    ///
    /// Used as the behavior-cloning target of the optional warm start: it
    /// teaches the output format without revealing correct answers.
    pub fn format_demo<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Token> {
        let eos = self.eos();
        match self.kind {
            EnvKind::CopySum => vec![rng.gen_range(0..self.answer_modulus()), eos],
            EnvKind::ParityChain => vec![rng.gen_range(0..2), eos],
            EnvKind::DelayedKey { min_filler } => {
                let mut c: Vec<Token> = (0..=min_filler)
                    .map(|_| rng.gen_range(0..self.answer_modulus()))
                    .collect();
                c.push(eos);
                c
            }
            EnvKind::AllSuccess => {
                let len = rng.gen_range(1..=self.max_completion);
                let mut c: Vec<Token> = (0..len - 1).map(|_| rng.gen_range(0..eos)).collect();
                c.push(eos);
                c
            }
        }
    }

    /// Number of terminal completions, or an error past the enumeration budget.
    pub fn enumeration_size(&self) -> Result<u128> {
        let paths = (self.vocab_size as u128)
            .checked_pow(self.max_completion as u32)
            .unwrap_or(u128::MAX);
        if paths > ENUMERATION_BUDGET {
            return Err(Error::BudgetExceeded {
                paths,
                budget: ENUMERATION_BUDGET,
            });
        }
        Ok(paths)
    }

    /// Every terminal completion: EOS-terminated sequences plus the
    /// truncated sequences of length `max_completion`.
    pub fn enumerate_all_completions(&self) -> Result<Vec<Vec<Token>>> {
        self.enumeration_size()?;
        let eos = self.eos();
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<Token>> = vec![Vec::new()];
        while let Some(prefix) = frontier.pop() {
            for tok in 0..self.vocab_size as Token {
                let mut next = prefix.clone();
                next.push(tok);
                if tok == eos || next.len() == self.max_completion {
                    out.push(next);
                } else {
                    frontier.push(next);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn copy_sum() -> EnvSpec {
        EnvSpec::copy_sum(8, 3, 4).unwrap()
    }

    /// Independent restatement of the CopySum rule.
    fn copy_sum_reference(vocab: u32, prompt: &[u32], completion: &[u32]) -> f64 {
        let eos = vocab - 1;
        let answer = prompt.iter().sum::<u32>() % (vocab - 1);
        if completion.len() == 2 && completion[0] == answer && completion[1] == eos {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn prompt_sampling_is_deterministic() {
        let env = copy_sum();
        let a = env.sample_prompt(&mut ChaCha8Rng::seed_from_u64(17));
        let b = env.sample_prompt(&mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn binary_vocab_prompts() {
        let env = EnvSpec::all_success(2, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = env.sample_prompt(&mut rng);
            assert!(p == [0] || p == [1]);
        }
        assert_eq!(env.all_prompts(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn prompts_are_uniform() {
        let env = copy_sum();
        let prompts = env.all_prompts();
        assert_eq!(prompts.len(), 343);
        let mut counts = alloc::collections::BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(env.sample_prompt(&mut rng)).or_insert(0usize) += 1;
        }
        let expected = n as f64 / prompts.len() as f64;
        let chi2: f64 = prompts
            .iter()
            .map(|p| {
                let c = *counts.get(p).unwrap_or(&0) as f64;
                (c - expected) * (c - expected) / expected
            })
            .sum();
        // Wilson-Hilferty upper quantile at alpha = 0.001.
        let df = (prompts.len() - 1) as f64;
        let z = 3.0902;
        let h = 2.0 / (9.0 * df);
        let critical = df * libm::pow(1.0 - h + z * libm::sqrt(h), 3.0);
        assert!(chi2 < critical, "chi2 = {chi2}, critical = {critical}");
    }

    #[test]
    fn copy_sum_verify_examples() {
        let env = EnvSpec::copy_sum(8, 2, 4).unwrap();
        let eos = env.eos();
        assert_eq!(
            env.verify(&[2, 3], &[5, eos]),
            copy_sum_reference(8, &[2, 3], &[5, eos])
        );
        assert_eq!(env.verify(&[2, 3], &[5, eos]), 1.0);
        assert_eq!(env.verify(&[2, 3], &[4, eos]), 0.0);
        assert_eq!(env.verify(&[2, 3], &[5, 5, 5, 5]), 0.0);
    }

    #[test]
    fn copy_sum_matches_reference_exhaustively() {
        let env = EnvSpec::copy_sum(4, 2, 3).unwrap();
        let completions = env.enumerate_all_completions().unwrap();
        for prompt in env.all_prompts() {
            for c in &completions {
                assert_eq!(env.verify(&prompt, c), copy_sum_reference(4, &prompt, c));
            }
        }
    }

    #[test]
    fn truncation_scores_zero() {
        let eos_free = [0, 0, 0, 0];
        for env in [
            EnvSpec::copy_sum(8, 2, 4).unwrap(),
            EnvSpec::parity_chain(4, 3, 4).unwrap(),
            EnvSpec::delayed_key(5, 1, 4, 2).unwrap(),
        ] {
            assert_eq!(env.verify(&[0, 0, 0][..env.prompt_len()], &eos_free), 0.0);
        }
        let all = EnvSpec::all_success(3, 1, 4).unwrap();
        assert_eq!(all.verify(&[0], &eos_free), 1.0);
    }

    #[test]
    fn parity_chain_rules() {
        let env = EnvSpec::parity_chain(4, 3, 5).unwrap();
        let eos = env.eos();
        assert_eq!(env.verify(&[1, 0, 1], &[0, eos]), 1.0);
        assert_eq!(env.verify(&[1, 0, 1], &[2, 2, 0, eos]), 1.0);
        assert_eq!(env.verify(&[1, 0, 1], &[1, eos]), 0.0);
        assert_eq!(env.verify(&[1, 1, 1], &[2, 1, eos]), 1.0);
        assert_eq!(env.verify(&[1, 1, 1], &[0, 1, eos]), 0.0);
        assert_eq!(env.verify(&[1, 1, 1], &[2, eos]), 0.0);
    }

    #[test]
    fn delayed_key_rules() {
        let env = EnvSpec::delayed_key(5, 2, 6, 2).unwrap();
        let eos = env.eos();
        // key = (3 + 2) mod 4 = 1
        assert_eq!(env.verify(&[3, 2], &[1, 0, 3, eos]), 1.0);
        assert_eq!(env.verify(&[3, 2], &[1, 2, 2, 2, eos]), 1.0);
        assert_eq!(env.verify(&[3, 2], &[1, 0, eos]), 0.0);
        assert_eq!(env.verify(&[3, 2], &[2, 0, 3, eos]), 0.0);
        assert_eq!(env.verify(&[3, 2], &[1, 0, 3, 3, 3, 3]), 0.0);
    }

    #[test]
    fn every_prompt_is_solvable() {
        for env in [
            EnvSpec::copy_sum(4, 2, 4).unwrap(),
            EnvSpec::copy_sum(3, 1, 6).unwrap(),
            EnvSpec::parity_chain(4, 3, 5).unwrap(),
            EnvSpec::parity_chain(3, 2, 6).unwrap(),
            EnvSpec::delayed_key(4, 1, 6, 3).unwrap(),
            EnvSpec::delayed_key(3, 2, 4, 1).unwrap(),
            EnvSpec::all_success(2, 1, 6).unwrap(),
        ] {
            let completions = env.enumerate_all_completions().unwrap();
            for prompt in env.all_prompts() {
                assert!(completions.iter().any(|c| env.verify(&prompt, c) == 1.0));
                let witness = env.reference_completion(&prompt);
                assert_eq!(env.verify(&prompt, &witness), 1.0);
            }
        }
    }

    #[test]
    fn enumeration_counts_terminal_paths() {
        let env = EnvSpec::all_success(2, 1, 2).unwrap();
        // [EOS], [0, EOS], [0, 0]
        assert_eq!(env.enumerate_all_completions().unwrap().len(), 3);
        for c in env.enumerate_all_completions().unwrap() {
            assert!(env.is_terminal(&c));
            assert!(c.len() <= env.max_completion());
        }
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let env = EnvSpec::copy_sum(16, 1, 6).unwrap();
        assert!(matches!(
            env.enumerate_all_completions(),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn format_demos_are_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for env in [
            EnvSpec::copy_sum(8, 2, 4).unwrap(),
            EnvSpec::parity_chain(4, 3, 4).unwrap(),
            EnvSpec::delayed_key(6, 1, 6, 2).unwrap(),
            EnvSpec::all_success(3, 1, 4).unwrap(),
        ] {
            for _ in 0..50 {
                let demo = env.format_demo(&mut rng);
                assert!(demo.len() <= env.max_completion());
                assert_eq!(*demo.last().unwrap(), env.eos());
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(EnvSpec::copy_sum(1, 1, 4).is_err());
        assert!(EnvSpec::copy_sum(4, 0, 4).is_err());
        assert!(EnvSpec::copy_sum(4, 1, 1).is_err());
        assert!(EnvSpec::parity_chain(2, 1, 4).is_err());
        assert!(EnvSpec::delayed_key(4, 1, 3, 2).is_err());
    }
}
