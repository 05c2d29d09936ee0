//! Critic-free policy optimization on synthetic token-generation MDPs.
//!
//! This crate implements GRPO and its trace-weighted extension GRPO-λ over a
//! tabular softmax policy, together with the brute-force oracles used to
//! check them:
//!
//! - [`envs`]: deterministic token MDPs with a binary verifier reward at EOS.
//! - [`policy`]: n-gram context softmax policy with closed-form gradients and exact KL.
//! - [`rollout`]: seeded group sampling and per-token discounted returns.
//! - [`advantage`]: normalized advantage estimation, negative clamping, EOS-based ΔV bound.
//! - [`traces`]: trace-weight matrices (recent / both), accumulated GAE ratios, eligibility traces.
//! - [`losses`]: GRPO, GRPO-λ ε-trace and ε-weight objectives with analytic gradients.
//! - [`oracle`]: exhaustive value enumeration, the three-form gradient identity, finite differences.
//! - [`trainer`]: the SGD training loop and its metrics.
//!
//! The crate is `no_std` (with `alloc`); IO, configuration files and the CLI
//! live in the companion `grpo-lambda` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x >= 0.0)` is how range checks here reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the subscripts of the formulas they implement.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod advantage;
pub mod envs;
pub mod error;
pub mod losses;
pub mod oracle;
pub mod policy;
pub mod rollout;
pub mod traces;
pub mod trainer;

mod math;

pub use error::{Error, Result};
