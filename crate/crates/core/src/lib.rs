//! Desk-scale laboratory for temperature-decoupled self-training of tiny
//! autoregressive policies.
//!
//! The core loop samples responses from the current policy at one
//! temperature and finetunes on them at another, next to a group-relative
//! clipped-surrogate baseline trained from exact task rewards. Everything
//! is small enough to verify: expected gradients by full enumeration,
//! analytic gradients by finite differences, pass@k by exhaustive subset
//! counting, and whole runs by byte-identical replay.
//!
//! Module map:
//! - [`policy`]: tabular and tanh-network policies, log-probabilities and
//!   hand-derived gradients
//! - [`sampling`]: temperature sampling, greedy decode, rollout batches
//! - [`osft`]: the sample-then-finetune trainer and plain SFT
//! - [`grpo`]: the reward-based baseline with its variant switches
//! - [`metrics`]: pass@k, perplexity, margins, entropy, eval plumbing
//! - [`gradcheck`]: enumeration/Monte-Carlo gradient verification grid
//! - [`tasks`]: synthetic verifiable tasks and noisy pretraining corpora
//! - [`harness`]: config-driven runs, sweeps, export, comparison
//!
//! Batch work (rollouts, Monte Carlo estimation, evaluation) runs
//! data-parallel under the default `parallel` feature and falls back to
//! sequential execution without it; both paths produce bit-identical
//! results.

pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod grpo;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod osft;
pub mod policy;
pub mod rng;
pub mod sampling;
pub mod tasks;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use policy::{
    init_policy, GradientVector, PolicyKind, PolicyParams, TokenId, UpdateDirection, Vocabulary,
};
pub use rng::RngStream;
pub use sampling::{Rollout, TemperatureConfig};
