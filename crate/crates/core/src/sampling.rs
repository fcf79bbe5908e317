//! Temperature-scaled autoregressive generation.
//!
//! Pure temperature sampling only: no top-p, top-k or repetition penalty.
//! Generation stops at EOS or at `max_len` (recorded in the `truncated`
//! flag; truncated rollouts are kept). Each rollout owns its random stream,
//! so batches are reproducible and order-independent under parallel
//! execution.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::math;
use crate::policy::{PolicyParams, TokenId};
use crate::rng::RngStream;

/// The (sampling, training, evaluation) temperature triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    pub tau_eval: f64,
}

impl TemperatureConfig {
    pub fn new(tau_s: f64, tau_t: f64, tau_eval: f64) -> Self {
        Self { tau_s, tau_t, tau_eval }
    }

    /// Coupled setting used by the GRPO baseline.
    pub fn coupled_unit() -> Self {
        Self { tau_s: 1.0, tau_t: 1.0, tau_eval: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_s", self.tau_s), ("tau_t", self.tau_t), ("tau_eval", self.tau_eval)] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {t}")));
            }
        }
        Ok(())
    }

    /// Sampling sharper than training: the regime where the expected update
    /// reinforces the argmax.
    pub fn stable_regime(&self) -> bool {
        self.tau_s < self.tau_t
    }

    pub fn coupled(&self) -> bool {
        (self.tau_s - self.tau_t).abs() < 1e-12
    }
}

/// One sampled response with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: Vec<TokenId>,
    pub output: Vec<TokenId>,
    /// log pi(o_t | q, o_<t) at the sampling temperature.
    pub logprobs: Vec<f64>,
    pub tau: f64,
    /// true when generation hit max_len without emitting EOS.
    pub truncated: bool,
}

impl Rollout {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// softmax(logits / tau) as a probability vector.
pub fn temperature_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    temperature_softmax_masked(logits, tau, None)
}

/// softmax(logits / tau) with an optional masked id carrying zero mass.
pub fn temperature_softmax_masked(
    logits: &[f64],
    tau: f64,
    masked: Option<TokenId>,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive and finite, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Input("empty logits".into()));
    }
    Ok(math::masked_softmax_t(logits, tau, masked))
}

/// Sample one response from the policy at temperature `tau`.
pub fn rollout(
    params: &PolicyParams,
    prompt: &[TokenId],
    tau: f64,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<Rollout> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let eos = params.vocab().eos();
    let mut prefix = prompt.to_vec();
    let mut output = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let z = params.logits(&prefix)?;
        let probs = math::masked_softmax_t(&z, tau, Some(params.vocab().pad()));
        let lp = math::masked_log_softmax_t(&z, tau, Some(params.vocab().pad()));
        let tok = rng.sample_categorical(&probs);
        output.push(tok);
        logprobs.push(lp[tok]);
        prefix.push(tok);
        if tok == eos || output.len() == max_len {
            break;
        }
    }
    let truncated = *output.last().expect("output nonempty") != eos;
    Ok(Rollout { prompt: prompt.to_vec(), output, logprobs, tau, truncated })
}

/// Greedy decode: argmax token at each step, ties broken by lowest id.
pub fn greedy_decode(params: &PolicyParams, prompt: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let eos = params.vocab().eos();
    let pad = params.vocab().pad();
    let mut prefix = prompt.to_vec();
    let mut output = Vec::new();
    loop {
        let z = params.logits(&prefix)?;
        let tok = math::argmax_tiebreak_lowest(&z, Some(pad));
        output.push(tok);
        prefix.push(tok);
        if tok == eos || output.len() == max_len {
            break;
        }
    }
    Ok(output)
}

/// G rollouts per prompt, grouped contiguously by prompt.
///
/// Rollout (i, g) draws from `base.substream(i * g_per_prompt + g)`, so the
/// result is independent of scheduling and identical across `ExecMode`s.
pub fn batch_rollouts_with(
    mode: ExecMode,
    params: &PolicyParams,
    prompts: &[Vec<TokenId>],
    g_per_prompt: usize,
    tau: f64,
    max_len: usize,
    base: &RngStream,
) -> Result<Vec<Rollout>> {
    if g_per_prompt < 1 {
        return Err(Error::Config("rollouts per prompt must be >= 1".into()));
    }
    let n = prompts.len() * g_per_prompt;
    let results = map_indexed(mode, n, |j| {
        let prompt = &prompts[j / g_per_prompt];
        let mut rng = base.substream(j as u64);
        rollout(params, prompt, tau, max_len, &mut rng)
    });
    results.into_iter().collect()
}

/// `batch_rollouts_with` under the default execution mode.
pub fn batch_rollouts(
    params: &PolicyParams,
    prompts: &[Vec<TokenId>],
    g_per_prompt: usize,
    tau: f64,
    max_len: usize,
    base: &RngStream,
) -> Result<Vec<Rollout>> {
    batch_rollouts_with(ExecMode::default(), params, prompts, g_per_prompt, tau, max_len, base)
}

/// Exact distribution over the sampler's outcome space: every output
/// reachable at temperature `tau` within `max_len`, with its probability.
/// Sequences end at EOS or at the length cap (no renormalization), exactly
/// mirroring `rollout`, so the probabilities sum to 1.
pub fn enumerate_outputs(
    params: &PolicyParams,
    prompt: &[TokenId],
    tau: f64,
    max_len: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut prefix = prompt.to_vec();
    let mut output = Vec::new();
    descend(params, tau, max_len, &mut prefix, &mut output, 1.0, &mut out)?;
    Ok(out)
}

fn descend(
    params: &PolicyParams,
    tau: f64,
    max_len: usize,
    prefix: &mut Vec<TokenId>,
    output: &mut Vec<TokenId>,
    prob: f64,
    out: &mut Vec<(Vec<TokenId>, f64)>,
) -> Result<()> {
    let eos = params.vocab().eos();
    let dist = params.next_token_dist(prefix, tau)?;
    for (tok, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        output.push(tok);
        prefix.push(tok);
        if tok == eos || output.len() == max_len {
            out.push((output.clone(), prob * p));
        } else {
            descend(params, tau, max_len, prefix, output, prob * p, out)?;
        }
        prefix.pop();
        output.pop();
    }
    Ok(())
}

/// One line per rollout in a dump file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub prompt: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub tau: f64,
    pub truncated: bool,
}

/// Append rollouts as line-delimited JSON records.
pub fn append_rollout_dump<W: Write>(w: &mut W, step: usize, rollouts: &[Rollout]) -> Result<()> {
    for r in rollouts {
        let rec = RolloutRecord {
            step,
            prompt: r.prompt.clone(),
            output: r.output.clone(),
            logprobs: r.logprobs.clone(),
            tau: r.tau,
            truncated: r.truncated,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
