//! Reward-free online self-training.
//!
//! Each outer step freezes the current policy, samples G responses per
//! prompt at the sampling temperature tau_s, then takes mu plain
//! gradient-descent passes on the negative log-likelihood of those
//! responses at the training temperature tau_t. No verifier or reward is
//! ever consulted; the batch carries only (prompt, output) pairs.
//!
//! The same NLL machinery doubles as ordinary supervised finetuning on a
//! static corpus (`sft_train`), which is how base policies are pre-seeded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, EvalPlan, MetricRecord, MetricSink};
use crate::policy::{GradientVector, PolicyParams, TokenId, TokenWeighting, UpdateDirection};
use crate::rng::RngStream;
use crate::sampling::{self, TemperatureConfig};
use crate::tasks::Task;

const STREAM_OSFT: u64 = 11;
const STREAM_SFT: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsftConfig {
    pub temperatures: TemperatureConfig,
    /// G: rollouts per prompt per outer step.
    pub rollouts_per_prompt: usize,
    /// mu: optimization passes over each batch.
    pub inner_iters: usize,
    /// M: outer steps.
    pub outer_steps: usize,
    pub batch_prompts: usize,
    pub learning_rate: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    pub max_len: usize,
}

impl Default for OsftConfig {
    fn default() -> Self {
        Self {
            temperatures: TemperatureConfig::new(0.6, 1.0, 1.0),
            rollouts_per_prompt: 1,
            inner_iters: 1,
            outer_steps: 200,
            batch_prompts: 512,
            learning_rate: 1.0,
            warmup_steps: 10,
            max_len: 6,
        }
    }
}

impl OsftConfig {
    pub fn validate(&self) -> Result<()> {
        self.temperatures.validate()?;
        if self.rollouts_per_prompt < 1 {
            return Err(Error::Config("rollouts_per_prompt must be >= 1".into()));
        }
        if self.inner_iters < 1 {
            return Err(Error::Config("inner_iters must be >= 1".into()));
        }
        if self.outer_steps < 1 {
            return Err(Error::Config("outer_steps must be >= 1".into()));
        }
        if self.batch_prompts < 1 {
            return Err(Error::Config("batch_prompts must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Self-generated training pairs from one frozen policy. Carries no reward
/// information of any kind.
#[derive(Debug, Clone, PartialEq)]
pub struct OsftBatch {
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    /// Outer step whose frozen policy generated the pairs.
    pub source_step: usize,
    pub mean_output_len: f64,
    /// Mean per-token log-probability at the sampling temperature.
    pub mean_logprob_sampling: f64,
    pub truncated_fraction: f64,
}

/// Sample exactly G rollouts per prompt at tau_s from the frozen policy.
/// Pairs are grouped contiguously by prompt.
pub fn build_osft_batch(
    params_old: &PolicyParams,
    prompts: &[Vec<TokenId>],
    cfg: &OsftConfig,
    source_step: usize,
    rng: &RngStream,
) -> Result<OsftBatch> {
    if prompts.is_empty() {
        return Err(Error::Input("build_osft_batch needs at least one prompt".into()));
    }
    let rollouts = sampling::batch_rollouts(
        params_old,
        prompts,
        cfg.rollouts_per_prompt,
        cfg.temperatures.tau_s,
        cfg.max_len,
        rng,
    )?;
    let total_tokens: usize = rollouts.iter().map(|r| r.output.len()).sum();
    let total_logprob: f64 = rollouts.iter().map(|r| r.total_logprob()).sum();
    let truncated = rollouts.iter().filter(|r| r.truncated).count();
    let n = rollouts.len();
    let pairs = rollouts.into_iter().map(|r| (r.prompt, r.output)).collect();
    Ok(OsftBatch {
        pairs,
        source_step,
        mean_output_len: total_tokens as f64 / n as f64,
        mean_logprob_sampling: total_logprob / total_tokens as f64,
        truncated_fraction: truncated as f64 / n as f64,
    })
}

/// Mean (over pairs) of the summed-token negative log-likelihood at `tau`.
pub fn nll_loss(params: &PolicyParams, pairs: &[(Vec<TokenId>, Vec<TokenId>)], tau: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("loss needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (q, o) in pairs {
        total += params.sequence_logprob(q, o, tau)?.0;
    }
    Ok(-total / pairs.len() as f64)
}

/// NLL loss and its exact parameter gradient.
///
/// Token contributions accumulate sequentially in pair order into one
/// dense gradient, so the result does not depend on the execution mode of
/// anything around it. Tabular contexts must be materialized first.
pub fn nll_loss_and_grad(
    params: &PolicyParams,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    tau: f64,
) -> Result<(f64, GradientVector)> {
    if pairs.is_empty() {
        return Err(Error::Input("loss needs at least one pair".into()));
    }
    let mut loss = 0.0;
    let mut grad = GradientVector::zeros(params.param_count());
    let w = -1.0 / pairs.len() as f64;
    for (q, o) in pairs {
        let (total, _) = params.sequence_logprob(q, o, tau)?;
        loss += total;
        params.accumulate_logprob_gradient(q, o, tau, TokenWeighting::Uniform(w), &mut grad)?;
    }
    Ok((-loss / pairs.len() as f64, grad))
}

/// The self-training loss at the training temperature: mean NLL over the
/// batch, with its exact gradient.
pub fn osft_loss(params: &PolicyParams, batch: &OsftBatch, tau_t: f64) -> Result<(f64, GradientVector)> {
    nll_loss_and_grad(params, &batch.pairs, tau_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsftStepMetrics {
    pub step: usize,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub mean_len: f64,
    pub mean_logprob_tau_s: f64,
    pub truncated_fraction: f64,
    pub wall_ms: f64,
}

/// One outer step: freeze, sample, mu descent passes.
pub fn osft_step(
    params: PolicyParams,
    prompts: &[Vec<TokenId>],
    cfg: &OsftConfig,
    step: usize,
    rng: &RngStream,
) -> Result<(PolicyParams, OsftStepMetrics)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = params;
    let frozen = params.clone();
    let batch = build_osft_batch(&frozen, prompts, cfg, step, rng)?;
    for (q, o) in &batch.pairs {
        params.ensure_contexts(q, o)?;
    }
    let lr = cfg.lr_at(step);
    let mut loss_pre = f64::NAN;
    for inner in 0..cfg.inner_iters {
        let (loss, grad) = osft_loss(&params, &batch, cfg.temperatures.tau_t)?;
        if inner == 0 {
            loss_pre = loss;
        }
        params = params.apply_update(&grad, lr, UpdateDirection::Descent)?;
    }
    let loss_post = nll_loss(&params, &batch.pairs, cfg.temperatures.tau_t)?;
    let metrics = OsftStepMetrics {
        step,
        loss_pre,
        loss_post,
        mean_len: batch.mean_output_len,
        mean_logprob_tau_s: batch.mean_logprob_sampling,
        truncated_fraction: batch.truncated_fraction,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((params, metrics))
}

/// Run M outer steps with periodic evaluation and optional checkpoints.
pub fn osft_train(
    params: PolicyParams,
    task: &Task,
    prompts: &[Vec<TokenId>],
    cfg: &OsftConfig,
    eval: &EvalPlan,
    sink: &mut dyn MetricSink,
    run_seed: u64,
    ckpt_dir: Option<&std::path::Path>,
) -> Result<PolicyParams> {
    cfg.validate()?;
    eval.validate()?;
    let mut params = params;
    params.push_seed(run_seed);
    let root = RngStream::new(run_seed, STREAM_OSFT);

    run_eval(&params, task, prompts, eval, cfg.max_len, &root, 0, sink)?;
    for step in 1..=cfg.outer_steps {
        let mut pick = root.substream(2 * step as u64);
        let batch_prompts: Vec<Vec<TokenId>> = (0..cfg.batch_prompts)
            .map(|_| prompts[pick.gen_range(prompts.len())].clone())
            .collect();
        let step_rng = root.substream(2 * step as u64 + 1);
        let (next, m) = osft_step(params, &batch_prompts, cfg, step, &step_rng)?;
        params = next;
        emit_step_metrics(sink, &m)?;
        if step % eval.every_k_steps == 0 || step == cfg.outer_steps {
            run_eval(&params, task, prompts, eval, cfg.max_len, &root, step, sink)?;
            if let Some(dir) = ckpt_dir {
                crate::checkpoint::save(&params, &dir.join(format!("checkpoint_step{step}.json")))?;
            }
        }
    }
    Ok(params)
}

fn emit_step_metrics(sink: &mut dyn MetricSink, m: &OsftStepMetrics) -> Result<()> {
    sink.metric(&MetricRecord::new(m.step, "loss_pre", m.loss_pre))?;
    sink.metric(&MetricRecord::new(m.step, "loss_post", m.loss_post))?;
    sink.metric(&MetricRecord::new(m.step, "mean_len", m.mean_len))?;
    sink.metric(&MetricRecord::new(m.step, "mean_logprob_tau_s", m.mean_logprob_tau_s))?;
    sink.metric(&MetricRecord::new(m.step, "truncated_fraction", m.truncated_fraction))?;
    sink.step_record(&serde_json::to_value(m)?)?;
    Ok(())
}

/// Evaluate with a purity check: evaluation must not change parameters.
pub(crate) fn run_eval(
    params: &PolicyParams,
    task: &Task,
    prompts: &[Vec<TokenId>],
    eval: &EvalPlan,
    max_len: usize,
    root: &RngStream,
    step: usize,
    sink: &mut dyn MetricSink,
) -> Result<()> {
    let before = params.content_hash();
    let report = metrics::evaluate_policy(params, task, prompts, eval, max_len, &root.substream(1_000_000 + step as u64))?;
    if params.content_hash() != before {
        return Err(Error::Internal("evaluation mutated policy parameters".into()));
    }
    for row in &report.rows {
        sink.metric(
            &MetricRecord::new(step, "pass_at_k", row.value)
                .tag("tau", row.tau)
                .tag("k", row.k),
        )?;
    }
    sink.metric(&MetricRecord::new(step, "ppl", report.ppl).tag("tau", report.ppl_tau))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Training temperature; plain SFT uses the native distribution.
    pub tau: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 64, learning_rate: 1.0, warmup_steps: 10, tau: 1.0 }
    }
}

/// Plain supervised finetuning on a static corpus (minimizing the NLL of
/// the given pairs). Used to pre-seed base policies before self-training.
pub fn sft_train(
    params: PolicyParams,
    corpus: &[(Vec<TokenId>, Vec<TokenId>)],
    cfg: &SftConfig,
    sink: &mut dyn MetricSink,
    run_seed: u64,
) -> Result<PolicyParams> {
    if corpus.is_empty() {
        return Err(Error::Input("sft_train needs a nonempty corpus".into()));
    }
    if cfg.steps < 1 || cfg.batch_size < 1 {
        return Err(Error::Config("sft steps and batch_size must be >= 1".into()));
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.tau > 0.0) {
        return Err(Error::Config("sft learning_rate and tau must be positive".into()));
    }
    let mut params = params;
    params.push_seed(run_seed);
    let root = RngStream::new(run_seed, STREAM_SFT);
    for step in 1..=cfg.steps {
        let mut pick = root.substream(step as u64);
        let batch: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..cfg.batch_size)
            .map(|_| corpus[pick.gen_range(corpus.len())].clone())
            .collect();
        for (q, o) in &batch {
            params.ensure_contexts(q, o)?;
        }
        let (loss, grad) = nll_loss_and_grad(&params, &batch, cfg.tau)?;
        let lr = if cfg.warmup_steps == 0 {
            cfg.learning_rate
        } else {
            cfg.learning_rate * (step as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        params = params.apply_update(&grad, lr, UpdateDirection::Descent)?;
        sink.metric(&MetricRecord::new(step, "sft_loss", loss))?;
    }
    Ok(params)
}
