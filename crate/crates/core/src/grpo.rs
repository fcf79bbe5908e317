//! Group-relative policy optimization baseline.
//!
//! Rewards come from the task verifier, G rollouts per prompt form a group,
//! and advantages are the group-normalized rewards (r - mean) / std with
//! population std and a 1e-8 guard. The objective is the token-level
//! clipped importance-ratio surrogate
//!
//!   sum_t min( r_t * A, clip(r_t, 1 - eps_low, 1 + eps_high) * A )
//!
//! ascended with plain gradient steps. Variant switches: asymmetric clip
//! bounds plus a dual-clip floor for negative advantages, disabling std
//! normalization, and sequence-sum loss aggregation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::metrics::{EvalPlan, MetricRecord, MetricSink};
use crate::policy::{GradientVector, PolicyParams, TokenId, TokenWeighting, UpdateDirection};
use crate::rng::RngStream;
use crate::sampling::{self, Rollout, TemperatureConfig};
use crate::tasks::Task;

const STREAM_GRPO: u64 = 17;
/// Groups whose reward std falls below this are treated as zero-variance.
const STD_GUARD: f64 = 1e-8;
/// Log-ratio clamp; beyond this the importance ratio is saturated and the
/// event counted.
const LOG_RATIO_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAgg {
    /// Mean over every token in the batch.
    TokenMean,
    /// Sum tokens within a sequence, then mean over sequences.
    SeqMeanTokenSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// G: rollouts per prompt.
    pub group_size: usize,
    pub clip_low: f64,
    pub clip_high: f64,
    /// Dual-clip floor c for negative advantages: the per-token objective
    /// is bounded below by c * A.
    pub clip_ratio_c: Option<f64>,
    pub beta_kl: f64,
    /// Divide centered rewards by the group std (false = keep them raw).
    pub normalize_std: bool,
    pub loss_agg: LossAgg,
    /// Coupled sampling/training temperatures (fixed at 1).
    pub temperatures: TemperatureConfig,
    pub learning_rate: f64,
    /// mu: optimization epochs per batch.
    pub inner_iters: usize,
    pub outer_steps: usize,
    pub batch_prompts: usize,
    pub warmup_steps: usize,
    pub max_len: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_low: 0.2,
            clip_high: 0.2,
            clip_ratio_c: None,
            beta_kl: 0.0,
            normalize_std: true,
            loss_agg: LossAgg::TokenMean,
            temperatures: TemperatureConfig::coupled_unit(),
            learning_rate: 2.5,
            inner_iters: 1,
            outer_steps: 200,
            batch_prompts: 64,
            warmup_steps: 10,
            max_len: 6,
        }
    }
}

impl GrpoConfig {
    /// Asymmetric clip bounds with a dual-clip floor.
    pub fn dapo_preset() -> Self {
        Self { clip_low: 0.2, clip_high: 0.28, clip_ratio_c: Some(10.0), ..Self::default() }
    }

    /// Std normalization off, sequence-sum loss aggregation.
    pub fn dr_grpo_preset() -> Self {
        Self { normalize_std: false, loss_agg: LossAgg::SeqMeanTokenSum, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.temperatures.validate()?;
        if self.temperatures.tau_s != 1.0 || self.temperatures.tau_t != 1.0 {
            return Err(Error::Config("grpo requires the coupled setting tau_s = tau_t = 1".into()));
        }
        if self.group_size < 1 {
            return Err(Error::Config("group_size must be >= 1".into()));
        }
        if self.normalize_std && self.group_size < 2 {
            return Err(Error::Config("std normalization needs group_size >= 2".into()));
        }
        if !(self.clip_low > 0.0) || !(self.clip_high > 0.0) {
            return Err(Error::Config("clip bounds must be positive".into()));
        }
        if let Some(c) = self.clip_ratio_c {
            if !(c > 1.0) {
                return Err(Error::Config("clip_ratio_c must exceed 1".into()));
            }
        }
        if self.beta_kl < 0.0 {
            return Err(Error::Config("beta_kl must be nonnegative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.inner_iters < 1 || self.outer_steps < 1 || self.batch_prompts < 1 || self.max_len < 1 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
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

/// G rewards for one prompt with their group statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl AdvantageGroup {
    pub fn zero_variance(&self) -> bool {
        self.std < STD_GUARD
    }
}

/// Group-relative advantages: (r - mean) / std with population std, or
/// r - mean when normalization is off. Zero-variance groups get all-zero
/// advantages.
pub fn group_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<AdvantageGroup> {
    if rewards.len() != cfg.group_size {
        return Err(Error::Input(format!(
            "expected {} rewards per group, got {}",
            cfg.group_size,
            rewards.len()
        )));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    let advantages = if cfg.normalize_std {
        if std < STD_GUARD {
            vec![0.0; rewards.len()]
        } else {
            rewards.iter().map(|r| (r - mean) / std).collect()
        }
    } else {
        rewards.iter().map(|r| r - mean).collect()
    };
    Ok(AdvantageGroup { rewards: rewards.to_vec(), mean, std, advantages })
}

/// Per-token importance ratios and how often clipping fired.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioStats {
    pub ratios: Vec<f64>,
    pub clip_fraction: f64,
    /// Tokens whose log-ratio exceeded the clamp and was saturated.
    pub overflow_clamps: usize,
}

/// One prompt's rollouts with their advantages.
#[derive(Debug, Clone)]
pub struct PromptGroup {
    pub rollouts: Vec<Rollout>,
    pub advantages: AdvantageGroup,
}

/// The clipped surrogate over all groups, its ascent gradient, and ratio
/// statistics. `params_ref` is only consulted when `beta_kl > 0`.
pub fn grpo_objective(
    params: &PolicyParams,
    groups: &[PromptGroup],
    cfg: &GrpoConfig,
    params_ref: Option<&PolicyParams>,
) -> Result<(f64, GradientVector, RatioStats)> {
    grpo_objective_with(ExecMode::default(), params, groups, cfg, params_ref)
}

pub fn grpo_objective_with(
    mode: ExecMode,
    params: &PolicyParams,
    groups: &[PromptGroup],
    cfg: &GrpoConfig,
    params_ref: Option<&PolicyParams>,
) -> Result<(f64, GradientVector, RatioStats)> {
    if groups.is_empty() {
        return Err(Error::Input("grpo_objective needs at least one group".into()));
    }
    if cfg.beta_kl > 0.0 && params_ref.is_none() {
        return Err(Error::Config("beta_kl > 0 requires a reference policy".into()));
    }
    let flat: Vec<(&Rollout, f64)> = groups
        .iter()
        .flat_map(|g| g.rollouts.iter().zip(g.advantages.advantages.iter().copied()))
        .collect();
    let total_tokens: usize = flat.iter().map(|(r, _)| r.output.len()).sum();
    let norm = match cfg.loss_agg {
        LossAgg::TokenMean => total_tokens as f64,
        LossAgg::SeqMeanTokenSum => flat.len() as f64,
    };
    let tau = cfg.temperatures.tau_t;

    // per-rollout log-prob recomputation is the parallel part; everything
    // downstream accumulates sequentially in rollout order
    let logprobs: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = map_indexed(mode, flat.len(), |i| {
        let (rollout, _) = &flat[i];
        let lp_new = params.sequence_logprob(&rollout.prompt, &rollout.output, tau)?.1;
        let lp_ref = match (cfg.beta_kl > 0.0, params_ref) {
            (true, Some(r)) => Some(r.sequence_logprob(&rollout.prompt, &rollout.output, tau)?.1),
            _ => None,
        };
        Ok((lp_new, lp_ref))
    });

    let lo = 1.0 - cfg.clip_low;
    let hi = 1.0 + cfg.clip_high;
    let mut objective = 0.0;
    let mut grad = GradientVector::zeros(params.param_count());
    let mut ratios = Vec::with_capacity(total_tokens);
    let mut clipped = 0usize;
    let mut clamped = 0usize;
    let mut weights = Vec::new();
    for ((rollout, advantage), lp) in flat.iter().zip(logprobs) {
        let (lp_new, lp_ref) = lp?;
        weights.clear();
        weights.resize(lp_new.len(), 0.0);
        for t in 0..lp_new.len() {
            let mut delta = lp_new[t] - rollout.logprobs[t];
            if delta.abs() > LOG_RATIO_CLAMP {
                delta = delta.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
                clamped += 1;
            }
            let ratio = delta.exp();
            ratios.push(ratio);
            let unclipped = ratio * advantage;
            let clip_term = ratio.clamp(lo, hi) * advantage;
            let mut term = unclipped.min(clip_term);
            // gradient flows only through the unclipped branch
            let mut active = unclipped <= clip_term;
            if clip_term < unclipped {
                clipped += 1;
            }
            if *advantage < 0.0 {
                if let Some(c) = cfg.clip_ratio_c {
                    let floor = c * advantage;
                    if term < floor {
                        term = floor;
                        active = false;
                        clipped += 1;
                    }
                }
            }
            objective += term / norm;
            if active && *advantage != 0.0 {
                weights[t] += advantage * ratio / norm;
            }
            if let Some(ref lp_r) = lp_ref {
                // k3 estimator of KL(pi_theta || pi_ref) per token
                let d = lp_r[t] - lp_new[t];
                objective -= cfg.beta_kl * (d.exp() - d - 1.0) / norm;
                weights[t] -= cfg.beta_kl * (1.0 - d.exp()) / norm;
            }
        }
        if weights.iter().any(|&w| w != 0.0) {
            params.accumulate_logprob_gradient(
                &rollout.prompt,
                &rollout.output,
                tau,
                TokenWeighting::PerToken(&weights),
                &mut grad,
            )?;
        }
    }
    let stats = RatioStats {
        clip_fraction: clipped as f64 / total_tokens.max(1) as f64,
        ratios,
        overflow_clamps: clamped,
    };
    Ok((objective, grad, stats))
}

/// Monte Carlo KL(params || params_ref) over pre-sampled outputs, or 0
/// immediately when beta is 0.
pub fn kl_penalty(
    params: &PolicyParams,
    params_ref: &PolicyParams,
    samples: &[(Vec<TokenId>, Vec<TokenId>)],
    beta: f64,
) -> Result<f64> {
    if beta == 0.0 {
        return Ok(0.0);
    }
    if samples.is_empty() {
        return Err(Error::Input("kl_penalty needs samples when beta > 0".into()));
    }
    let mut total = 0.0;
    for (q, o) in samples {
        let lp = params.sequence_logprob(q, o, 1.0)?.0;
        let lq = params_ref.sequence_logprob(q, o, 1.0)?.0;
        total += lp - lq;
    }
    Ok(total / samples.len() as f64)
}

/// Exact sequence-level KL(params || params_ref) by enumerating the output
/// space. Oracle for `kl_penalty`.
pub fn kl_exact_enumeration(
    params: &PolicyParams,
    params_ref: &PolicyParams,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<f64> {
    let outs = sampling::enumerate_outputs(params, prompt, 1.0, max_len)?;
    let mut kl = 0.0;
    for (o, p) in outs {
        let lq = params_ref.sequence_logprob(prompt, &o, 1.0)?.0;
        kl += p * (p.ln() - lq);
    }
    Ok(kl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub zero_var_group_fraction: f64,
    pub wall_ms: f64,
}

/// One outer step: G rollouts per prompt at temperature 1, verifier
/// rewards, group advantages, mu ascent passes on the clipped surrogate.
pub fn grpo_step(
    params: PolicyParams,
    prompts: &[Vec<TokenId>],
    task: &Task,
    cfg: &GrpoConfig,
    step: usize,
    rng: &RngStream,
    params_ref: Option<&PolicyParams>,
) -> Result<(PolicyParams, GrpoStepMetrics)> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Input("grpo_step needs at least one prompt".into()));
    }
    let start = Instant::now();
    let mut params = params;
    let frozen = params.clone();
    let rollouts = sampling::batch_rollouts(
        &frozen,
        prompts,
        cfg.group_size,
        cfg.temperatures.tau_s,
        cfg.max_len,
        rng,
    )?;
    let g = cfg.group_size;
    let mut groups = Vec::with_capacity(prompts.len());
    let mut reward_sum = 0.0;
    let mut zero_var = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        let group_rollouts: Vec<Rollout> = rollouts[i * g..(i + 1) * g].to_vec();
        let rewards: Vec<f64> = group_rollouts
            .iter()
            .map(|r| task.verify(prompt, &r.output).reward)
            .collect();
        reward_sum += rewards.iter().sum::<f64>();
        let advantages = group_advantages(&rewards, cfg)?;
        if advantages.zero_variance() {
            zero_var += 1;
        }
        groups.push(PromptGroup { rollouts: group_rollouts, advantages });
    }
    for group in &groups {
        for r in &group.rollouts {
            params.ensure_contexts(&r.prompt, &r.output)?;
        }
    }
    let lr = cfg.lr_at(step);
    let mut first_objective = f64::NAN;
    let mut last_clip_fraction = 0.0;
    for inner in 0..cfg.inner_iters {
        let (objective, grad, stats) = grpo_objective(&params, &groups, cfg, params_ref)?;
        if inner == 0 {
            first_objective = objective;
        }
        last_clip_fraction = stats.clip_fraction;
        params = params.apply_update(&grad, lr, UpdateDirection::Ascent)?;
    }
    let metrics = GrpoStepMetrics {
        step,
        mean_reward: reward_sum / (prompts.len() * g) as f64,
        objective: first_objective,
        clip_fraction: last_clip_fraction,
        zero_var_group_fraction: zero_var as f64 / prompts.len() as f64,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((params, metrics))
}

/// Run M outer steps with periodic evaluation and optional checkpoints.
/// The KL reference, when beta_kl > 0, is the initial policy snapshot.
pub fn grpo_train(
    params: PolicyParams,
    task: &Task,
    prompts: &[Vec<TokenId>],
    cfg: &GrpoConfig,
    eval: &EvalPlan,
    sink: &mut dyn MetricSink,
    run_seed: u64,
    ckpt_dir: Option<&std::path::Path>,
) -> Result<PolicyParams> {
    cfg.validate()?;
    eval.validate()?;
    let mut params = params;
    params.push_seed(run_seed);
    let params_ref = if cfg.beta_kl > 0.0 { Some(params.clone()) } else { None };
    let root = RngStream::new(run_seed, STREAM_GRPO);

    crate::osft::run_eval(&params, task, prompts, eval, cfg.max_len, &root, 0, sink)?;
    for step in 1..=cfg.outer_steps {
        let mut pick = root.substream(2 * step as u64);
        let batch: Vec<Vec<TokenId>> = (0..cfg.batch_prompts)
            .map(|_| prompts[pick.gen_range(prompts.len())].clone())
            .collect();
        let step_rng = root.substream(2 * step as u64 + 1);
        let (next, m) = grpo_step(params, &batch, task, cfg, step, &step_rng, params_ref.as_ref())?;
        params = next;
        sink.metric(&MetricRecord::new(m.step, "mean_reward", m.mean_reward))?;
        sink.metric(&MetricRecord::new(m.step, "objective", m.objective))?;
        sink.metric(&MetricRecord::new(m.step, "clip_fraction", m.clip_fraction))?;
        sink.metric(&MetricRecord::new(m.step, "zero_var_group_fraction", m.zero_var_group_fraction))?;
        sink.step_record(&serde_json::to_value(&m)?)?;
        if step % eval.every_k_steps == 0 || step == cfg.outer_steps {
            crate::osft::run_eval(&params, task, prompts, eval, cfg.max_len, &root, step, sink)?;
            if let Some(dir) = ckpt_dir {
                crate::checkpoint::save(&params, &dir.join(format!("checkpoint_step{step}.json")))?;
            }
        }
    }
    Ok(params)
}
