//! Evaluation metrics: unbiased pass@k, perplexity on self-generated
//! responses, log-probability margins between labeled paths, and entropy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::policy::{PolicyParams, TokenId};
use crate::rng::RngStream;
use crate::sampling;
use crate::tasks::Task;

/// Unbiased pass@k from n samples per problem with c_i correct.
///
/// value = mean_i [ 1 - C(n - c_i, k) / C(n, k) ]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKEstimate {
    pub n: usize,
    pub counts: Vec<usize>,
    pub k: usize,
    pub value: f64,
}

/// Exact favorable / total subset counts for one problem (n <= 64 only).
/// favorable = C(n, k) - C(n - c, k): the k-subsets containing at least one
/// correct sample.
pub fn pass_at_k_counts(n: usize, c: usize, k: usize) -> Result<(u128, u128)> {
    check_pass_args(n, c, k)?;
    if n > 64 {
        return Err(Error::Input("exact counts supported for n <= 64".into()));
    }
    let total = binomial_u128(n, k);
    let miss = binomial_u128(n - c, k);
    Ok((total - miss, total))
}

/// pass@k for one problem.
pub fn pass_at_k_single(n: usize, c: usize, k: usize) -> Result<f64> {
    check_pass_args(n, c, k)?;
    if n <= 64 {
        let (fav, total) = pass_at_k_counts(n, c, k)?;
        return Ok(fav as f64 / total as f64);
    }
    // product form of C(n-c, k) / C(n, k); exact binomials overflow here
    if n - c < k {
        return Ok(1.0);
    }
    let ratio = (1..=k).fold(1.0_f64, |acc, i| {
        acc * (n - c - k + i) as f64 / (n - k + i) as f64
    });
    Ok(1.0 - ratio)
}

/// Mean pass@k across problems.
pub fn pass_at_k(n: usize, counts: &[usize], k: usize) -> Result<PassAtKEstimate> {
    if counts.is_empty() {
        return Err(Error::Input("pass@k needs at least one problem".into()));
    }
    let mut sum = 0.0;
    for &c in counts {
        sum += pass_at_k_single(n, c, k)?;
    }
    Ok(PassAtKEstimate { n, counts: counts.to_vec(), k, value: sum / counts.len() as f64 })
}

fn check_pass_args(n: usize, c: usize, k: usize) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::Input(format!("require 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::Input(format!("correct count {c} exceeds samples {n}")));
    }
    Ok(())
}

fn binomial_u128(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 0..k {
        // exact at every step: result is C(n, i) before this line
        result = result * (n - i) as u128 / (i + 1) as u128;
    }
    result
}

/// Perplexity of the model on (prompt, output) pairs at temperature 1:
/// exp of the negative token-averaged log-likelihood. Grouping of tokens
/// into sequences does not matter, only the totals.
pub fn perplexity(params: &PolicyParams, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("perplexity needs at least one pair".into()));
    }
    let mut total_logprob = 0.0;
    let mut total_tokens = 0usize;
    for (q, o) in pairs {
        let (lp, per) = params.sequence_logprob(q, o, 1.0)?;
        total_logprob += lp;
        total_tokens += per.len();
    }
    Ok((-total_logprob / total_tokens as f64).exp())
}

/// Log-probability gap between two labeled paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginGap {
    pub from: String,
    pub to: String,
    /// logprob(from) - logprob(to)
    pub gap: f64,
}

/// Total log-probabilities (at temperature 1) of labeled token paths under
/// one policy, with all pairwise gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub labels: Vec<String>,
    pub logprobs: Vec<f64>,
    pub gaps: Vec<MarginGap>,
}

pub fn margin_report(
    params: &PolicyParams,
    prompt: &[TokenId],
    paths: &[(String, Vec<TokenId>)],
) -> Result<MarginReport> {
    if paths.is_empty() {
        return Err(Error::Input("margin report needs at least one path".into()));
    }
    let mut labels = Vec::with_capacity(paths.len());
    let mut logprobs = Vec::with_capacity(paths.len());
    for (label, tokens) in paths {
        let (total, _) = params.sequence_logprob(prompt, tokens, 1.0)?;
        labels.push(label.clone());
        logprobs.push(total);
    }
    let mut gaps = Vec::new();
    for i in 0..paths.len() {
        for j in 0..paths.len() {
            if i != j {
                gaps.push(MarginGap {
                    from: labels[i].clone(),
                    to: labels[j].clone(),
                    gap: logprobs[i] - logprobs[j],
                });
            }
        }
    }
    Ok(MarginReport { labels, logprobs, gaps })
}

/// Shannon entropy -sum p ln p, with 0 ln 0 = 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// One metric observation in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub name: String,
    pub value: f64,
    /// Deterministically ordered tags (task, method, tau, k, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

impl MetricRecord {
    pub fn new(step: usize, name: &str, value: f64) -> Self {
        Self { step, name: name.to_string(), value, tags: BTreeMap::new() }
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }
}

/// Receiver for training/evaluation metrics.
///
/// `metric` records go to the deterministic metric stream; `step_record`
/// receives the full per-step record including wall-clock timing, which is
/// inherently nondeterministic and therefore kept out of the metric stream.
pub trait MetricSink {
    fn metric(&mut self, rec: &MetricRecord) -> Result<()>;
    fn step_record(&mut self, _rec: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricSink for NullSink {
    fn metric(&mut self, _rec: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Buffers records in memory.
#[derive(Default)]
pub struct VecSink {
    pub metrics: Vec<MetricRecord>,
    pub steps: Vec<serde_json::Value>,
}

impl MetricSink for VecSink {
    fn metric(&mut self, rec: &MetricRecord) -> Result<()> {
        self.metrics.push(rec.clone());
        Ok(())
    }

    fn step_record(&mut self, rec: &serde_json::Value) -> Result<()> {
        self.steps.push(rec.clone());
        Ok(())
    }
}

/// Periodic evaluation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub every_k_steps: usize,
    pub samples_per_prompt: usize,
    pub k_list: Vec<usize>,
    pub tau_eval: Vec<f64>,
    /// Prompt-response pairs generated (at temperature 1) for the PPL metric.
    pub ppl_samples: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            every_k_steps: 20,
            samples_per_prompt: 16,
            k_list: vec![1, 8],
            tau_eval: vec![1.0],
            ppl_samples: 16,
        }
    }
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.every_k_steps < 1 {
            return Err(Error::Config("eval every_k_steps must be >= 1".into()));
        }
        if self.k_list.is_empty() || self.tau_eval.is_empty() {
            return Err(Error::Config("eval needs at least one k and one tau".into()));
        }
        let max_k = *self.k_list.iter().max().unwrap();
        if self.samples_per_prompt < max_k {
            return Err(Error::Config(format!(
                "samples_per_prompt ({}) must be >= max k ({max_k})",
                self.samples_per_prompt
            )));
        }
        if self.ppl_samples < 1 {
            return Err(Error::Config("ppl_samples must be >= 1".into()));
        }
        for &t in &self.tau_eval {
            if !(t > 0.0) {
                return Err(Error::Config(format!("tau_eval must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRow {
    pub tau: f64,
    pub k: usize,
    pub value: f64,
}

/// One evaluation snapshot. PPL is always measured at temperature 1 (the
/// policy's native distribution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<PassRow>,
    pub ppl: f64,
    pub samples_per_prompt: usize,
    pub prompt_count: usize,
    pub ppl_tau: f64,
}

impl EvalReport {
    pub fn pass_at(&self, tau: f64, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.tau - tau).abs() < 1e-12 && r.k == k)
            .map(|r| r.value)
    }
}

/// Evaluate pass@k over `prompts` at each tau in the plan, plus PPL on
/// self-generated pairs. Never mutates the policy.
pub fn evaluate_policy(
    params: &PolicyParams,
    task: &Task,
    prompts: &[Vec<TokenId>],
    plan: &EvalPlan,
    max_len: usize,
    stream: &RngStream,
) -> Result<EvalReport> {
    evaluate_policy_with(ExecMode::default(), params, task, prompts, plan, max_len, stream)
}

pub fn evaluate_policy_with(
    mode: ExecMode,
    params: &PolicyParams,
    task: &Task,
    prompts: &[Vec<TokenId>],
    plan: &EvalPlan,
    max_len: usize,
    stream: &RngStream,
) -> Result<EvalReport> {
    plan.validate()?;
    if prompts.is_empty() {
        return Err(Error::Input("evaluation needs at least one prompt".into()));
    }
    let n = plan.samples_per_prompt;
    let mut rows = Vec::new();
    for (ti, &tau) in plan.tau_eval.iter().enumerate() {
        let base = stream.substream(1000 + ti as u64);
        let rollouts = sampling::batch_rollouts_with(mode, params, prompts, n, tau, max_len, &base)?;
        let counts: Vec<usize> = prompts
            .iter()
            .enumerate()
            .map(|(i, prompt)| {
                rollouts[i * n..(i + 1) * n]
                    .iter()
                    .filter(|r| task.verify(prompt, &r.output).reward > 0.5)
                    .count()
            })
            .collect();
        for &k in &plan.k_list {
            rows.push(PassRow { tau, k, value: pass_at_k(n, &counts, k)?.value });
        }
    }

    // PPL on the policy's own responses at tau = 1
    let mut ppl_rng = stream.substream(2000);
    let ppl_prompts: Vec<Vec<TokenId>> = (0..plan.ppl_samples)
        .map(|_| prompts[ppl_rng.gen_range(prompts.len())].clone())
        .collect();
    let base = stream.substream(2001);
    let ppl_rollouts = sampling::batch_rollouts_with(mode, params, &ppl_prompts, 1, 1.0, max_len, &base)?;
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = ppl_rollouts
        .into_iter()
        .map(|r| (r.prompt, r.output))
        .collect();
    let ppl = perplexity(params, &pairs)?;

    Ok(EvalReport {
        rows,
        ppl,
        samples_per_prompt: n,
        prompt_count: prompts.len(),
        ppl_tau: 1.0,
    })
}
